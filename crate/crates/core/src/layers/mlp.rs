use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::activation::{gelu_backward, gelu_forward};
use super::linear::Linear;
use super::policy::Module;
use super::store::{ActivationStore, LayerContext};
use super::{Grads, ParamsMut, ParamsRef};

/// Position-wise feed-forward: linear, GELU, linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug)]
pub struct MlpCtx<T: Scalar> {
    pub fc1: LayerContext<T>,
    pub gelu: LayerContext<T>,
    pub fc2: LayerContext<T>,
}

impl<T: Scalar> MlpCtx<T> {
    pub fn contexts(&self) -> [&LayerContext<T>; 3] {
        [&self.fc1, &self.gelu, &self.fc2]
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn init(dim: usize, hidden: usize, std: f64, rng: &mut Rng) -> Self {
        Mlp {
            fc1: Linear::init(dim, hidden, std, rng),
            fc2: Linear::init(hidden, dim, std, rng),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.infer(&self.fc1.infer(x)?.gelu()?)
    }

    /// `groups` is the channel-group count for the stored tensors.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        layer: &str,
        groups: usize,
        store: &mut ActivationStore,
    ) -> Result<(Tensor<T>, MlpCtx<T>)> {
        let m = Module::Ffn;
        let (h, fc1) = self
            .fc1
            .forward(x, &format!("{layer}.fc1"), m, groups, store)?;
        let (g, gelu) = gelu_forward(&h, &format!("{layer}.gelu"), m, groups, store)?;
        let (y, fc2) = self
            .fc2
            .forward(&g, &format!("{layer}.fc2"), m, groups, store)?;
        Ok((y, MlpCtx { fc1, gelu, fc2 }))
    }

    pub fn backward(
        &self,
        ctx: &mut MlpCtx<T>,
        dy: &Tensor<T>,
        store: &mut ActivationStore,
    ) -> Result<(Tensor<T>, Grads<T>)> {
        let (dg, mut grads) = self.fc2.backward(&mut ctx.fc2, dy, store)?;
        let dh = gelu_backward(&mut ctx.gelu, &dg, store)?;
        let (dx, g1) = self.fc1.backward(&mut ctx.fc1, &dh, store)?;
        grads.extend(g1);
        Ok((dx, grads))
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut ParamsRef<'a, T>) {
        self.fc1.params(&format!("{prefix}.fc1"), out);
        self.fc2.params(&format!("{prefix}.fc2"), out);
    }

    pub(crate) fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        self.fc1.params_mut(&format!("{prefix}.fc1"), out);
        self.fc2.params_mut(&format!("{prefix}.fc2"), out);
    }
}
