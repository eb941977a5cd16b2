use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::OpKind;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::policy::Module;
use super::store::{ActivationStore, LayerContext, TensorRole};
use super::{Grads, ParamsMut, ParamsRef};

/// `y = x W + b` over the last axis. Stores its input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Linear<T: Scalar> {
    /// `(in, out)`
    pub weight: Tensor<T>,
    /// `(out)`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape("linear", weight.shape(), bias.shape()));
        }
        Ok(Linear { weight, bias })
    }

    pub fn init(input: usize, output: usize, std: f64, rng: &mut Rng) -> Self {
        let weight = Tensor::from_fn([input, output], |_| T::from_f64(rng.normal(0.0, std)))
            .expect("finite init");
        Linear {
            weight,
            bias: Tensor::zeros([output]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let din = self.in_features();
        if x.last_dim() != din {
            return Err(Error::shape("linear", x.shape(), self.weight.shape()));
        }
        let rows = x.len() / din;
        let y = x
            .reshape([rows, din])?
            .matmul(&self.weight)?
            .add_row(&self.bias)?;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = self.out_features();
        y.into_reshape(shape)
    }

    /// Forward without storing anything.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x)
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        layer: &str,
        module: Module,
        groups: usize,
        store: &mut ActivationStore,
    ) -> Result<(Tensor<T>, LayerContext<T>)> {
        let y = self.apply(x)?;
        let mut ctx = LayerContext::new(layer, store);
        ctx.push(
            "input",
            store.save(
                layer,
                "input",
                OpKind::MatMul,
                module,
                TensorRole::Channels(groups),
                x,
            )?,
        );
        Ok((y, ctx))
    }

    /// Returns `dx` and the weight/bias gradients named after the layer.
    pub fn backward(
        &self,
        ctx: &mut LayerContext<T>,
        dy: &Tensor<T>,
        store: &mut ActivationStore,
    ) -> Result<(Tensor<T>, Grads<T>)> {
        let data = ctx.take(store)?;
        let x = data.get("input")?;
        let (din, dout) = (self.in_features(), self.out_features());
        let rows = x.len() / din;
        if dy.len() != rows * dout {
            return Err(Error::shape("linear backward", dy.shape(), x.shape()));
        }
        let x2 = x.reshape([rows, din])?;
        let dy2 = dy.reshape([rows, dout])?;
        let dw = x2.transpose()?.matmul(&dy2)?;
        let db = dy2.sum_rows();
        let dx = dy2
            .matmul(&self.weight.transpose()?)?
            .into_reshape(x.shape())?;
        let layer = ctx.layer();
        Ok((
            dx,
            vec![
                (format!("{layer}.weight"), dw),
                (format!("{layer}.bias"), db),
            ],
        ))
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut ParamsRef<'a, T>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}
