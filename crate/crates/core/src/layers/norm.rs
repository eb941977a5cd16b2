use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::OpKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::policy::Module;
use super::store::{ActivationStore, LayerContext, TensorRole};
use super::{Grads, ParamsMut, ParamsRef};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis.
///
/// Stores the normalized input (compressible) plus the per-row mean and
/// inverse standard deviation in full precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones([dim]),
            beta: Tensor::zeros([dim]),
            eps: LAYERNORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layernorm(&self.gamma, &self.beta, self.eps)
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        layer: &str,
        module: Module,
        groups: usize,
        store: &mut ActivationStore,
    ) -> Result<(Tensor<T>, LayerContext<T>)> {
        let (y, normed, means, rstds) = x.layernorm_parts(&self.gamma, &self.beta, self.eps)?;
        let mut ctx = LayerContext::new(layer, store);
        ctx.push(
            "normalized",
            store.save(
                layer,
                "normalized",
                OpKind::LayerNorm,
                module,
                TensorRole::Channels(groups),
                &normed,
            )?,
        );
        let rows = means.len();
        ctx.push_aux(
            "mean",
            store.save_aux(layer, OpKind::LayerNorm, Tensor::new([rows], means)?),
        );
        ctx.push_aux(
            "inv_std",
            store.save_aux(layer, OpKind::LayerNorm, Tensor::new([rows], rstds)?),
        );
        Ok((y, ctx))
    }

    pub fn backward(
        &self,
        ctx: &mut LayerContext<T>,
        dy: &Tensor<T>,
        store: &mut ActivationStore,
    ) -> Result<(Tensor<T>, Grads<T>)> {
        let data = ctx.take(store)?;
        let normed = data.get("normalized")?;
        let rstd = data.aux("inv_std")?;
        if normed.shape() != dy.shape() {
            return Err(Error::shape(
                "layernorm backward",
                dy.shape(),
                normed.shape(),
            ));
        }
        let d = self.dim();
        let inv_d = T::from_f64(1.0 / d as f64);
        let dgamma = dy.mul(&normed)?.sum_rows();
        let dbeta = dy.sum_rows();
        let mut dx = vec![T::ZERO; dy.len()];
        let g = self.gamma.data();
        for (r, ((dyr, nr), dxr)) in dy
            .data()
            .chunks_exact(d)
            .zip(normed.data().chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .enumerate()
        {
            let mut mean_dn = T::ZERO;
            let mut mean_dn_n = T::ZERO;
            for j in 0..d {
                let dn = dyr[j] * g[j];
                mean_dn += dn;
                mean_dn_n += dn * nr[j];
            }
            mean_dn *= inv_d;
            mean_dn_n *= inv_d;
            let s = rstd.data()[r];
            for j in 0..d {
                dxr[j] = s * (dyr[j] * g[j] - mean_dn - nr[j] * mean_dn_n);
            }
        }
        let layer = ctx.layer();
        Ok((
            Tensor::new(dy.shape(), dx)?,
            vec![
                (format!("{layer}.gamma"), dgamma),
                (format!("{layer}.beta"), dbeta),
            ],
        ))
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut ParamsRef<'a, T>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub(crate) fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}
