use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::OpKind;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::activation::{softmax_backward, softmax_forward};
use super::linear::Linear;
use super::policy::Module;
use super::store::{ActivationStore, LayerContext, TensorRole};
use super::{Grads, ParamsMut, ParamsRef};

/// Multi-head self-attention with a fused QKV projection.
///
/// Stored tensors, all under [`Module::Msa`]:
/// the QKV input and the output-projection input (channel groups);
/// Q and K for the logits matmul, the softmax output, and the
/// probabilities and V for the weighted sum (head-wise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Attention<T: Scalar> {
    /// `(D, 3D)`, output columns ordered `[q | k | v]`, heads contiguous
    /// within each.
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

#[derive(Debug)]
pub struct AttentionCtx<T: Scalar> {
    pub qkv: LayerContext<T>,
    pub scores: LayerContext<T>,
    pub softmax: LayerContext<T>,
    pub context: LayerContext<T>,
    pub proj: LayerContext<T>,
    shape: (usize, usize, usize),
}

impl<T: Scalar> AttentionCtx<T> {
    pub fn contexts(&self) -> [&LayerContext<T>; 5] {
        [
            &self.qkv,
            &self.scores,
            &self.softmax,
            &self.context,
            &self.proj,
        ]
    }
}

impl<T: Scalar> Attention<T> {
    pub fn new(qkv: Linear<T>, proj: Linear<T>, heads: usize) -> Result<Self> {
        let d = proj.in_features();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if qkv.in_features() != d || qkv.out_features() != 3 * d || proj.out_features() != d {
            return Err(Error::shape(
                "attention",
                qkv.weight.shape(),
                proj.weight.shape(),
            ));
        }
        Ok(Attention { qkv, proj, heads })
    }

    pub fn init(dim: usize, heads: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let qkv = Linear::init(dim, 3 * dim, std, rng);
        let proj = Linear::init(dim, dim, std, rng);
        Self::new(qkv, proj, heads)
    }

    pub fn dim(&self) -> usize {
        self.proj.in_features()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    fn scale(&self) -> T {
        T::from_f64(1.0 / (self.head_dim() as f64).sqrt())
    }

    /// `(B, N, 3D)` -> three `(B, heads, N, Dh)` tensors.
    fn split_heads(&self, qkv: &Tensor<T>, b: usize, n: usize) -> Result<[Tensor<T>; 3]> {
        let (h, dh) = (self.heads, self.head_dim());
        let stacked = qkv
            .reshape([b, n, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?
            .into_data();
        let part = b * h * n * dh;
        let mk = |i: usize| Tensor::new([b, h, n, dh], stacked[i * part..(i + 1) * part].to_vec());
        Ok([mk(0)?, mk(1)?, mk(2)?])
    }

    /// Inverse of [`split_heads`](Self::split_heads).
    fn merge_qkv(&self, parts: [Tensor<T>; 3], b: usize, n: usize) -> Result<Tensor<T>> {
        let (h, dh) = (self.heads, self.head_dim());
        let mut data = Vec::with_capacity(3 * b * n * h * dh);
        for p in parts {
            data.extend(p.into_data());
        }
        Tensor::new([3, b, h, n, dh], data)?
            .permute(&[1, 3, 0, 2, 4])?
            .into_reshape([b, n, 3 * h * dh])
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        if x.rank() != 3 || x.shape()[2] != self.dim() {
            return Err(Error::shape("attention", x.shape(), &[0, 0, self.dim()]));
        }
        Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n, d) = self.check_input(x)?;
        let [q, k, v] = self.split_heads(&self.qkv.infer(x)?, b, n)?;
        let probs = q.matmul(&k.transpose()?)?.scale(self.scale())?.softmax(3)?;
        let out = probs
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .into_reshape([b, n, d])?;
        self.proj.infer(&out)
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        layer: &str,
        store: &mut ActivationStore,
    ) -> Result<(Tensor<T>, AttentionCtx<T>)> {
        let (b, n, d) = self.check_input(x)?;
        let m = Module::Msa;
        let groups = self.heads;
        let qkv_name = format!("{layer}.qkv");
        let (qkv_out, qkv_ctx) = self.qkv.forward(x, &qkv_name, m, groups, store)?;
        let [q, k, v] = self.split_heads(&qkv_out, b, n)?;

        let scores_name = format!("{layer}.scores");
        let mut scores = LayerContext::new(&scores_name, store);
        let att = TensorRole::Attention;
        scores.push(
            "q",
            store.save(&scores_name, "q", OpKind::MatMul, m, att, &q)?,
        );
        scores.push(
            "k",
            store.save(&scores_name, "k", OpKind::MatMul, m, att, &k)?,
        );
        let logits = q.matmul(&k.transpose()?)?.scale(self.scale())?;

        let (probs, softmax) = softmax_forward(&logits, &format!("{layer}.softmax"), m, store)?;

        let context_name = format!("{layer}.context");
        let mut context = LayerContext::new(&context_name, store);
        context.push(
            "probs",
            store.save(&context_name, "probs", OpKind::MatMul, m, att, &probs)?,
        );
        context.push(
            "v",
            store.save(&context_name, "v", OpKind::MatMul, m, att, &v)?,
        );
        let out = probs
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .into_reshape([b, n, d])?;

        let (y, proj) = self
            .proj
            .forward(&out, &format!("{layer}.proj"), m, groups, store)?;
        Ok((
            y,
            AttentionCtx {
                qkv: qkv_ctx,
                scores,
                softmax,
                context,
                proj,
                shape: (b, n, d),
            },
        ))
    }

    pub fn backward(
        &self,
        ctx: &mut AttentionCtx<T>,
        dy: &Tensor<T>,
        store: &mut ActivationStore,
    ) -> Result<(Tensor<T>, Grads<T>)> {
        let (b, n, _) = ctx.shape;
        let (h, dh) = (self.heads, self.head_dim());
        let (dmerged, mut grads) = self.proj.backward(&mut ctx.proj, dy, store)?;
        let dout = dmerged
            .into_reshape([b, n, h, dh])?
            .permute(&[0, 2, 1, 3])?;

        let c = ctx.context.take(store)?;
        let (probs, v) = (c.get("probs")?, c.get("v")?);
        let dprobs = dout.matmul(&v.transpose()?)?;
        let dv = probs.transpose()?.matmul(&dout)?;

        let dlogits = softmax_backward(&mut ctx.softmax, &dprobs, store)?.scale(self.scale())?;

        let s = ctx.scores.take(store)?;
        let (q, k) = (s.get("q")?, s.get("k")?);
        let dq = dlogits.matmul(&k)?;
        let dk = dlogits.transpose()?.matmul(&q)?;

        let dqkv = self.merge_qkv([dq, dk, dv], b, n)?;
        let (dx, qkv_grads) = self.qkv.backward(&mut ctx.qkv, &dqkv, store)?;
        grads.extend(qkv_grads);
        Ok((dx, grads))
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut ParamsRef<'a, T>) {
        self.qkv.params(&format!("{prefix}.qkv"), out);
        self.proj.params(&format!("{prefix}.proj"), out);
    }

    pub(crate) fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        self.qkv.params_mut(&format!("{prefix}.qkv"), out);
        self.proj.params_mut(&format!("{prefix}.proj"), out);
    }
}
