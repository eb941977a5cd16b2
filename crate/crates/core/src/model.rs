//! A small DeiT-style classifier over token sequences.
//!
//! `embed -> depth x (x + MSA(LN(x)), x + FFN(LN(x))) -> LN -> mean-pool -> linear`

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    ActivationStore, Attention, AttentionCtx, Grads, LayerContext, LayerNorm, Linear, Mlp, MlpCtx,
    Module, ParamsMut, ParamsRef,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 2,
            dim: 32,
            heads: 4,
            seq_len: 16,
            mlp_ratio: 4,
            num_classes: 2,
            vocab_size: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Block<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Debug)]
pub struct BlockCtx<T: Scalar> {
    pub ln1: LayerContext<T>,
    pub attn: AttentionCtx<T>,
    pub ln2: LayerContext<T>,
    pub mlp: MlpCtx<T>,
}

impl<T: Scalar> Block<T> {
    fn forward(
        &self,
        x: &Tensor<T>,
        name: &str,
        store: &mut ActivationStore,
    ) -> Result<(Tensor<T>, BlockCtx<T>)> {
        let groups = self.attn.heads;
        let (h, ln1) = self
            .ln1
            .forward(x, &format!("{name}.ln1"), Module::Msa, groups, store)?;
        let (a, attn) = self.attn.forward(&h, &format!("{name}.attn"), store)?;
        let x1 = x.add(&a)?;
        let (h, ln2) = self
            .ln2
            .forward(&x1, &format!("{name}.ln2"), Module::Ffn, groups, store)?;
        let (m, mlp) = self
            .mlp
            .forward(&h, &format!("{name}.mlp"), groups, store)?;
        Ok((
            x1.add(&m)?,
            BlockCtx {
                ln1,
                attn,
                ln2,
                mlp,
            },
        ))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x1 = x.add(&self.attn.infer(&self.ln1.infer(x)?)?)?;
        x1.add(&self.mlp.infer(&self.ln2.infer(&x1)?)?)
    }

    fn backward(
        &self,
        ctx: &mut BlockCtx<T>,
        dy: &Tensor<T>,
        store: &mut ActivationStore,
    ) -> Result<(Tensor<T>, Grads<T>)> {
        let (dh, mut grads) = self.mlp.backward(&mut ctx.mlp, dy, store)?;
        let (dln2, g) = self.ln2.backward(&mut ctx.ln2, &dh, store)?;
        grads.extend(g);
        let dx1 = dy.add(&dln2)?;
        let (dh, g) = self.attn.backward(&mut ctx.attn, &dx1, store)?;
        grads.extend(g);
        let (dln1, g) = self.ln1.backward(&mut ctx.ln1, &dh, store)?;
        grads.extend(g);
        Ok((dx1.add(&dln1)?, grads))
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut ParamsRef<'a, T>) {
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.attn.params(&format!("{prefix}.attn"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.mlp.params(&format!("{prefix}.mlp"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        self.ln1.params_mut(&format!("{prefix}.ln1"), out);
        self.attn.params_mut(&format!("{prefix}.attn"), out);
        self.ln2.params_mut(&format!("{prefix}.ln2"), out);
        self.mlp.params_mut(&format!("{prefix}.mlp"), out);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    /// `(vocab, D)`
    pub tok_embed: Tensor<T>,
    /// `(N, D)`
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

/// Everything the forward pass kept for backward. Single use.
#[derive(Debug)]
pub struct ModelTape<T: Scalar> {
    tokens: Vec<usize>,
    batch: usize,
    pub blocks: Vec<BlockCtx<T>>,
    pub norm: LayerContext<T>,
    pub head: LayerContext<T>,
}

impl<T: Scalar> ModelTape<T> {
    /// Every layer context, in forward order.
    pub fn contexts(&self) -> Vec<&LayerContext<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.ln1);
            out.extend(b.attn.contexts());
            out.push(&b.ln2);
            out.extend(b.mlp.contexts());
        }
        out.push(&self.norm);
        out.push(&self.head);
        out
    }
}

/// Named gradients in the model's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, "init");
        let d = config.dim;
        let mut randn =
            |shape: [usize; 2]| Tensor::from_fn(shape, |_| T::from_f64(rng.normal(0.0, INIT_STD)));
        let tok_embed = randn([config.vocab_size, d])?;
        let pos_embed = randn([config.seq_len, d])?;
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            blocks.push(Block {
                ln1: LayerNorm::new(d),
                attn: Attention::init(d, config.heads, INIT_STD, &mut rng)?,
                ln2: LayerNorm::new(d),
                mlp: Mlp::init(d, config.hidden(), INIT_STD, &mut rng),
            });
        }
        let head = Linear::init(d, config.num_classes, INIT_STD, &mut rng);
        Ok(Model {
            config,
            tok_embed,
            pos_embed,
            blocks,
            norm: LayerNorm::new(d),
            head,
        })
    }

    /// Closed-form parameter count for a configuration.
    pub fn expected_param_count(c: &ModelConfig) -> usize {
        let (d, h) = (c.dim, c.hidden());
        let block = 2 * (2 * d) // two layernorms
            + (d * 3 * d + 3 * d) // qkv
            + (d * d + d) // proj
            + (d * h + h) // fc1
            + (h * d + d); // fc2
        c.vocab_size * d
            + c.seq_len * d
            + c.depth * block
            + 2 * d
            + d * c.num_classes
            + c.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: ParamsRef<T> = vec![
            ("tok_embed".into(), &self.tok_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("blocks.{i}"), &mut out);
        }
        self.norm.params("norm", &mut out);
        self.head.params("head", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: ParamsMut<T> = vec![
            ("tok_embed".into(), &mut self.tok_embed),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&format!("blocks.{i}"), &mut out);
        }
        self.norm.params_mut("norm", &mut out);
        self.head.params_mut("head", &mut out);
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.config, 0).expect("valid config");
        let src = self.params();
        for ((_, dst), (_, s)) in out.params_mut().into_iter().zip(src) {
            *dst = s.cast();
        }
        out
    }

    fn embed(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        let (n, d) = (self.config.seq_len, self.config.dim);
        if batch == 0 || tokens.len() != batch * n {
            return Err(Error::shape("embed", &[tokens.len()], &[batch, n]));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Config(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let e = self.tok_embed.data();
        let p = self.pos_embed.data();
        let mut data = Vec::with_capacity(batch * n * d);
        for (i, &t) in tokens.iter().enumerate() {
            let pos = i % n;
            data.extend((0..d).map(|j| e[t * d + j] + p[pos * d + j]));
        }
        Tensor::new([batch, n, d], data)
    }

    /// Class logits `(B, classes)` for `B` sequences of `seq_len` tokens,
    /// plus the tape for [`backward`](Self::backward).
    pub fn forward(
        &self,
        tokens: &[usize],
        batch: usize,
        store: &mut ActivationStore,
    ) -> Result<(Tensor<T>, ModelTape<T>)> {
        let mut x = self.embed(tokens, batch)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, ctx) = b.forward(&x, &format!("blocks.{i}"), store)?;
            blocks.push(ctx);
            x = y;
        }
        let groups = self.config.heads;
        let (y, norm) = self.norm.forward(&x, "norm", Module::Head, groups, store)?;
        let pooled = y.mean_axis(1)?;
        let (logits, head) = self
            .head
            .forward(&pooled, "head", Module::Head, groups, store)?;
        Ok((
            logits,
            ModelTape {
                tokens: tokens.to_vec(),
                batch,
                blocks,
                norm,
                head,
            },
        ))
    }

    /// Forward pass that stores nothing.
    pub fn infer(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        let mut x = self.embed(tokens, batch)?;
        for b in &self.blocks {
            x = b.infer(&x)?;
        }
        let pooled = self.norm.infer(&x)?.mean_axis(1)?;
        self.head.infer(&pooled)
    }

    pub fn backward(
        &self,
        tape: &mut ModelTape<T>,
        dlogits: &Tensor<T>,
        store: &mut ActivationStore,
    ) -> Result<Gradients<T>> {
        let (b, n, d) = (tape.batch, self.config.seq_len, self.config.dim);
        let mut all: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let (dpooled, g) = self.head.backward(&mut tape.head, dlogits, store)?;
        all.extend(g);
        let inv_n = T::from_f64(1.0 / n as f64);
        let dy = Tensor::from_fn([b, n, d], |i| {
            dpooled.data()[(i / (n * d)) * d + i % d] * inv_n
        })?;
        let (mut dx, g) = self.norm.backward(&mut tape.norm, &dy, store)?;
        all.extend(g);
        for (block, ctx) in self.blocks.iter().zip(tape.blocks.iter_mut()).rev() {
            let (next, g) = block.backward(ctx, &dx, store)?;
            all.extend(g);
            dx = next;
        }
        let mut dtok = Tensor::<T>::zeros(self.tok_embed.shape());
        let mut dpos = Tensor::<T>::zeros(self.pos_embed.shape());
        for (i, &t) in tape.tokens.iter().enumerate() {
            let pos = i % n;
            let row = &dx.data()[i * d..(i + 1) * d];
            for (j, &g) in row.iter().enumerate() {
                dtok.data_mut()[t * d + j] += g;
                dpos.data_mut()[pos * d + j] += g;
            }
        }
        all.insert("tok_embed".into(), dtok);
        all.insert("pos_embed".into(), dpos);

        let mut entries = Vec::with_capacity(all.len());
        for (name, _) in self.params() {
            let g = all
                .remove(&name)
                .ok_or_else(|| Error::ContextMismatch(format!("no gradient for {name}")))?;
            entries.push((name, g));
        }
        Ok(Gradients { entries })
    }
}

/// Mean softmax cross-entropy over the batch, its gradient w.r.t. the
/// logits, and the number of correct argmax predictions.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>, usize)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[labels.len()],
        ));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let probs = logits.softmax(1)?;
    let inv_b = T::from_f64(1.0 / b as f64);
    let mut loss = T::ZERO;
    let mut grad = probs.data().to_vec();
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Config(format!("label {y} outside {c} classes")));
        }
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(row[0], T::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        loss += lse - row[y];
        grad[i * c + y] -= T::ONE;
        let pred = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        if pred == y {
            correct += 1;
        }
    }
    for g in &mut grad {
        *g *= inv_b;
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "cross_entropy",
        });
    }
    Ok((loss, Tensor::new(logits.shape(), grad)?, correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::layers::CompressionPolicy;

    fn tokens(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<usize> {
        let mut rng = Rng::new(seed);
        (0..batch * cfg.seq_len)
            .map(|_| rng.below(cfg.vocab_size))
            .collect()
    }

    #[test]
    fn closed_form_parameter_count() {
        let cfg = ModelConfig::default();
        let m = Model::<f32>::new(cfg, 0).unwrap();
        // embeddings 16*32 + 16*32; per block: 4*32 (norms) + 32*96+96 + 32*32+32
        // + 32*128+128 + 128*32+32; final norm 64; head 32*2+2
        let block = 128 + 3168 + 1056 + 4224 + 4128;
        assert_eq!(block, 12704);
        assert_eq!(m.param_count(), 512 + 512 + 2 * block + 64 + 66);
        assert_eq!(m.param_count(), Model::<f32>::expected_param_count(&cfg));
        assert_eq!(m.param_count(), 26_562);
    }

    #[test]
    fn forward_shape_and_infer_agree() {
        let cfg = ModelConfig::default();
        let m = Model::<f32>::new(cfg, 1).unwrap();
        let toks = tokens(&cfg, 3, 2);
        let mut store = ActivationStore::new(CompressionPolicy::all(), 0);
        let (logits, tape) = m.forward(&toks, 3, &mut store).unwrap();
        assert_eq!(logits.shape(), &[3, 2]);
        assert_eq!(logits, m.infer(&toks, 3).unwrap());
        // per block: ln1, five attention contexts, ln2, three MLP contexts
        assert_eq!(tape.contexts().len(), 2 * 10 + 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = ModelConfig::default();
        let m = Model::<f32>::new(cfg, 1).unwrap();
        assert!(m.infer(&[0; 10], 1).is_err());
        assert!(m.infer(&[99; 16], 1).is_err());
        let bad = ModelConfig { dim: 30, ..cfg };
        assert!(matches!(Model::<f32>::new(bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = Rng::new(3);
        let z = Tensor::from_fn([4, 3], |_| rng.normal(0.0, 2.0)).unwrap();
        let labels = [0, 2, 1, 2];
        let (_, g, _) = cross_entropy(&z, &labels).unwrap();
        let fd = central_difference(&z, 1e-6, |z| cross_entropy(z, &labels).unwrap().0);
        assert!(relative_error(&g, &fd) <= 1e-7);
    }

    #[test]
    fn small_model_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            seq_len: 3,
            mlp_ratio: 2,
            num_classes: 3,
            vocab_size: 5,
        };
        let mut m = Model::<f64>::new(cfg, 4).unwrap();
        // larger weights so every path carries signal
        let mut rng = Rng::new(5);
        for (_, p) in m.params_mut() {
            for v in p.data_mut() {
                *v += rng.normal(0.0, 0.3);
            }
        }
        let toks = tokens(&cfg, 2, 6);
        let labels = [1, 2];
        let mut store = ActivationStore::new(CompressionPolicy::all(), 0);
        let (logits, mut tape) = m.forward(&toks, 2, &mut store).unwrap();
        let (_, dl, _) = cross_entropy(&logits, &labels).unwrap();
        let grads = m.backward(&mut tape, &dl, &mut store).unwrap();
        assert_eq!(grads.len(), m.params().len());
        assert!(matches!(
            m.backward(&mut tape, &dl, &mut store),
            Err(Error::ContextConsumed(_))
        ));

        for (name, g) in &grads.entries {
            let base = m.clone();
            let p = base
                .params()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .clone();
            let fd = central_difference(&p, 1e-5, |v| {
                let mut probe = base.clone();
                *probe.param_mut(name).unwrap() = v.clone();
                cross_entropy(&probe.infer(&toks, 2).unwrap(), &labels)
                    .unwrap()
                    .0
            });
            let err = relative_error(g, &fd);
            assert!(err <= 1e-5, "{name}: {err}");
        }
    }
}
