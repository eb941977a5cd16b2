use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{EntryCost, MemoryLedger, OpKind};
use crate::quant::{self, CompressedActivation, GroupLayout, QuantizerState, StatsMode};
use crate::rng::{Rng, RngState};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

use super::policy::{CompressionPolicy, Granularity, Module};

/// What kind of tensor is being stored, which decides its group layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    /// Per-head `(B, heads, N, X)` tensor: queries, keys, values, attention
    /// probabilities.
    Attention,
    /// Token features `(..., C)`, grouped by channel spans. The value is the
    /// default group count (the block's head count).
    Channels(usize),
}

/// A stored activation, exact or compressed.
#[derive(Clone, Debug)]
pub enum Saved<T: Scalar> {
    Exact(Tensor<T>),
    Compressed {
        act: CompressedActivation,
        /// Exact copy kept only in shadow mode; used in place of the
        /// dequantized tensor by the backward pass.
        shadow: Option<Tensor<T>>,
    },
}

impl<T: Scalar> Saved<T> {
    pub fn is_compressed(&self) -> bool {
        matches!(self, Saved::Compressed { .. })
    }

    pub fn restore(&self) -> Tensor<T> {
        match self {
            Saved::Exact(t) => t.clone(),
            Saved::Compressed {
                shadow: Some(t), ..
            } => t.clone(),
            Saved::Compressed { act, .. } => act.dequantize().cast(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Saved::Exact(t) => t.shape(),
            Saved::Compressed { act, .. } => &act.shape,
        }
    }

    pub fn cost(&self) -> EntryCost {
        match self {
            Saved::Exact(t) => EntryCost::Exact { elements: t.len() },
            Saved::Compressed { act, .. } => EntryCost::Compressed {
                elements: act.len(),
                params: act.param_count(),
            },
        }
    }
}

/// Persistent state of one quantized slot: its parameters and its private
/// rounding stream.
#[derive(Clone, Debug)]
pub struct Quantizer {
    pub state: QuantizerState,
    pub rng: Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSnapshot {
    pub state: QuantizerState,
    pub rng: RngState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreMode {
    /// Contexts are recorded, compressed and charged to the ledger.
    Train,
    /// Inference only: nothing is compressed, charged or updated.
    Eval,
}

/// Receives every tensor that layers keep for their backward pass and
/// decides how it is stored.
///
/// Holds the compression policy, one [`Quantizer`] per stored slot and the
/// [`MemoryLedger`]. Quantizer rounding streams are derived from the run
/// seed and the slot name.
#[derive(Clone, Debug)]
pub struct ActivationStore {
    policy: CompressionPolicy,
    seed: u64,
    mode: StoreMode,
    shadow_exact: bool,
    quantizers: BTreeMap<String, Quantizer>,
    ledger: MemoryLedger,
}

impl ActivationStore {
    pub fn new(policy: CompressionPolicy, seed: u64) -> Self {
        ActivationStore {
            policy,
            seed,
            mode: StoreMode::Train,
            shadow_exact: false,
            quantizers: BTreeMap::new(),
            ledger: MemoryLedger::new(),
        }
    }

    pub fn policy(&self) -> &CompressionPolicy {
        &self.policy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: StoreMode) {
        self.mode = mode;
    }

    /// Debug mode: compress and account as usual, but let backward use an
    /// exact copy. Training then follows the uncompressed trajectory.
    pub fn set_shadow_exact(&mut self, on: bool) {
        self.shadow_exact = on;
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut MemoryLedger {
        &mut self.ledger
    }

    pub fn quantizers(&self) -> &BTreeMap<String, Quantizer> {
        &self.quantizers
    }

    pub fn snapshot_quantizers(&self) -> BTreeMap<String, QuantizerSnapshot> {
        self.quantizers
            .iter()
            .map(|(k, q)| {
                (
                    k.clone(),
                    QuantizerSnapshot {
                        state: q.state.clone(),
                        rng: q.rng.state(),
                    },
                )
            })
            .collect()
    }

    pub fn restore_quantizers(&mut self, snaps: &BTreeMap<String, QuantizerSnapshot>) {
        self.quantizers = snaps
            .iter()
            .map(|(k, s)| {
                (
                    k.clone(),
                    Quantizer {
                        state: s.state.clone(),
                        rng: Rng::from_state(&s.rng),
                    },
                )
            })
            .collect();
    }

    fn layout_for(&self, shape: &[usize], role: TensorRole) -> Result<GroupLayout> {
        let layout = match (self.policy.granularity, role) {
            (Granularity::Layer, _) => GroupLayout::layer_wise(shape)?,
            (_, TensorRole::Attention) => GroupLayout::head_wise(shape)?,
            (Granularity::Head, TensorRole::Channels(heads)) => {
                GroupLayout::channel_group(shape, heads)?
            }
            (Granularity::Channel(g), TensorRole::Channels(_)) => {
                GroupLayout::channel_group(shape, g)?
            }
        };
        Ok(layout)
    }

    /// Stores `x` for layer `layer` under `tag`.
    pub fn save<T: Scalar>(
        &mut self,
        layer: &str,
        tag: &str,
        op: OpKind,
        module: Module,
        role: TensorRole,
        x: &Tensor<T>,
    ) -> Result<Saved<T>> {
        if self.mode == StoreMode::Eval {
            return Ok(Saved::Exact(x.clone()));
        }
        // oracle precision bypasses compression entirely
        let compress = T::PRECISION == Precision::Standard && self.policy.compresses(op, module);
        let saved = if compress {
            let layout = self.layout_for(x.shape(), role)?;
            let key = format!("{layer}.{tag}");
            let seed = self.seed;
            let quant_cfg = self.policy.quant;
            let q = self
                .quantizers
                .entry(key.clone())
                .or_insert_with(|| Quantizer {
                    state: QuantizerState::new(quant_cfg),
                    rng: Rng::derive(seed, &key),
                });
            let xf: Tensor<f32> = x.cast();
            let act = match q.state.stats {
                StatsMode::PerSample => quant::quantize(&xf, &q.state, &layout, &mut q.rng)?,
                StatsMode::RunningEstimate => {
                    if q.state.initialized {
                        // quantize with the current estimate, then fold in
                        // this batch's raw extrema
                        let act = quant::quantize(&xf, &q.state, &layout, &mut q.rng)?;
                        q.state.update_running_estimates(&xf, &layout)?;
                        act
                    } else {
                        q.state.init_params(&xf, &layout)?;
                        quant::quantize(&xf, &q.state, &layout, &mut q.rng)?
                    }
                }
            };
            Saved::Compressed {
                act,
                shadow: self.shadow_exact.then(|| x.clone()),
            }
        } else {
            Saved::Exact(x.clone())
        };
        self.ledger.record_store(layer, op, saved.cost());
        Ok(saved)
    }

    /// Stores small full-precision statistics; never compressed.
    pub fn save_aux<T: Scalar>(&mut self, layer: &str, op: OpKind, x: Tensor<T>) -> Tensor<T> {
        if self.mode == StoreMode::Train {
            self.ledger
                .record_store(layer, op, EntryCost::Aux { elements: x.len() });
        }
        x
    }
}

/// Tensors one layer keeps between its forward and backward pass.
#[derive(Debug)]
pub struct LayerContext<T: Scalar> {
    layer: String,
    entries: Vec<(&'static str, Saved<T>)>,
    aux: Vec<(&'static str, Tensor<T>)>,
    charged: bool,
    consumed: bool,
}

/// Contents of a consumed [`LayerContext`].
#[derive(Debug)]
pub struct ContextData<T: Scalar> {
    entries: Vec<(&'static str, Saved<T>)>,
    aux: Vec<(&'static str, Tensor<T>)>,
}

impl<T: Scalar> LayerContext<T> {
    pub fn new(layer: impl Into<String>, store: &ActivationStore) -> Self {
        LayerContext {
            layer: layer.into(),
            entries: Vec::new(),
            aux: Vec::new(),
            charged: store.mode() == StoreMode::Train,
            consumed: false,
        }
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn push(&mut self, tag: &'static str, saved: Saved<T>) {
        self.entries.push((tag, saved));
    }

    pub fn push_aux(&mut self, tag: &'static str, t: Tensor<T>) {
        self.aux.push((tag, t));
    }

    pub fn tags(&self) -> Vec<&'static str> {
        self.entries
            .iter()
            .map(|(t, _)| *t)
            .chain(self.aux.iter().map(|(t, _)| *t))
            .collect()
    }

    pub fn entries(&self) -> &[(&'static str, Saved<T>)] {
        &self.entries
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Hands the stored tensors to a backward pass. A context can be taken
    /// once; its bytes are released from the ledger.
    pub fn take(&mut self, store: &mut ActivationStore) -> Result<ContextData<T>> {
        if self.consumed {
            return Err(Error::ContextConsumed(self.layer.clone()));
        }
        self.consumed = true;
        if self.charged {
            let mut costs: Vec<EntryCost> = self.entries.iter().map(|(_, s)| s.cost()).collect();
            costs.extend(
                self.aux
                    .iter()
                    .map(|(_, t)| EntryCost::Aux { elements: t.len() }),
            );
            store.ledger_mut().record_release(&costs);
        }
        Ok(ContextData {
            entries: std::mem::take(&mut self.entries),
            aux: std::mem::take(&mut self.aux),
        })
    }
}

impl<T: Scalar> ContextData<T> {
    /// Exact or dequantized tensor stored under `tag`.
    pub fn get(&self, tag: &str) -> Result<Tensor<T>> {
        self.entries
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, s)| s.restore())
            .ok_or_else(|| Error::ContextMismatch(format!("no entry `{tag}`")))
    }

    pub fn aux(&self, tag: &str) -> Result<&Tensor<T>> {
        self.aux
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::ContextMismatch(format!("no aux entry `{tag}`")))
    }
}
