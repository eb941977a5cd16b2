//! 8-bit activation quantization.
//!
//! Asymmetric scheme, per group `g`:
//!
//! ```text
//! code = clip(round((x - beta[g]) * 255 / alpha[g]), 0, 255)
//! x^   = code * alpha[g] / 255 + beta[g]
//! ```
//!
//! `alpha` is the clipping range and `beta` the offset, both in activation
//! units. They come either from running estimates kept in a
//! [`QuantizerState`] or, in per-sample mode, from the min/max of each
//! (sample, group) of the tensor being compressed.

mod layout;

pub use layout::{GroupLayout, LayoutKind, Run};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Precision;
use crate::tensor::Tensor;

/// Lower bound on the clipping range; keeps `255 / alpha` finite for
/// constant groups.
pub const ALPHA_FLOOR: f32 = 1e-8;

/// Decay used for running estimates unless configured otherwise.
pub const DEFAULT_LAMBDA: f32 = 0.9;

pub const LEVELS: f32 = 255.0;

const SYMMETRIC_ZERO: f32 = 128.0;
const SYMMETRIC_HALF_RANGE: f32 = 127.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Asymmetric,
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    Stochastic,
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsMode {
    RunningEstimate,
    PerSample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct QuantConfig {
    pub scheme: Scheme,
    pub rounding: Rounding,
    pub stats: StatsMode,
    pub lambda: f32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            scheme: Scheme::Asymmetric,
            rounding: Rounding::Stochastic,
            stats: StatsMode::RunningEstimate,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1), got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Persistent per-group quantization parameters of one stored activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
    pub lambda: f32,
    pub scheme: Scheme,
    pub rounding: Rounding,
    pub stats: StatsMode,
    pub initialized: bool,
}

/// Per-group minimum and maximum.
pub fn group_min_max(x: &Tensor<f32>, layout: &GroupLayout) -> Result<(Vec<f32>, Vec<f32>)> {
    layout.check_shape(x.shape())?;
    let g = layout.group_count();
    let mut mins = vec![f32::INFINITY; g];
    let mut maxs = vec![f32::NEG_INFINITY; g];
    let data = x.data();
    for run in layout.runs() {
        let (mut lo, mut hi) = (mins[run.group], maxs[run.group]);
        for &v in &data[run.start..run.start + run.len] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        mins[run.group] = lo;
        maxs[run.group] = hi;
    }
    if mins.iter().any(|m| m.is_infinite()) {
        return Err(Error::Layout("layout has an empty group".into()));
    }
    Ok((mins, maxs))
}

/// Per-group maximum absolute value.
pub fn group_abs_max(x: &Tensor<f32>, layout: &GroupLayout) -> Result<Vec<f32>> {
    let (mins, maxs) = group_min_max(x, layout)?;
    Ok(mins
        .iter()
        .zip(&maxs)
        .map(|(lo, hi)| lo.abs().max(hi.abs()))
        .collect())
}

/// `(alpha, beta)` for every group of `x`, straight from its statistics.
fn current_params(
    x: &Tensor<f32>,
    layout: &GroupLayout,
    scheme: Scheme,
) -> Result<(Vec<f32>, Vec<f32>)> {
    match scheme {
        Scheme::Asymmetric => {
            let (mins, maxs) = group_min_max(x, layout)?;
            let alpha = mins
                .iter()
                .zip(&maxs)
                .map(|(lo, hi)| (hi - lo).max(ALPHA_FLOOR))
                .collect();
            Ok((alpha, mins))
        }
        Scheme::Symmetric => {
            let amax = group_abs_max(x, layout)?;
            let g = amax.len();
            Ok((
                amax.into_iter().map(|a| a.max(ALPHA_FLOOR)).collect(),
                vec![0.0; g],
            ))
        }
    }
}

impl QuantizerState {
    pub fn new(config: QuantConfig) -> Self {
        QuantizerState {
            alpha: Vec::new(),
            beta: Vec::new(),
            lambda: config.lambda,
            scheme: config.scheme,
            rounding: config.rounding,
            stats: config.stats,
            initialized: false,
        }
    }

    pub fn group_count(&self) -> usize {
        self.alpha.len()
    }

    /// Min-max initialization from the first batch seen.
    pub fn init_params(&mut self, x: &Tensor<f32>, layout: &GroupLayout) -> Result<()> {
        if self.initialized {
            return Err(Error::Quantizer("state is already initialized".into()));
        }
        let (alpha, beta) = current_params(x, layout, self.scheme)?;
        self.alpha = alpha;
        self.beta = beta;
        self.initialized = true;
        Ok(())
    }

    /// Exponential moving average of the group range and minimum:
    /// `alpha = l * alpha + (1 - l) * (max - min)`,
    /// `beta = l * beta + (1 - l) * min`. For the symmetric scheme the
    /// range term is `max |x|` and beta stays 0.
    pub fn update_running_estimates(
        &mut self,
        x: &Tensor<f32>,
        layout: &GroupLayout,
    ) -> Result<()> {
        if !self.initialized {
            return Err(Error::NotInitialized);
        }
        if self.stats != StatsMode::RunningEstimate {
            return Err(Error::Quantizer(
                "running estimates are not used in per-sample mode".into(),
            ));
        }
        if layout.group_count() != self.group_count() {
            return Err(Error::Layout(format!(
                "state has {} groups, layout has {}",
                self.group_count(),
                layout.group_count()
            )));
        }
        let lambda = self.lambda;
        let keep = 1.0 - lambda;
        match self.scheme {
            Scheme::Asymmetric => {
                let (mins, maxs) = group_min_max(x, layout)?;
                for g in 0..mins.len() {
                    let range = maxs[g] - mins[g];
                    self.alpha[g] = (lambda * self.alpha[g] + keep * range).max(ALPHA_FLOOR);
                    self.beta[g] = lambda * self.beta[g] + keep * mins[g];
                }
            }
            Scheme::Symmetric => {
                let amax = group_abs_max(x, layout)?;
                for (a, m) in self.alpha.iter_mut().zip(amax) {
                    *a = (lambda * *a + keep * m).max(ALPHA_FLOOR);
                }
            }
        }
        Ok(())
    }
}

/// Compressed form of an activation kept for the backward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedActivation {
    pub payload: Vec<u8>,
    pub shape: Vec<usize>,
    pub layout: GroupLayout,
    /// Parameters in effect when the payload was produced, one per group.
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
    pub scheme: Scheme,
    pub original_precision: Precision,
}

impl CompressedActivation {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    /// Reals stored alongside the payload: `(alpha, beta)` per group, or only
    /// the scale for the symmetric scheme.
    pub fn param_count(&self) -> usize {
        match self.scheme {
            Scheme::Asymmetric => 2 * self.alpha.len(),
            Scheme::Symmetric => self.alpha.len(),
        }
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        dequantize(self)
    }
}

#[inline]
fn round_code(v: f32, rounding: Rounding, rng: &mut Rng) -> f32 {
    match rounding {
        Rounding::Nearest => v.round(),
        Rounding::Stochastic => {
            let lo = v.floor();
            if rng.uniform_f32() < v - lo {
                lo + 1.0
            } else {
                lo
            }
        }
    }
}

/// Rounds every element up with probability equal to its fractional part.
pub fn stochastic_round(x: &Tensor<f32>, rng: &mut Rng) -> Tensor<f32> {
    let data = x
        .data()
        .iter()
        .map(|&v| round_code(v, Rounding::Stochastic, rng))
        .collect();
    Tensor::new(x.shape(), data).expect("rounding keeps values finite")
}

fn encode(
    x: &Tensor<f32>,
    layout: &GroupLayout,
    alpha: Vec<f32>,
    beta: Vec<f32>,
    scheme: Scheme,
    rounding: Rounding,
    rng: &mut Rng,
) -> Result<CompressedActivation> {
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "quantize" });
    }
    if alpha.len() != layout.group_count() || beta.len() != alpha.len() {
        return Err(Error::Layout(format!(
            "{} parameter groups for a layout with {} groups",
            alpha.len(),
            layout.group_count()
        )));
    }
    let data = x.data();
    let mut payload = vec![0u8; data.len()];
    for run in layout.runs() {
        let (a, b) = (alpha[run.group], beta[run.group]);
        let src = &data[run.start..run.start + run.len];
        let dst = &mut payload[run.start..run.start + run.len];
        match scheme {
            Scheme::Asymmetric => {
                let scale = LEVELS / a;
                for (d, &v) in dst.iter_mut().zip(src) {
                    let code = round_code((v - b) * scale, rounding, rng);
                    *d = code.clamp(0.0, LEVELS) as u8;
                }
            }
            Scheme::Symmetric => {
                let scale = SYMMETRIC_HALF_RANGE / a;
                for (d, &v) in dst.iter_mut().zip(src) {
                    let code = round_code(v * scale + SYMMETRIC_ZERO, rounding, rng);
                    *d = code.clamp(0.0, LEVELS) as u8;
                }
            }
        }
    }
    Ok(CompressedActivation {
        payload,
        shape: x.shape().to_vec(),
        layout: layout.clone(),
        alpha,
        beta,
        scheme,
        original_precision: Precision::Standard,
    })
}

/// Quantizes `x` with the parameters and rounding mode of `state`.
///
/// In running-estimate mode the state must be initialized and is not
/// modified; in per-sample mode the parameters are computed per
/// (sample, group) from `x` itself and `state` is only consulted for the
/// scheme and rounding mode.
pub fn quantize(
    x: &Tensor<f32>,
    state: &QuantizerState,
    layout: &GroupLayout,
    rng: &mut Rng,
) -> Result<CompressedActivation> {
    layout.check_shape(x.shape())?;
    match state.stats {
        StatsMode::PerSample => {
            let layout = if layout.is_per_sample() {
                layout.clone()
            } else {
                layout.clone().per_sample()
            };
            let (alpha, beta) = current_params(x, &layout, state.scheme)?;
            encode(x, &layout, alpha, beta, state.scheme, state.rounding, rng)
        }
        StatsMode::RunningEstimate => {
            if !state.initialized {
                return Err(Error::NotInitialized);
            }
            encode(
                x,
                layout,
                state.alpha.clone(),
                state.beta.clone(),
                state.scheme,
                state.rounding,
                rng,
            )
        }
    }
}

/// Symmetric scale-only quantization: codes are centered at 128 with scale
/// `127.5 / max|x|` per group, so `+max|x|` maps to 255 and `-max|x|` to
/// 0 or 1.
pub fn quantize_symmetric(
    x: &Tensor<f32>,
    state: &QuantizerState,
    layout: &GroupLayout,
    rng: &mut Rng,
) -> Result<CompressedActivation> {
    if state.scheme != Scheme::Symmetric {
        return Err(Error::Quantizer(
            "quantize_symmetric needs a symmetric quantizer".into(),
        ));
    }
    quantize(x, state, layout, rng)
}

/// Inverse affine map using the parameters frozen in `c`.
pub fn dequantize(c: &CompressedActivation) -> Tensor<f32> {
    let mut out = vec![0f32; c.payload.len()];
    for run in c.layout.runs() {
        let (a, b) = (c.alpha[run.group], c.beta[run.group]);
        let src = &c.payload[run.start..run.start + run.len];
        let dst = &mut out[run.start..run.start + run.len];
        match c.scheme {
            Scheme::Asymmetric => {
                let step = a / LEVELS;
                for (d, &q) in dst.iter_mut().zip(src) {
                    *d = q as f32 * step + b;
                }
            }
            Scheme::Symmetric => {
                let step = a / SYMMETRIC_HALF_RANGE;
                for (d, &q) in dst.iter_mut().zip(src) {
                    *d = (q as f32 - SYMMETRIC_ZERO) * step;
                }
            }
        }
    }
    Tensor::new(c.shape.clone(), out).expect("dequantized values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn cfg(scheme: Scheme, rounding: Rounding, stats: StatsMode) -> QuantConfig {
        QuantConfig {
            scheme,
            rounding,
            stats,
            lambda: 0.9,
        }
    }

    fn fixed_state(alpha: f32, beta: f32, rounding: Rounding) -> QuantizerState {
        QuantizerState {
            alpha: vec![alpha],
            beta: vec![beta],
            initialized: true,
            ..QuantizerState::new(cfg(
                Scheme::Asymmetric,
                rounding,
                StatsMode::RunningEstimate,
            ))
        }
    }

    fn scalar_tensor(vals: &[f32]) -> (Tensor<f32>, GroupLayout) {
        let x = Tensor::new([vals.len()], vals.to_vec()).unwrap();
        let l = GroupLayout::layer_wise(x.shape()).unwrap();
        (x, l)
    }

    #[test]
    fn group_min_max_head_wise() {
        // two heads, values [[1,3],[-5,7]]
        let x = Tensor::new([1, 2, 1, 2], vec![1.0, 3.0, -5.0, 7.0]).unwrap();
        let l = GroupLayout::head_wise(x.shape()).unwrap();
        let (lo, hi) = group_min_max(&x, &l).unwrap();
        assert_eq!(lo, vec![1.0, -5.0]);
        assert_eq!(hi, vec![3.0, 7.0]);

        let c = Tensor::full([2, 2, 3, 3], 4.5f32);
        let (lo, hi) = group_min_max(&c, &GroupLayout::head_wise(c.shape()).unwrap()).unwrap();
        assert_eq!(lo, hi);

        let wrong = GroupLayout::head_wise(&[1, 2, 2, 2]).unwrap();
        assert!(matches!(group_min_max(&x, &wrong), Err(Error::Layout(_))));
    }

    #[test]
    fn group_min_max_matches_scan() {
        let mut rng = Rng::new(4);
        let x = Tensor::from_fn([2, 4, 8, 16], |_| rng.normal(0.0, 2.0) as f32).unwrap();
        let l = GroupLayout::head_wise(x.shape()).unwrap();
        let (lo, hi) = group_min_max(&x, &l).unwrap();
        for h in 0..4 {
            let mut vals = Vec::new();
            for b in 0..2 {
                let base = (b * 4 + h) * 128;
                vals.extend_from_slice(&x.data()[base..base + 128]);
            }
            let min = vals.iter().copied().fold(f32::INFINITY, f32::min);
            let max = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!((lo[h], hi[h]), (min, max));
        }
    }

    #[test]
    fn init_params_examples() {
        let x = Tensor::new([1, 2, 1, 2], vec![1.0, 3.0, -5.0, 7.0]).unwrap();
        let l = GroupLayout::head_wise(x.shape()).unwrap();
        let mut s = QuantizerState::new(QuantConfig::default());
        s.init_params(&x, &l).unwrap();
        assert_eq!(s.alpha, vec![2.0, 12.0]);
        assert_eq!(s.beta, vec![1.0, -5.0]);
        assert!(s.init_params(&x, &l).is_err());

        let c = Tensor::full([1, 1, 2, 2], 0.25f32);
        let mut s = QuantizerState::new(QuantConfig::default());
        s.init_params(&c, &GroupLayout::head_wise(c.shape()).unwrap())
            .unwrap();
        assert_eq!(s.alpha, vec![ALPHA_FLOOR]);
        assert_eq!(s.beta, vec![0.25]);
    }

    #[test]
    fn running_estimate_arithmetic() {
        let mut s = fixed_state(1.0, 0.0, Rounding::Nearest);
        let (x, l) = scalar_tensor(&[-1.0, 1.0]);
        s.update_running_estimates(&x, &l).unwrap();
        assert!((s.alpha[0] - 1.1).abs() < 1e-6);
        assert!((s.beta[0] - (-0.1)).abs() < 1e-6);

        let mut s = fixed_state(5.0, 3.0, Rounding::Nearest);
        s.lambda = 0.0;
        let (x, l) = scalar_tensor(&[-0.5, 1.25, 0.0]);
        s.update_running_estimates(&x, &l).unwrap();
        assert_eq!((s.alpha[0], s.beta[0]), (1.75, -0.5));

        let mut fresh = QuantizerState::new(QuantConfig::default());
        assert_eq!(fresh.lambda, 0.9);
        assert!(matches!(
            fresh.update_running_estimates(&x, &l),
            Err(Error::NotInitialized)
        ));
    }

    #[test]
    fn quantize_examples() {
        let mut rng = Rng::new(0);
        let s = fixed_state(2.55, 0.0, Rounding::Nearest);
        let (x, l) = scalar_tensor(&[1.28, 0.0, 2.55, -1.0, 9.0]);
        let c = quantize(&x, &s, &l, &mut rng).unwrap();
        assert_eq!(c.payload, vec![128, 0, 255, 0, 255]);

        let (x, l) = scalar_tensor(&[-0.3, 0.7]);
        let s = fixed_state(1.0, -0.3, Rounding::Stochastic);
        let c = quantize(&x, &s, &l, &mut rng).unwrap();
        assert_eq!(c.payload, vec![0, 255]);

        let unset = QuantizerState::new(QuantConfig::default());
        assert!(matches!(
            quantize(&x, &unset, &l, &mut rng),
            Err(Error::NotInitialized)
        ));
    }

    #[test]
    fn dequantize_examples() {
        let l = GroupLayout::layer_wise(&[2]).unwrap();
        let c = CompressedActivation {
            payload: vec![255, 0],
            shape: vec![2],
            layout: l,
            alpha: vec![2.55],
            beta: vec![-0.75],
            scheme: Scheme::Asymmetric,
            original_precision: Precision::Standard,
        };
        let d = dequantize(&c);
        assert!((d.data()[0] - 1.8).abs() < 1e-6);
        assert_eq!(d.data()[1], -0.75);
        assert_eq!(d.shape(), &[2]);
    }

    #[test]
    fn stochastic_round_integers_unchanged() {
        let mut rng = Rng::new(1);
        let x = Tensor::new([4], vec![-2.0f32, 0.0, 3.0, 17.0]).unwrap();
        for _ in 0..100 {
            assert_eq!(stochastic_round(&x, &mut rng), x);
        }
    }

    #[test]
    fn stochastic_round_is_unbiased() {
        let trials = 100_000usize;
        let mut rng = Rng::new(2024);
        for p in [0.3f32, 0.5] {
            let x = Tensor::full([trials], p);
            let r = stochastic_round(&x, &mut rng);
            let ups = r.data().iter().filter(|&&v| v == 1.0).count();
            assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let freq = ups as f64 / trials as f64;
            let p = p as f64;
            let tol = 4.0 * (p * (1.0 - p) / trials as f64).sqrt();
            assert!((freq - p).abs() <= tol, "p={p} freq={freq}");
        }
    }

    #[test]
    fn round_trip_bounds_dense_grid() {
        let (alpha, beta) = (3.7f32, -1.3f32);
        let n = 10_000;
        let vals: Vec<f32> = (0..n)
            .map(|i| beta + alpha * i as f32 / (n - 1) as f32)
            .map(|v| v.clamp(beta, beta + alpha))
            .collect();
        let (x, l) = scalar_tensor(&vals);
        let mut rng = Rng::new(8);
        for (rounding, bound) in [
            (Rounding::Nearest, alpha / 510.0),
            (Rounding::Stochastic, alpha / 255.0),
        ] {
            let s = fixed_state(alpha, beta, rounding);
            let back = dequantize(&quantize(&x, &s, &l, &mut rng).unwrap());
            for (a, b) in x.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= bound + 1e-6, "{a} {b}");
            }
        }
    }

    #[test]
    fn symmetric_examples() {
        let mut rng = Rng::new(0);
        let c = cfg(
            Scheme::Symmetric,
            Rounding::Nearest,
            StatsMode::RunningEstimate,
        );
        let (x, l) = scalar_tensor(&[2.0, -2.0, 0.0, 1.0]);
        let mut s = QuantizerState::new(c);
        s.init_params(&x, &l).unwrap();
        assert_eq!((s.alpha[0], s.beta[0]), (2.0, 0.0));
        let q = quantize_symmetric(&x, &s, &l, &mut rng).unwrap();
        assert_eq!(q.payload[0], 255);
        assert!(q.payload[1] <= 1);
        assert_eq!(q.payload[2], 128);
        assert_eq!(q.param_count(), 1);

        let (z, lz) = scalar_tensor(&[0.0; 8]);
        let mut s = QuantizerState::new(c);
        s.init_params(&z, &lz).unwrap();
        assert_eq!(s.alpha[0], ALPHA_FLOOR);
        let q = quantize_symmetric(&z, &s, &lz, &mut rng).unwrap();
        assert!(q.payload.iter().all(|&p| p == 128));
        assert!(q.dequantize().data().iter().all(|&v| v == 0.0));

        let asym = fixed_state(1.0, 0.0, Rounding::Nearest);
        assert!(quantize_symmetric(&z, &asym, &lz, &mut rng).is_err());
    }

    #[test]
    fn symmetric_round_trip_bound() {
        let m = 2.5f32;
        let vals: Vec<f32> = (0..10_000)
            .map(|i| -m + 2.0 * m * i as f32 / 9_999.0)
            .collect();
        let (x, l) = scalar_tensor(&vals);
        let mut s = QuantizerState::new(cfg(
            Scheme::Symmetric,
            Rounding::Nearest,
            StatsMode::RunningEstimate,
        ));
        s.init_params(&x, &l).unwrap();
        let back = quantize(&x, &s, &l, &mut Rng::new(0)).unwrap().dequantize();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= m / 255.0 + 1e-6);
        }
    }

    #[test]
    fn per_sample_snapshots() {
        let mut rng = Rng::new(5);
        let x = Tensor::from_fn([3, 2, 4, 4], |i| (i % 17) as f32 - (i / 32) as f32).unwrap();
        let l = GroupLayout::head_wise(x.shape()).unwrap();
        let s = QuantizerState::new(cfg(
            Scheme::Asymmetric,
            Rounding::Nearest,
            StatsMode::PerSample,
        ));
        let c = quantize(&x, &s, &l, &mut rng).unwrap();
        assert_eq!(c.alpha.len(), 6);
        assert_eq!(c.param_count(), 2 * 3 * 2);
        let (lo, _) = group_min_max(&x, &l.clone().per_sample()).unwrap();
        assert_eq!(c.beta, lo);
        assert!(!s.initialized);
    }

    #[test]
    fn snapshot_survives_state_updates() {
        let mut rng = Rng::new(3);
        let x = Tensor::from_fn([2, 2, 3, 3], |i| (i as f32 * 0.37).sin()).unwrap();
        let l = GroupLayout::head_wise(x.shape()).unwrap();
        let mut s = QuantizerState::new(QuantConfig::default());
        s.init_params(&x, &l).unwrap();
        let c = quantize(&x, &s, &l, &mut rng).unwrap();
        let before = c.dequantize();
        let shifted = x.scale(5.0).unwrap();
        for _ in 0..5 {
            s.update_running_estimates(&shifted, &l).unwrap();
        }
        assert_eq!(c.dequantize(), before);
    }

    proptest! {
        #[test]
        fn other_groups_unaffected_by_permutation(
            seed in any::<u64>(),
            perm_seed in any::<u64>(),
        ) {
            let mut r = Rng::new(seed);
            let x = Tensor::from_fn([1, 3, 4, 4], |_| r.normal(0.0, 1.0) as f32).unwrap();
            let l = GroupLayout::head_wise(x.shape()).unwrap();
            let mut s = QuantizerState::new(cfg(Scheme::Asymmetric, Rounding::Nearest, StatsMode::RunningEstimate));
            s.init_params(&x, &l).unwrap();
            let mut y = x.clone();
            let mut head1: Vec<f32> = y.data()[16..32].to_vec();
            Rng::new(perm_seed).shuffle(&mut head1);
            y.data_mut()[16..32].copy_from_slice(&head1);
            let a = quantize(&x, &s, &l, &mut Rng::new(0)).unwrap();
            let b = quantize(&y, &s, &l, &mut Rng::new(0)).unwrap();
            prop_assert_eq!(&a.payload[..16], &b.payload[..16]);
            prop_assert_eq!(&a.payload[32..], &b.payload[32..]);
        }

        #[test]
        fn round_trip_within_bound(
            vals in proptest::collection::vec(-50.0f32..50.0, 1..64),
            stochastic in any::<bool>(),
        ) {
            let (x, l) = scalar_tensor(&vals);
            let rounding = if stochastic { Rounding::Stochastic } else { Rounding::Nearest };
            let mut s = QuantizerState::new(cfg(Scheme::Asymmetric, rounding, StatsMode::RunningEstimate));
            s.init_params(&x, &l).unwrap();
            let c = quantize(&x, &s, &l, &mut Rng::new(1)).unwrap();
            let back = c.dequantize();
            let bound = s.alpha[0] / if stochastic { 255.0 } else { 510.0 };
            for (a, b) in x.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= bound + 1e-5 * s.alpha[0].max(1.0));
            }
        }
    }
}
