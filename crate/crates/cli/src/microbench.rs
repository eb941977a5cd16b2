//! Quantizer kernel timing and round-trip error histograms.

use std::hint::black_box;
use std::time::Instant;

use actq::quant::{quantize, GroupLayout, QuantConfig, QuantizerState, Rounding};
use actq::task::generate_heterogeneous_heads;
use actq::Rng;
use serde::{Deserialize, Serialize};

use crate::spec::MicrobenchArgs;
use crate::CliError;

/// Histogram bins over `|error| / (alpha / 255)`, i.e. in units of one
/// quantization step.
pub const BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelResult {
    pub rounding: Rounding,
    pub quantize_ns_per_element: f64,
    pub dequantize_ns_per_element: f64,
    /// Largest error seen, in quantization steps.
    pub max_error_steps: f64,
    pub mean_abs_error: f64,
    /// Counts per bin; bin `i` covers `[i, i + 1) / BINS` steps, the last
    /// bin also takes anything at or above one step.
    pub histogram: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrobenchReport {
    pub elements: usize,
    pub groups: usize,
    pub iters: usize,
    pub seed: u64,
    pub kernels: Vec<KernelResult>,
}

pub fn run(args: &MicrobenchArgs) -> Result<MicrobenchReport, CliError> {
    if args.groups == 0 || args.iters == 0 || args.elements < args.groups {
        return Err(CliError::Usage(
            "need iters > 0 and 0 < groups <= elements".into(),
        ));
    }
    let per_group = args.elements / args.groups;
    let head_dim = 16.min(per_group).max(1);
    let tokens = per_group.div_ceil(head_dim);
    let means: Vec<f64> = (0..args.groups)
        .map(|g| g as f64 - args.groups as f64 / 2.0)
        .collect();
    let stds: Vec<f64> = (0..args.groups).map(|g| 0.5 + 0.25 * g as f64).collect();
    let x = generate_heterogeneous_heads(1, tokens, head_dim, &means, &stds, args.seed)?;
    let layout = GroupLayout::head_wise(x.shape())?;

    let mut kernels = Vec::new();
    for rounding in [Rounding::Nearest, Rounding::Stochastic] {
        let mut state = QuantizerState::new(QuantConfig {
            rounding,
            ..QuantConfig::default()
        });
        state.init_params(&x, &layout)?;
        let mut rng = Rng::derive(args.seed, "microbench");

        let start = Instant::now();
        let mut packed = None;
        for _ in 0..args.iters {
            packed = Some(black_box(quantize(&x, &state, &layout, &mut rng)?));
        }
        let q_ns = start.elapsed().as_nanos() as f64 / (args.iters * x.len()) as f64;
        let packed = packed.expect("at least one iteration");

        let start = Instant::now();
        let mut back = None;
        for _ in 0..args.iters {
            back = Some(black_box(packed.dequantize()));
        }
        let d_ns = start.elapsed().as_nanos() as f64 / (args.iters * x.len()) as f64;
        let back = back.expect("at least one iteration");

        let mut histogram = vec![0u64; BINS];
        let (mut max_steps, mut abs_sum) = (0f64, 0f64);
        for (i, (&a, &b)) in x.data().iter().zip(back.data()).enumerate() {
            let err = (a as f64 - b as f64).abs();
            let step = packed.alpha[layout.group_of(i)] as f64 / 255.0;
            let steps = err / step;
            max_steps = max_steps.max(steps);
            abs_sum += err;
            histogram[((steps * BINS as f64) as usize).min(BINS - 1)] += 1;
        }
        kernels.push(KernelResult {
            rounding,
            quantize_ns_per_element: q_ns,
            dequantize_ns_per_element: d_ns,
            max_error_steps: max_steps,
            mean_abs_error: abs_sum / x.len() as f64,
            histogram,
        });
    }
    Ok(MicrobenchReport {
        elements: x.len(),
        groups: args.groups,
        iters: args.iters,
        seed: args.seed,
        kernels,
    })
}

impl MicrobenchReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} elements, {} groups, {} iterations\n{:<11} {:>12} {:>12} {:>10}  histogram (tenths of a step)\n",
            self.elements, self.groups, self.iters, "rounding", "quant_ns/el", "deq_ns/el", "max_steps"
        );
        for k in &self.kernels {
            let name = match k.rounding {
                Rounding::Nearest => "nearest",
                Rounding::Stochastic => "stochastic",
            };
            let hist: Vec<String> = k.histogram.iter().map(u64::to_string).collect();
            out += &format!(
                "{:<11} {:>12.3} {:>12.3} {:>10.4}  {}\n",
                name,
                k.quantize_ns_per_element,
                k.dequantize_ns_per_element,
                k.max_error_steps,
                hist.join(" ")
            );
        }
        out
    }
}
