use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv_direct, gmr_conv_with_basis, op_count, ConvConfig};
use crate::error::{GmrError, Result};
use crate::gmr_kernel::{default_rings, materialize_kernel, GmrLayerParams};
use crate::tensor::Tensor;

pub const BENCH_SCHEMA: &str = "gmr-bench/1";
const CSV_COLUMNS: &str =
    "method,k,n,repeats,total_seconds,per_call_us,median_batch_per_call_us,macs_per_call,output_checksum";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    /// dense convolution with an unconstrained random kernel
    DirectDense,
    /// ring weights materialized into a dense kernel, then dense convolution
    DirectMaterializedGmr,
    /// two-stage ring convolution
    EfficientGmr,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 3] =
        [BenchMethod::DirectDense, BenchMethod::DirectMaterializedGmr, BenchMethod::EfficientGmr];

    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::DirectDense => "direct_dense",
            BenchMethod::DirectMaterializedGmr => "direct_materialized_gmr",
            BenchMethod::EfficientGmr => "efficient_gmr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub methods: Vec<BenchMethod>,
    /// timed batches the repeats are split into
    pub batches: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ks: vec![3, 5, 7, 9, 11],
            batch: 2,
            channels: 128,
            spatial: 64,
            repeats: 1000,
            warmup: 100,
            seed: 0,
            methods: BenchMethod::ALL.to_vec(),
            batches: 5,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(GmrError::InvalidArgument("repeats must be at least 1".into()));
        }
        if self.ks.is_empty() || self.methods.is_empty() {
            return Err(GmrError::InvalidArgument("nothing to benchmark".into()));
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k < 3 || k % 2 == 0) {
            return Err(GmrError::UnsupportedWidth(k));
        }
        if self.batch == 0 || self.channels == 0 || self.spatial == 0 || self.batches == 0 {
            return Err(GmrError::InvalidArgument("batch, channels, spatial and batches must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub method: BenchMethod,
    pub k: usize,
    pub n: usize,
    pub repeats: usize,
    pub total_seconds: f64,
    pub per_call_us: f64,
    pub median_batch_per_call_us: f64,
    pub macs_per_call: u64,
    /// sum of one call's outputs, to confirm all methods computed something comparable
    pub output_checksum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub input_shape: Vec<usize>,
    pub seed: u64,
    pub warmup: usize,
    /// sum of the shared f32 input
    pub input_checksum: f64,
    pub stable_output: bool,
    pub results: Vec<BenchResult>,
}

impl BenchReport {
    pub fn get(&self, method: BenchMethod, k: usize) -> Option<&BenchResult> {
        self.results.iter().find(|r| r.method == method && r.k == k)
    }

    /// Zeroes every wall-clock field so reruns are byte-identical.
    pub fn stabilize(&mut self) {
        self.stable_output = true;
        for r in &mut self.results {
            r.total_seconds = 0.0;
            r.per_call_us = 0.0;
            r.median_batch_per_call_us = 0.0;
        }
    }

    pub fn to_csv(&self) -> String {
        let shape: Vec<String> = self.input_shape.iter().map(usize::to_string).collect();
        let mut s = format!(
            "# schema: {BENCH_SCHEMA}\n# input: {} seed={} warmup={} checksum={:.9e} stable_output={}\n{CSV_COLUMNS}\n",
            shape.join("x"),
            self.seed,
            self.warmup,
            self.input_checksum,
            self.stable_output
        );
        for r in &self.results {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.3},{:.3},{},{:.9e}",
                r.method.name(),
                r.k,
                r.n,
                r.repeats,
                r.total_seconds,
                r.per_call_us,
                r.median_batch_per_call_us,
                r.macs_per_call,
                r.output_checksum
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn checksum(t: &Tensor<f32>) -> f64 {
    t.data().iter().map(|&v| v as f64).sum()
}

/// Times one closure: `warmup` untimed calls, then `repeats` calls split
/// into `batches` timed batches. Returns (total seconds, per-call seconds
/// of each batch).
fn time_calls(
    repeats: usize,
    warmup: usize,
    batches: usize,
    mut call: impl FnMut() -> Result<()>,
) -> Result<(f64, Vec<f64>)> {
    for _ in 0..warmup {
        call()?;
    }
    let batches = batches.min(repeats);
    let mut total = 0.0;
    let mut per_call = Vec::with_capacity(batches);
    for b in 0..batches {
        let count = repeats / batches + usize::from(b < repeats % batches);
        let start = Instant::now();
        for _ in 0..count {
            call()?;
        }
        let secs = start.elapsed().as_secs_f64();
        total += secs;
        per_call.push(secs / count as f64);
    }
    Ok((total, per_call))
}

/// Runs every (k, method) pair on one shared random f32 input.
/// `progress` sees each result as soon as it is measured.
pub fn run_bench(cfg: &BenchConfig, mut progress: impl FnMut(&BenchResult)) -> Result<BenchReport> {
    cfg.validate()?;
    let c = cfg.channels;
    let shape = vec![cfg.batch, c, cfg.spatial, cfg.spatial];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input: Tensor<f32> = Tensor::randn(&shape, &mut rng);
    let mut results = Vec::new();

    for &k in &cfg.ks {
        let n = default_rings(k);
        let conv = ConvConfig::same(k, 2);
        let ops = op_count(&conv, k, n, c, c, &[cfg.spatial, cfg.spatial])?;
        let params = GmrLayerParams::init(k, n, 2, c, c, cfg.seed.wrapping_add(k as u64))?;
        let dense: Tensor<f32> = Tensor::randn(&[c, c, k, k], &mut rng);
        let scale = (2.0 / (c * k * k) as f32).sqrt();
        let dense = dense.map(|v| v * scale);
        let w32: Tensor<f32> = params.weights.w.cast();

        for &method in &cfg.methods {
            let mut out = None;
            let mut call = || -> Result<()> {
                let y = match method {
                    BenchMethod::DirectDense => conv_direct(&input, &dense, &conv)?,
                    BenchMethod::DirectMaterializedGmr => {
                        let kernel = materialize_kernel(&params.weights, &params.basis()?)?.cast::<f32>();
                        conv_direct(&input, &kernel, &conv)?
                    }
                    BenchMethod::EfficientGmr => {
                        let basis = params.basis()?.rings.cast::<f32>();
                        gmr_conv_with_basis(&input, &w32, &basis, &conv)?
                    }
                };
                out = Some(y);
                Ok(())
            };
            let (total, per_batch) = time_calls(cfg.repeats, cfg.warmup, cfg.batches, &mut call)?;
            let macs_per_call = cfg.batch as u64
                * match method {
                    BenchMethod::EfficientGmr => ops.gmr,
                    _ => ops.direct,
                };
            let result = BenchResult {
                method,
                k,
                n,
                repeats: cfg.repeats,
                total_seconds: total,
                per_call_us: total / cfg.repeats as f64 * 1e6,
                median_batch_per_call_us: median(per_batch) * 1e6,
                macs_per_call,
                output_checksum: out.as_ref().map(checksum).unwrap_or(0.0),
            };
            progress(&result);
            results.push(result);
        }
    }
    Ok(BenchReport {
        schema: BENCH_SCHEMA.into(),
        input_shape: shape,
        seed: cfg.seed,
        warmup: cfg.warmup,
        input_checksum: checksum(&input),
        stable_output: false,
        results,
    })
}
