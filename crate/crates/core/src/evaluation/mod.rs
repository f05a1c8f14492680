//! Accuracy, latency, memory and parameter measurements, and before/after comparisons.

mod dataset;

use std::time::Instant;

use chrono::{DateTime, Utc};
use ndarray::ArrayD;
use profagent_nn::Scalar;
use serde::{Deserialize, Serialize};

pub use dataset::{
    from_directory, open_dataset, subset_indices, synthetic_two_class, Dataset, Sample, LABEL_MAP_FILE, REGISTRY,
    SYNTHETIC,
};

use crate::compression::estimate_model_bytes;
use crate::error::{Error, Result};
use crate::profiler::profile_static;
use crate::zoo::{enumerate_layers, InputSpec, LayerKind, ModelHandle};

pub const DEFAULT_SAMPLES: usize = 1000;
pub const DEFAULT_SEED: u64 = 42;
pub const MIB: f64 = 1_048_576.0;

/// How per-sample latency is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    /// Monotonic clock around each forward pass.
    #[default]
    Wall,
    /// Deterministic cost model over MACs and weight storage; for reproducible runs.
    Modeled,
}

/// Bytes of all parameters and buffers.
pub fn measure_memory<T: Scalar>(handle: &ModelHandle<T>) -> u64 {
    estimate_model_bytes(handle, None).expect("no plan means no pattern to compile")
}

fn normalize(s: &str) -> String {
    s.to_lowercase().replace(',', " ").split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-insensitive substring match in either direction.
///
/// Known false positives follow from the rule: "catamaran" matches "cat".
pub fn match_label(predicted: &str, truth: &str) -> bool {
    let (p, t) = (normalize(predicted), normalize(truth));
    if p.is_empty() || t.is_empty() {
        return false;
    }
    p.contains(&t) || t.contains(&p)
}

/// Equality after normalization; reported next to the substring accuracy.
pub fn exact_label(predicted: &str, truth: &str) -> bool {
    let (p, t) = (normalize(predicted), normalize(truth));
    !p.is_empty() && p == t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_ref: String,
    pub dataset_id: String,
    pub n_samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub exact_correct: usize,
    pub exact_accuracy: f64,
    pub mean_latency_s: f64,
    pub latency_samples_s: Vec<f64>,
    pub memory_bytes: u64,
    pub param_count: u64,
    pub seed: u64,
    pub timing: TimingMode,
    pub sample_ids: Vec<String>,
    pub timestamp: DateTime<Utc>,
}

impl EvaluationReport {
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.n_samples == 0 || self.latency_samples_s.len() != self.n_samples {
            return Err("latency samples must match n_samples".into());
        }
        if self.accuracy != self.correct as f64 / self.n_samples as f64 {
            return Err("accuracy must equal correct / n_samples".into());
        }
        let mean = self.latency_samples_s.iter().sum::<f64>() / self.n_samples as f64;
        if (mean - self.mean_latency_s).abs() > 1e-12 * mean.abs().max(1.0) {
            return Err("mean latency must equal the sample mean".into());
        }
        Ok(())
    }
}

/// Cost model for [`TimingMode::Modeled`]: float MACs at 1 ns, int8 at 0.5 ns, half at
/// 1.25 ns (widening on the fly), plus 2 µs per executed node.
pub fn modeled_latency_s<T: Scalar>(handle: &ModelHandle<T>) -> Result<f64> {
    let shape = handle.input_shape();
    let spec = InputSpec::image(shape[0], shape[1], shape[2]);
    let profile = profile_static(handle, &spec)?;
    let layers = enumerate_layers(handle);
    let mut ns = 2_000.0 * handle.network.nodes().len() as f64;
    for (p, d) in profile.layers.iter().zip(&layers) {
        let per_mac = match (d.kind, d.storage.as_deref()) {
            (LayerKind::Linear, Some("qint8")) => 0.5,
            (LayerKind::Linear, Some("float16")) => 1.25,
            _ => 1.0,
        };
        ns += p.mac_count as f64 * per_mac;
    }
    Ok(ns * 1e-9)
}

fn argmax<T: Scalar>(y: &ArrayD<T>) -> usize {
    y.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v.as_f64() > bv { (i, v.as_f64()) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub n_samples: usize,
    pub seed: u64,
    pub timing: TimingMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_samples: DEFAULT_SAMPLES, seed: DEFAULT_SEED, timing: TimingMode::Wall }
    }
}

/// Evaluate `handle` on a seeded subset of `dataset`.
pub fn evaluate_on<T: Scalar>(
    handle: &ModelHandle<T>,
    model_ref: &str,
    dataset: &Dataset,
    opts: EvalOptions,
) -> Result<EvaluationReport> {
    let net_shape = handle.network.input_shape().to_vec();
    if handle.input_shape() != net_shape {
        return Err(Error::IncompatibleInput(format!(
            "preprocessor yields {:?}, model expects {net_shape:?}",
            handle.input_shape()
        )));
    }
    let idx = subset_indices(&dataset.id, dataset.samples.len(), opts.n_samples, opts.seed)?;
    let samples: Vec<&Sample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
    // preprocessing stays outside the timed region
    let inputs = samples
        .iter()
        .map(|s| s.load().map(|img| handle.preprocessor.apply::<T>(&img)))
        .collect::<Result<Vec<_>>>()?;
    let fwd = |x: &ArrayD<T>| handle.network.forward(x).map_err(|e| Error::IncompatibleInput(e.to_string()));
    fwd(&inputs[0])?;

    let modeled = match opts.timing {
        TimingMode::Modeled => Some(modeled_latency_s(handle)?),
        TimingMode::Wall => None,
    };
    let mut latencies = Vec::with_capacity(inputs.len());
    let (mut correct, mut exact) = (0, 0);
    for (x, s) in inputs.iter().zip(&samples) {
        let start = Instant::now();
        let y = fwd(x)?;
        let elapsed = start.elapsed().as_secs_f64();
        latencies.push(modeled.unwrap_or(elapsed));
        let pred = handle.label(argmax(&y));
        correct += usize::from(match_label(&pred, &s.truth));
        exact += usize::from(exact_label(&pred, &s.truth));
    }
    let n = samples.len();
    Ok(EvaluationReport {
        model_ref: model_ref.to_string(),
        dataset_id: dataset.id.clone(),
        n_samples: n,
        correct,
        accuracy: correct as f64 / n as f64,
        exact_correct: exact,
        exact_accuracy: exact as f64 / n as f64,
        mean_latency_s: latencies.iter().sum::<f64>() / n as f64,
        latency_samples_s: latencies,
        memory_bytes: measure_memory(handle),
        param_count: handle.param_count(),
        seed: opts.seed,
        timing: opts.timing,
        sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
        timestamp: Utc::now(),
    })
}

pub fn evaluate<T: Scalar>(handle: &ModelHandle<T>, dataset_id: &str, opts: EvalOptions) -> Result<EvaluationReport> {
    let ds = open_dataset(dataset_id)?;
    evaluate_on(handle, &handle.model_id, &ds, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub method: String,
    pub dataset_id: String,
    pub n_samples: usize,
    pub seed: u64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub delta_acc_points: f64,
    pub memory_before: u64,
    pub memory_after: u64,
    pub mem_reduction_pct: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub param_reduction_pct: f64,
    pub latency_before_s: f64,
    pub latency_after_s: f64,
    pub speedup: f64,
}

fn reduction_pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (1.0 - after as f64 / before as f64)
    }
}

pub fn compare(method: &str, original: &EvaluationReport, optimized: &EvaluationReport) -> Result<ComparisonReport> {
    if original.dataset_id != optimized.dataset_id
        || original.n_samples != optimized.n_samples
        || original.seed != optimized.seed
        || original.sample_ids != optimized.sample_ids
    {
        return Err(Error::MismatchedRuns(format!(
            "({}, n={}, seed={}) vs ({}, n={}, seed={})",
            original.dataset_id,
            original.n_samples,
            original.seed,
            optimized.dataset_id,
            optimized.n_samples,
            optimized.seed
        )));
    }
    if !(original.mean_latency_s > 0.0 && optimized.mean_latency_s > 0.0) {
        return Err(Error::MismatchedRuns("latencies must be positive".into()));
    }
    Ok(ComparisonReport {
        method: method.to_string(),
        dataset_id: original.dataset_id.clone(),
        n_samples: original.n_samples,
        seed: original.seed,
        accuracy_before: original.accuracy,
        accuracy_after: optimized.accuracy,
        delta_acc_points: 100.0 * (optimized.accuracy - original.accuracy),
        memory_before: original.memory_bytes,
        memory_after: optimized.memory_bytes,
        mem_reduction_pct: reduction_pct(original.memory_bytes, optimized.memory_bytes),
        params_before: original.param_count,
        params_after: optimized.param_count,
        param_reduction_pct: reduction_pct(original.param_count, optimized.param_count),
        latency_before_s: original.mean_latency_s,
        latency_after_s: optimized.mean_latency_s,
        speedup: original.mean_latency_s / optimized.mean_latency_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::fixtures;

    #[test]
    fn label_matching() {
        assert!(match_label("Egyptian cat", "cat"));
        assert!(match_label("cat", "cat"));
        assert!(match_label("catamaran", "cat"));
        assert!(match_label("tabby, tabby cat", "Tabby  Cat"));
        assert!(!match_label("dog", "cat"));
        assert!(!match_label("  ", "cat"));
        assert!(!exact_label("catamaran", "cat"));
    }

    #[test]
    fn brightness_classifier_is_perfect_on_synthetic() {
        let h = fixtures::build::<f32>(fixtures::BRIGHTNESS).unwrap().unwrap();
        let opts = EvalOptions { n_samples: 60, seed: 1, timing: TimingMode::Modeled };
        let r = evaluate(&h, SYNTHETIC, opts).unwrap();
        assert_eq!(r.correct, 60);
        assert_eq!(r.accuracy, 1.0);
        r.check().unwrap();
        let again = evaluate(&h, SYNTHETIC, opts).unwrap();
        assert_eq!(again.sample_ids, r.sample_ids);
        let c = compare("same", &r, &again).unwrap();
        assert_eq!((c.delta_acc_points, c.mem_reduction_pct, c.param_reduction_pct, c.speedup), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn comparison_arithmetic() {
        let h = fixtures::build::<f32>(fixtures::BRIGHTNESS).unwrap().unwrap();
        let opts = EvalOptions { n_samples: 4, seed: 0, timing: TimingMode::Modeled };
        let mut a = evaluate(&h, SYNTHETIC, opts).unwrap();
        let mut b = a.clone();
        a.memory_bytes = 1000;
        b.memory_bytes = 258;
        a.mean_latency_s = 0.2320;
        b.mean_latency_s = 0.1316;
        let c = compare("q", &a, &b).unwrap();
        assert!((c.mem_reduction_pct - 74.2).abs() < 1e-9);
        assert!((c.speedup - 0.2320 / 0.1316).abs() < 1e-12);
        b.seed = 9;
        assert!(matches!(compare("q", &a, &b), Err(Error::MismatchedRuns(_))));
    }
}
