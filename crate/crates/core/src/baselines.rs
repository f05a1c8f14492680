//! Uniform-ratio magnitude and random pruning, plus uniform int8 quantization.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{CompressionPlan, PlanSource, QuantDtype};
use crate::compression::{
    apply_quantization_plan, prune_groups, DependencyGraph, GroupTarget, Importance, PruneSummary,
    QuantizationSummary,
};
use crate::error::{Error, Result};
use crate::zoo::ModelHandle;
use profagent_nn::Scalar;

/// Sum of absolute values per row.
pub fn l1_importance(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect()
}

/// Euclidean norm per row.
pub fn l2_importance(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// `n_prune` distinct indices out of `n_channels`, uniform without replacement, sorted.
pub fn random_selection(n_channels: usize, n_prune: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample(&mut rng, n_channels, n_prune.min(n_channels)).into_vec();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    L1,
    L2,
    Random,
    #[serde(rename = "quant-int8")]
    UniformQuantInt8,
}

impl BaselineMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "random" => Ok(Self::Random),
            "quant-int8" | "uniform_quant_int8" | "int8" => Ok(Self::UniformQuantInt8),
            _ => Err(Error::Config(format!("unknown baseline method `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::Random => "random",
            Self::UniformQuantInt8 => "quant-int8",
        }
    }

    pub fn is_pruning(self) -> bool {
        self != Self::UniformQuantInt8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub method: BaselineMethod,
    pub ratio: Option<f64>,
    pub seed: u64,
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        match (self.method.is_pruning(), self.ratio) {
            (true, Some(r)) if r > 0.0 && r < 1.0 => Ok(()),
            (true, Some(r)) => Err(Error::Config(format!("baseline ratio {r} must lie in (0, 1)"))),
            (true, None) => Err(Error::Config(format!("{} needs a ratio", self.method.as_str()))),
            (false, Some(_)) => Err(Error::Config("quant-int8 takes no ratio".into())),
            (false, None) => Ok(()),
        }
    }

    fn importance(&self) -> Importance {
        match self.method {
            BaselineMethod::L1 => Importance::L1,
            BaselineMethod::Random => Importance::Random { seed: self.seed },
            _ => Importance::L2,
        }
    }
}

/// Prune every prunable group, channel and head groups alike, at the spec's ratio.
pub fn apply_baseline_pruning<T: Scalar>(
    handle: &ModelHandle<T>,
    graph: &DependencyGraph,
    spec: &BaselineSpec,
) -> Result<(ModelHandle<T>, PruneSummary)> {
    spec.validate()?;
    let ratio = spec.ratio.ok_or_else(|| Error::Config("pruning baseline without ratio".into()))?;
    let targets: Vec<GroupTarget> = graph
        .prunable_groups()
        .map(|g| GroupTarget { group_id: g.group_id, ratio, directive: spec.method.as_str().to_string() })
        .collect();
    if targets.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let mut pruned = handle.clone();
    let summary = prune_groups(&mut pruned, graph, &targets, spec.importance())?;
    Ok((pruned, summary))
}

/// Int8 dynamic quantization of every matmul-bearing layer.
pub fn uniform_dynamic_quantize<T: Scalar>(handle: &ModelHandle<T>) -> Result<(ModelHandle<T>, QuantizationSummary)> {
    apply_quantization_plan(handle, &CompressionPlan::quantize_all(QuantDtype::Qint8, PlanSource::UserCli))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<Vec<f64>> {
        vec![vec![1.0, -1.0], vec![0.1, 0.2], vec![3.0, 0.0]]
    }

    #[test]
    fn norms() {
        let l1 = l1_importance(&rows());
        assert!((l1[0] - 2.0).abs() < 1e-12 && (l1[1] - 0.3).abs() < 1e-12 && l1[2] == 3.0);
        let l2 = l2_importance(&rows());
        assert!((l2[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!((l2[1] - 0.05f64.sqrt()).abs() < 1e-12);
        assert_eq!(l2_importance(&[vec![3.0, 4.0]]), vec![5.0]);
        assert_eq!(l1_importance(&[vec![-5.0]]), vec![5.0]);
        assert_eq!(l1_importance(&vec![vec![0.0; 3]; 2]), vec![0.0, 0.0]);
    }

    #[test]
    fn random_is_reproducible() {
        assert!(random_selection(8, 0, 3).is_empty());
        assert_eq!(random_selection(10, 4, 9), random_selection(10, 4, 9));
    }

    #[test]
    fn random_is_uniform() {
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for s in 0..draws {
            counts[random_selection(4, 1, s)[0]] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.25).abs() <= 0.02, "{f}");
        }
    }

    #[test]
    fn spec_validation() {
        let ok = BaselineSpec { method: BaselineMethod::L1, ratio: Some(0.1), seed: 0 };
        assert!(ok.validate().is_ok());
        assert!(BaselineSpec { ratio: None, ..ok }.validate().is_err());
        let q = BaselineSpec { method: BaselineMethod::UniformQuantInt8, ratio: Some(0.1), seed: 0 };
        assert!(q.validate().is_err());
    }
}
