use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::QuantDtype;
use crate::baselines::{BaselineMethod, BaselineSpec};
use crate::compression::Importance;
use crate::error::{io_err, Error, Result};
use crate::evaluation::{TimingMode, DEFAULT_SAMPLES, DEFAULT_SEED, SYNTHETIC};
use crate::iterative::DEFAULT_ITERATIONS;
use crate::llm::{BackendKind, LlmConfig};
use crate::profiler::{DEFAULT_REPEATS, DEFAULT_WARMUP};
use crate::zoo::Device;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Profile,
    Analyze,
    Prune,
    Quantize,
    Evaluate,
    Iterate,
    Baseline,
}

/// Execution order of the stages.
pub const STAGE_ORDER: [Stage; 7] = [
    Stage::Profile,
    Stage::Analyze,
    Stage::Prune,
    Stage::Quantize,
    Stage::Evaluate,
    Stage::Iterate,
    Stage::Baseline,
];

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Profile => "profile",
            Stage::Analyze => "analyze",
            Stage::Prune => "prune",
            Stage::Quantize => "quantize",
            Stage::Evaluate => "evaluate",
            Stage::Iterate => "iterate",
            Stage::Baseline => "baseline",
        }
    }

    /// Declared stages that must not have failed for this one to run.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Analyze => &[Stage::Profile],
            Stage::Prune | Stage::Quantize => &[Stage::Analyze],
            Stage::Iterate => &[Stage::Profile, Stage::Prune],
            Stage::Profile | Stage::Evaluate | Stage::Baseline => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceKind {
    L1,
    #[default]
    L2,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub model_id: String,
    pub dataset_id: String,
    pub device: String,
    pub stages: Vec<Stage>,
    pub llm_backend: BackendKind,
    pub llm_model: String,
    pub llm_fixtures: Option<PathBuf>,
    pub llm_max_retries: u32,
    pub llm_timeout_s: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub warmup: usize,
    pub repeats: usize,
    pub iterations: usize,
    pub importance: ImportanceKind,
    pub quant_dtype: String,
    /// Quantize the pruned model instead of the original.
    pub compose: bool,
    pub baseline_method: Option<BaselineMethod>,
    pub baseline_ratio: Option<f64>,
    pub precision: Precision,
    pub timing: TimingMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: String::new(),
            model_id: String::new(),
            dataset_id: SYNTHETIC.to_string(),
            device: "cpu".into(),
            stages: STAGE_ORDER[..6].to_vec(),
            llm_backend: BackendKind::Offline,
            llm_model: LlmConfig::default().model,
            llm_fixtures: None,
            llm_max_retries: 2,
            llm_timeout_s: 60.0,
            n_samples: DEFAULT_SAMPLES,
            seed: DEFAULT_SEED,
            warmup: DEFAULT_WARMUP,
            repeats: DEFAULT_REPEATS,
            iterations: DEFAULT_ITERATIONS,
            importance: ImportanceKind::L2,
            quant_dtype: "qint8".into(),
            compose: false,
            baseline_method: None,
            baseline_ratio: None,
            precision: Precision::F32,
            timing: TimingMode::Wall,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.model_id.is_empty() {
            return fail("model_id is required".into());
        }
        if self.stages.is_empty() {
            return fail("at least one stage is required".into());
        }
        if self.stages.contains(&Stage::Iterate) && !self.stages.contains(&Stage::Prune) {
            return fail("the iterate stage requires the prune stage".into());
        }
        if self.n_samples == 0 {
            return fail("n_samples must be at least 1".into());
        }
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if self.repeats == 0 {
            return fail("repeats must be at least 1".into());
        }
        Device::parse(&self.device)?;
        QuantDtype::parse(&self.quant_dtype).map_err(|e| Error::Config(e.to_string()))?;
        if self.llm_backend == BackendKind::Scripted && self.llm_fixtures.is_none() {
            return fail("the scripted backend needs llm_fixtures".into());
        }
        if self.stages.contains(&Stage::Baseline) {
            self.baseline_spec()?.validate()?;
        }
        if self.run_id.contains(['/', '\\']) || self.run_id == ".." {
            return fail(format!("run_id `{}` must be a plain name", self.run_id));
        }
        Ok(())
    }

    pub fn baseline_spec(&self) -> Result<BaselineSpec> {
        let method = self
            .baseline_method
            .ok_or_else(|| Error::Config("the baseline stage needs baseline_method".into()))?;
        Ok(BaselineSpec { method, ratio: self.baseline_ratio, seed: self.stage_seed("baseline") })
    }

    pub fn llm_config(&self) -> LlmConfig {
        LlmConfig {
            backend: self.llm_backend,
            model: self.llm_model.clone(),
            temperature: 0.0,
            max_retries: self.llm_max_retries,
            timeout_s: self.llm_timeout_s,
            fixtures: self.llm_fixtures.clone(),
        }
    }

    pub fn quant_dtype(&self) -> QuantDtype {
        QuantDtype::parse(&self.quant_dtype).unwrap_or(QuantDtype::Qint8)
    }

    pub fn importance(&self) -> Importance {
        match self.importance {
            ImportanceKind::L1 => Importance::L1,
            ImportanceKind::L2 => Importance::L2,
            ImportanceKind::Random => Importance::Random { seed: self.stage_seed("prune") },
        }
    }

    /// Per-stage seed derived from the root seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    /// Fill in a run id from the model and the current time when none was given.
    pub fn ensure_run_id(&mut self) {
        if self.run_id.is_empty() {
            let model = self.model_id.replace(['/', '\\'], "-");
            self.run_id = format!("{model}-{}", chrono::Utc::now().format("%Y%m%d-%H%M%S-%3f"));
        }
    }
}
