use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use profagent_nn::Scalar;
use serde::{Deserialize, Serialize};

use super::config::{Precision, RunConfig, Stage, STAGE_ORDER};
use super::report::render_report;
use crate::analysis::{synthesize_validated_plan, CompressionPlan, PlanSource};
use crate::artifacts::{read_json, write_atomic, write_json};
use crate::baselines::{apply_baseline_pruning, uniform_dynamic_quantize};
use crate::compression::{apply_pruning_plan, apply_quantization_plan, build_dependency_graph};
use crate::error::{Error, Result};
use crate::evaluation::{compare, evaluate_on, open_dataset, Dataset, EvalOptions, EvaluationReport};
use crate::iterative::{run_iterations, PipelineAgents, Seed};
use crate::llm::{consumed_responses, LlmGateway};
use crate::profiler::{deserialize_report, profile, serialize_report, ProfileOptions, ProfilingReport};
use crate::zoo::{acquire_model, load_handle, resolve_input_spec, save_handle, Device, ModelHandle};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.txt";
const PROFILE_FILE: &str = "profile.json";
const INPUT_SPEC_FILE: &str = "input_spec.json";
const ANALYSIS_FILE: &str = "analysis_0.json";
const PRUNED_DIR: &str = "model_pruned";
const QUANTIZED_DIR: &str = "model_quantized";
const ORIGINAL_EVAL: &str = "eval_original.json";
const LLM_DIR: &str = "llm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageStatus {
    #[serde(rename = "ok")]
    Ok,
    #[serde(rename = "skipped (cached)")]
    Cached,
    #[serde(rename = "skipped (dependency failed)")]
    DependencyFailed,
    #[serde(rename = "failed")]
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub wall_s: f64,
    /// Files the stage wrote, relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<String>,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
}

impl RunManifest {
    pub fn failed(&self) -> bool {
        self.stages.iter().any(|s| s.status == StageStatus::Failed)
    }

    pub fn status(&self, stage: Stage) -> Option<StageStatus> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.status)
    }
}

fn marker(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!(".stage_{}.done", stage.as_str()))
}

/// Every regular file under `dir`, relative, excluding bookkeeping files.
fn list_files(dir: &Path) -> BTreeSet<String> {
    fn walk(root: &Path, d: &Path, out: &mut BTreeSet<String>) {
        let Ok(rd) = std::fs::read_dir(d) else { return };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
                continue;
            }
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.starts_with('.') || name.ends_with(".tmp") || rel == MANIFEST_FILE {
                continue;
            }
            out.insert(rel);
        }
    }
    let mut out = BTreeSet::new();
    walk(dir, dir, &mut out);
    out
}

fn require(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = dir.join(rel);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifacts(format!("{rel} (run the stage that produces it first)")))
    }
}

struct Ctx<T: Scalar> {
    cfg: RunConfig,
    dir: PathBuf,
    original: ModelHandle<T>,
    llm: Option<LlmGateway>,
    dataset: Option<Dataset>,
}

impl<T: Scalar> Ctx<T> {
    fn llm(&mut self) -> Result<&mut LlmGateway> {
        if self.llm.is_none() {
            let log = self.dir.join(LLM_DIR);
            let skip = consumed_responses(&log);
            self.llm = Some(LlmGateway::from_config(&self.cfg.llm_config(), skip)?.with_log_dir(log)?);
        }
        Ok(self.llm.as_mut().expect("just set"))
    }

    fn dataset(&mut self) -> Result<&Dataset> {
        if self.dataset.is_none() {
            self.dataset = Some(open_dataset(&self.cfg.dataset_id)?);
        }
        Ok(self.dataset.as_ref().expect("just set"))
    }

    fn eval_opts(&self) -> EvalOptions {
        EvalOptions { n_samples: self.cfg.n_samples, seed: self.cfg.seed, timing: self.cfg.timing }
    }

    /// Evaluation stored as `name`, computed on first use.
    fn ensure_eval(&mut self, name: &str, model: &ModelHandle<T>, model_ref: &str) -> Result<EvaluationReport> {
        let path = self.dir.join(name);
        if path.exists() {
            return read_json(&path);
        }
        let opts = self.eval_opts();
        let report = evaluate_on(model, model_ref, self.dataset()?, opts)?;
        write_json(&path, &report)?;
        Ok(report)
    }

    fn original_eval(&mut self) -> Result<EvaluationReport> {
        let original = self.original.clone();
        self.ensure_eval(ORIGINAL_EVAL, &original, "original")
    }

    fn read_profile(&self) -> Result<ProfilingReport> {
        let p = require(&self.dir, PROFILE_FILE)?;
        let bytes = std::fs::read(&p).map_err(crate::error::io_err(&p))?;
        deserialize_report(&bytes)
    }

    fn read_plan(&self) -> Result<CompressionPlan> {
        read_json(&require(&self.dir, ANALYSIS_FILE)?)
    }

    fn write_compare(&mut self, variant: &str, method: &str, optimized: &EvaluationReport) -> Result<()> {
        let original = self.original_eval()?;
        let c = compare(method, &original, optimized)?;
        write_json(&self.dir.join(format!("compare_{variant}.json")), &c)
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Profile => self.profile(),
            Stage::Analyze => self.analyze(),
            Stage::Prune => self.prune(),
            Stage::Quantize => self.quantize(),
            Stage::Evaluate => self.evaluate(),
            Stage::Iterate => self.iterate(),
            Stage::Baseline => self.baseline(),
        }
    }

    fn profile(&mut self) -> Result<()> {
        let id = self.original.model_id.clone();
        let metadata = self.original.metadata.clone();
        let resolved = resolve_input_spec(&id, &metadata, self.llm()?)?;
        write_json(&self.dir.join(INPUT_SPEC_FILE), &resolved)?;
        let opts = ProfileOptions { warmup: self.cfg.warmup, repeats: self.cfg.repeats, accelerator: false };
        let mut report = profile(&self.original, &resolved.spec, opts)?;
        report.environment.notes.extend(resolved.notes);
        write_atomic(&self.dir.join(PROFILE_FILE), &serialize_report(&report)?)
    }

    fn analyze(&mut self) -> Result<()> {
        let report = self.read_profile()?;
        let original = self.original.clone();
        let plan = synthesize_validated_plan(&report, None, self.llm()?, 0, &original, false)?;
        write_json(&self.dir.join(ANALYSIS_FILE), &plan)
    }

    fn prune(&mut self) -> Result<()> {
        let plan = self.read_plan()?;
        let (pruned, summary) = apply_pruning_plan(&self.original, &plan, self.cfg.importance())?;
        save_handle(&pruned, &self.dir.join(PRUNED_DIR))?;
        write_json(&self.dir.join("prune_summary.json"), &summary)
    }

    fn quantize(&mut self) -> Result<()> {
        let plan = match self.read_plan() {
            Ok(p) if !p.quantization.is_empty() => p,
            _ => CompressionPlan::quantize_all(self.cfg.quant_dtype(), PlanSource::UserCli),
        };
        let base = if self.cfg.compose {
            load_handle::<T>(&require(&self.dir, PRUNED_DIR)?)?
        } else {
            self.original.clone()
        };
        let (q, summary) = apply_quantization_plan(&base, &plan)?;
        save_handle(&q, &self.dir.join(QUANTIZED_DIR))?;
        write_json(&self.dir.join("quantize_plan.json"), &plan)?;
        write_json(&self.dir.join("quantize_summary.json"), &summary)
    }

    fn evaluate(&mut self) -> Result<()> {
        self.original_eval()?;
        let dtype = self.cfg.quant_dtype().as_str();
        let quant_method = if self.cfg.compose { format!("agent-prune+{dtype}") } else { format!("agent-{dtype}") };
        for (variant, dir, method) in [("pruned", PRUNED_DIR, "agent-prune".to_string()), ("quantized", QUANTIZED_DIR, quant_method)] {
            let path = self.dir.join(dir);
            if !path.exists() {
                continue;
            }
            let model = load_handle::<T>(&path)?;
            let eval = self.ensure_eval(&format!("eval_{variant}.json"), &model, dir)?;
            self.write_compare(variant, &method, &eval)?;
        }
        Ok(())
    }

    fn iterate(&mut self) -> Result<()> {
        let report = self.read_profile()?;
        let plan = self.read_plan()?;
        let pruned = load_handle::<T>(&require(&self.dir, PRUNED_DIR)?)?;
        let reference = self.original_eval()?;
        let seed_eval = self.ensure_eval("eval_pruned.json", &pruned, PRUNED_DIR)?;
        let eval = self.eval_opts();
        let importance = self.cfg.importance();
        let iterations = self.cfg.iterations;
        let dir = self.dir.clone();
        self.dataset()?;
        self.llm()?;
        let dataset = self.dataset.as_ref().expect("loaded");
        let llm = self.llm.as_mut().expect("loaded");
        let mut agents = PipelineAgents { original: &self.original, llm, dataset, eval, importance };
        let seed = Seed { plan, eval: seed_eval, model: Some(&pruned), reference: Some(reference.clone()) };
        let state = run_iterations(&report, seed, iterations, &mut agents, Some(&dir))?;
        let c = compare("agent-iterative", &reference, &state.best.eval_best)?;
        write_json(&dir.join("compare_iterate.json"), &c)
    }

    fn baseline(&mut self) -> Result<()> {
        let spec = self.cfg.baseline_spec()?;
        let name = spec.method.as_str();
        let model = if spec.method.is_pruning() {
            let shape = self.original.input_shape();
            let graph = build_dependency_graph(
                &self.original,
                &crate::zoo::InputSpec::image(shape[0], shape[1], shape[2]),
            )?;
            let (m, summary) = apply_baseline_pruning(&self.original, &graph, &spec)?;
            write_json(&self.dir.join(format!("baseline_{name}_summary.json")), &summary)?;
            m
        } else {
            let (m, summary) = uniform_dynamic_quantize(&self.original)?;
            write_json(&self.dir.join(format!("baseline_{name}_summary.json")), &summary)?;
            m
        };
        let dir = format!("model_baseline_{name}");
        save_handle(&model, &self.dir.join(&dir))?;
        let eval = self.ensure_eval(&format!("eval_baseline_{name}.json"), &model, &dir)?;
        let method = match spec.ratio {
            Some(r) => format!("{name}@{:.0}%", r * 100.0),
            None => name.to_string(),
        };
        self.write_compare(&format!("baseline_{name}"), &method, &eval)
    }
}

fn run_typed<T: Scalar>(cfg: RunConfig, runs_dir: &Path) -> Result<RunManifest> {
    let started = Utc::now();
    let dir = runs_dir.join(&cfg.run_id);
    std::fs::create_dir_all(&dir).map_err(crate::error::io_err(&dir))?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    let device = Device::parse(&cfg.device)?;
    let original = acquire_model::<T>(&cfg.model_id, device)?;
    let mut ctx = Ctx { cfg: cfg.clone(), dir: dir.clone(), original, llm: None, dataset: None };

    let mut records: Vec<StageRecord> = Vec::new();
    for stage in STAGE_ORDER.into_iter().filter(|s| cfg.stages.contains(s)) {
        let mark = marker(&dir, stage);
        if mark.exists() {
            let artifacts: Vec<String> = read_json(&mark).unwrap_or_default();
            records.push(StageRecord { stage, status: StageStatus::Cached, detail: None, wall_s: 0.0, artifacts });
            continue;
        }
        let blocked = stage.dependencies().iter().find(|d| {
            records
                .iter()
                .any(|r| r.stage == **d && matches!(r.status, StageStatus::Failed | StageStatus::DependencyFailed))
        });
        if let Some(dep) = blocked {
            records.push(StageRecord {
                stage,
                status: StageStatus::DependencyFailed,
                detail: Some(format!("{} did not complete", dep.as_str())),
                wall_s: 0.0,
                artifacts: Vec::new(),
            });
            continue;
        }
        let before = list_files(&dir);
        let t0 = Instant::now();
        let result = ctx.run_stage(stage);
        let wall_s = t0.elapsed().as_secs_f64();
        let artifacts: Vec<String> = list_files(&dir).difference(&before).cloned().collect();
        match result {
            Ok(()) => {
                write_json(&mark, &artifacts)?;
                records.push(StageRecord { stage, status: StageStatus::Ok, detail: None, wall_s, artifacts });
            }
            Err(e) => records.push(StageRecord {
                stage,
                status: StageStatus::Failed,
                detail: Some(e.to_string()),
                wall_s,
                artifacts,
            }),
        }
    }

    if let Ok(text) = render_report(&dir) {
        write_atomic(&dir.join(REPORT_FILE), text.as_bytes())?;
    }
    let manifest = RunManifest {
        run_id: cfg.run_id.clone(),
        config: cfg,
        stages: records,
        artifacts: list_files(&dir).into_iter().collect(),
        started,
        finished: Utc::now(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Execute the configured stages in order inside `<runs_dir>/<run_id>/`.
///
/// Stages finished by an earlier invocation with the same run id are reported as
/// cached and not re-executed. A failed stage skips the stages that depend on it.
pub fn run_pipeline(mut cfg: RunConfig, runs_dir: &Path) -> Result<RunManifest> {
    cfg.ensure_run_id();
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, runs_dir),
        Precision::F64 => run_typed::<f64>(cfg, runs_dir),
    }
}
