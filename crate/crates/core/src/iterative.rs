//! Closed-loop pruning search: ask for a plan, apply it to the original model,
//! evaluate, keep the best under accuracy, then parameters, then latency.

use std::path::{Path, PathBuf};

use profagent_nn::Scalar;
use serde::{Deserialize, Serialize};

use crate::analysis::{synthesize_validated_plan, AnalysisHistory, CompressionPlan};
use crate::artifacts::write_json;
use crate::compression::{apply_pruning_plan, Importance};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_on, Dataset, EvalOptions, EvaluationReport};
use crate::llm::LlmGateway;
use crate::profiler::ProfilingReport;
use crate::zoo::{save_handle, ModelHandle};

pub const DEFAULT_ITERATIONS: usize = 5;

/// The quantities the selection rule looks at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub correct: usize,
    pub n_samples: usize,
    pub params: u64,
    pub latency_s: f64,
}

impl Candidate {
    pub fn of(eval: &EvaluationReport) -> Self {
        Self { correct: eval.correct, n_samples: eval.n_samples, params: eval.param_count, latency_s: eval.mean_latency_s }
    }
}

/// Strictly better: higher accuracy, else fewer parameters, else lower latency.
///
/// Accuracies are compared as exact fractions of counted samples.
pub fn better(candidate: &Candidate, incumbent: &Candidate) -> bool {
    let lhs = candidate.correct as u128 * incumbent.n_samples as u128;
    let rhs = incumbent.correct as u128 * candidate.n_samples as u128;
    if lhs != rhs {
        return lhs > rhs;
    }
    if candidate.params != incumbent.params {
        return candidate.params < incumbent.params;
    }
    candidate.latency_s < incumbent.latency_s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub model_path: Option<PathBuf>,
    pub acc_best: f64,
    pub correct_best: usize,
    pub params_best: u64,
    pub lat_best: f64,
    pub plan_best: CompressionPlan,
    pub eval_best: EvaluationReport,
    /// 0 when no iteration beat the initial model.
    pub found_at_iteration: usize,
}

impl BestRecord {
    pub fn new(plan: CompressionPlan, eval: EvaluationReport, iteration: usize) -> Self {
        Self {
            model_path: None,
            acc_best: eval.accuracy,
            correct_best: eval.correct,
            params_best: eval.param_count,
            lat_best: eval.mean_latency_s,
            plan_best: plan,
            eval_best: eval,
            found_at_iteration: iteration,
        }
    }

    pub fn candidate(&self) -> Candidate {
        Candidate::of(&self.eval_best)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationFailure {
    pub iteration: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub plan: CompressionPlan,
    pub eval: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub i: usize,
    pub t: usize,
    pub history: Vec<IterationRecord>,
    pub failures: Vec<IterationFailure>,
    pub best: BestRecord,
}

/// The three agents the loop drives. `apply` always starts from the original model.
pub trait LoopAgents {
    type Model;

    fn analyze(
        &mut self,
        report: &ProfilingReport,
        history: &AnalysisHistory,
        iteration: usize,
    ) -> Result<CompressionPlan>;
    fn apply(&mut self, plan: &CompressionPlan) -> Result<Self::Model>;
    fn evaluate(&mut self, model: &Self::Model, iteration: usize) -> Result<EvaluationReport>;
    fn persist(&mut self, model: &Self::Model, dir: &Path) -> Result<()>;
}

/// The initial pruned model and its evaluation, which seed the search.
pub struct Seed<'a, M> {
    pub plan: CompressionPlan,
    pub eval: EvaluationReport,
    pub model: Option<&'a M>,
    /// Evaluation of the unmodified model, used for deltas in prompts.
    pub reference: Option<EvaluationReport>,
}

fn iteration_step<A: LoopAgents>(
    agents: &mut A,
    report: &ProfilingReport,
    prev: &AnalysisHistory,
    i: usize,
    out_dir: Option<&Path>,
) -> Result<(CompressionPlan, EvaluationReport, A::Model)> {
    let plan = agents.analyze(report, prev, i)?;
    if let Some(dir) = out_dir {
        write_json(&dir.join(format!("iter_{i}")).join(format!("analysis_{i}.json")), &plan)?;
    }
    let model = agents.apply(&plan)?;
    let eval = agents.evaluate(&model, i)?;
    if let Some(dir) = out_dir {
        let d = dir.join(format!("iter_{i}"));
        write_json(&d.join(format!("eval_{i}.json")), &eval)?;
        agents.persist(&model, &d.join("model"))?;
    }
    Ok((plan, eval, model))
}

/// Run `t` rounds. Each round is prompted with the previous round's plan and
/// evaluation (the seed for round 1); failed rounds are recorded and skipped.
pub fn run_iterations<A: LoopAgents>(
    report: &ProfilingReport,
    seed: Seed<'_, A::Model>,
    t: usize,
    agents: &mut A,
    out_dir: Option<&Path>,
) -> Result<IterationState> {
    if t == 0 {
        return Err(Error::Config("iterations must be at least 1".into()));
    }
    let mut state = IterationState {
        i: 0,
        t,
        history: Vec::new(),
        failures: Vec::new(),
        best: BestRecord::new(seed.plan.clone(), seed.eval.clone(), 0),
    };
    let mut prev = AnalysisHistory { plan: seed.plan, eval: seed.eval, reference: seed.reference };
    let mut best_model: Option<A::Model> = None;
    for i in 1..=t {
        state.i = i;
        match iteration_step(agents, report, &prev, i, out_dir) {
            Ok((plan, eval, model)) => {
                state.history.push(IterationRecord { iteration: i, plan: plan.clone(), eval: eval.clone() });
                if better(&Candidate::of(&eval), &state.best.candidate()) {
                    state.best = BestRecord::new(plan.clone(), eval.clone(), i);
                    best_model = Some(model);
                }
                prev = AnalysisHistory { plan, eval, reference: prev.reference.take() };
            }
            Err(e) => state.failures.push(IterationFailure { iteration: i, error: e.to_string() }),
        }
    }
    if let Some(dir) = out_dir {
        let best_dir = dir.join("best");
        let model_dir = best_dir.join("model");
        let written = match (&best_model, seed.model) {
            (Some(m), _) => agents.persist(m, &model_dir).map(|_| true)?,
            (None, Some(m)) => agents.persist(m, &model_dir).map(|_| true)?,
            (None, None) => false,
        };
        if written {
            state.best.model_path = Some(model_dir);
        }
        write_json(&best_dir.join("plan.json"), &state.best.plan_best)?;
        write_json(&best_dir.join("eval.json"), &state.best.eval_best)?;
        write_json(&best_dir.join("best.json"), &state.best)?;
        write_json(&dir.join("iterations.json"), &state)?;
    }
    if state.history.is_empty() {
        return Err(Error::AllIterationsFailed { iterations: t, baseline: Box::new(state.best) });
    }
    Ok(state)
}

/// Agents backed by the LLM gateway, the compression module and a dataset subset.
pub struct PipelineAgents<'a, T: Scalar> {
    pub original: &'a ModelHandle<T>,
    pub llm: &'a mut LlmGateway,
    pub dataset: &'a Dataset,
    pub eval: EvalOptions,
    pub importance: Importance,
}

impl<T: Scalar> LoopAgents for PipelineAgents<'_, T> {
    type Model = ModelHandle<T>;

    fn analyze(&mut self, report: &ProfilingReport, history: &AnalysisHistory, iteration: usize) -> Result<CompressionPlan> {
        // the loop prunes only; quantization is a separate stage
        synthesize_validated_plan(report, Some(history), self.llm, iteration, self.original, true)
    }

    fn apply(&mut self, plan: &CompressionPlan) -> Result<ModelHandle<T>> {
        apply_pruning_plan(self.original, plan, self.importance).map(|(m, _)| m)
    }

    fn evaluate(&mut self, model: &ModelHandle<T>, iteration: usize) -> Result<EvaluationReport> {
        evaluate_on(model, &format!("iter_{iteration}"), self.dataset, self.eval)
    }

    fn persist(&mut self, model: &ModelHandle<T>, dir: &Path) -> Result<()> {
        save_handle(model, dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(correct: usize, params: u64, lat: f64) -> Candidate {
        Candidate { correct, n_samples: 100, params, latency_s: lat }
    }

    #[test]
    fn hierarchy() {
        assert!(better(&c(80, 10, 0.10), &c(80, 12, 0.05)));
        assert!(!better(&c(80, 10, 0.1), &c(80, 10, 0.1)));
        assert!(better(&c(81, 99, 9.0), &c(80, 10, 0.1)));
        assert!(better(&c(80, 10, 0.09), &c(80, 10, 0.1)));
        // 3/4 == 75/100 exactly
        let a = Candidate { correct: 3, n_samples: 4, params: 5, latency_s: 1.0 };
        assert!(better(&a, &c(75, 6, 0.1)));
    }
}
