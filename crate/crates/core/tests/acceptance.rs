//! Acceptance criteria, one PASS / FAIL / GATED line each.
//!
//! Criteria 8 and 9 need pretrained weights and an ImageNet validation subset in the
//! model cache; they run only when `PROFAGENT_GATED=1`.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use chrono::Utc;
use profagent::analysis::{
    plan_from_payload, synthesize_plan, synthesize_validated_plan, validate_plan, CompressionPlan, LayerSelector, PlanSource, PruningType,
    QuantDtype, RATIO_MAX, RATIO_MIN,
};
use profagent::baselines::{apply_baseline_pruning, uniform_dynamic_quantize, BaselineMethod, BaselineSpec};
use profagent::compression::{
    apply_pruning_plan, build_dependency_graph, check_forward, member_width, prune_groups, select_removed, GroupTarget,
    Importance,
};
use profagent::evaluation::{compare, evaluate_on, measure_memory, open_dataset, EvalOptions, EvaluationReport, TimingMode};
use profagent::iterative::{better, run_iterations, Candidate, LoopAgents, Seed};
use profagent::llm::{extract_json_block, BackendKind, LlmGateway};
use profagent::pipeline::{run_pipeline, RunConfig, RunManifest, Stage, StageStatus, REPORT_FILE, STAGE_ORDER};
use profagent::profiler::{count_macs, profile, ProfileOptions, ProfilingReport};
use profagent::zoo::{
    acquire_model, enumerate_layers, enumerate_network, fixtures, Device, InputSpec, LayerKind, ModelHandle,
    WeightsSource,
};
use profagent_nn::{Conv2d, Dense, Linear, Network, NetworkBuilder, Op};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn spec_of<T: profagent_nn::Scalar>(h: &ModelHandle<T>) -> InputSpec {
    let s = h.input_shape();
    InputSpec::image(s[0], s[1], s[2])
}

fn output_shape(h: &ModelHandle<f32>) -> Vec<usize> {
    h.network.infer_shapes(&h.input_shape()).expect("shapes").last().cloned().expect("output")
}

fn err<E: std::fmt::Display>(ctx: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{ctx}: {e}")
}

// ---------------------------------------------------------------- criterion 1

/// The agent plan for a fixture, with every pruning ratio replaced by `ratio`.
fn agent_plan(model: &str, handle: &ModelHandle<f32>, ratio: f64) -> Result<CompressionPlan, String> {
    let text = if model == fixtures::TINY_RESNET {
        common::resnet_agent_plan()
    } else {
        // transformer counterpart: MLP expansion channels plus attention heads
        r#"{"pruning_recommendations": [
            {"layer": "vit\\.encoder\\.layer\\.\\d+\\.intermediate\\.dense", "pruning_type": "structured", "pruning_ratio": 0.2, "justification": "largest linear layers"},
            {"layer": "vit\\.encoder\\.layer\\.\\d+\\.attention", "pruning_type": "head", "pruning_ratio": 0.2, "justification": "redundant heads"}],
           "quantization_recommendations": [{"layer": "all", "quantization_type": "dynamic", "dtype": "qint8", "justification": "linear heavy"}]}"#
            .to_string()
    };
    let mut plan = plan_from_payload(&extract_json_block(&text).map_err(err("plan"))?, PlanSource::Llm, 0);
    for d in &mut plan.pruning {
        d.pruning_ratio = ratio;
    }
    validate_plan(&plan, handle).map_err(err("validate"))
}

fn criterion_1() -> Outcome {
    const PERCENTS: [usize; 3] = [1, 10, 20];
    let mut configs = 0;
    let mut removed_total = 0;
    for model in [fixtures::TINY_RESNET, fixtures::TINY_VIT] {
        let h = acquire_model::<f32>(model, Device::Cpu).map_err(err(model))?;
        let graph = build_dependency_graph(&h, &spec_of(&h)).map_err(err(model))?;
        let out = output_shape(&h);
        for method in ["agent", "l1", "l2", "random"] {
            for pct in PERCENTS {
                let ratio = pct as f64 / 100.0;
                let tag = format!("{model}/{method}@{pct}%");
                let (pruned, summary) = if method == "agent" {
                    apply_pruning_plan(&h, &agent_plan(model, &h, ratio)?, Importance::L2).map_err(err(&tag))?
                } else {
                    let spec = BaselineSpec { method: BaselineMethod::parse(method).unwrap(), ratio: Some(ratio), seed: 11 };
                    apply_baseline_pruning(&h, &graph, &spec).map_err(err(&tag))?
                };
                ensure!(!summary.groups.is_empty(), "{tag}: no group targeted");
                let targeted: BTreeMap<usize, usize> =
                    summary.groups.iter().map(|g| (g.group_id, g.width_after)).collect();
                if method != "agent" {
                    let prunable: Vec<usize> = graph.prunable_groups().map(|g| g.group_id).collect();
                    ensure!(
                        targeted.keys().copied().collect::<Vec<_>>() == prunable,
                        "{tag}: baseline must reach every prunable group"
                    );
                }
                for change in &summary.groups {
                    let c = graph.group(change.group_id).width;
                    let mut expect = c - pct * c / 100;
                    if expect == 0 {
                        expect = 1;
                    }
                    ensure!(change.width_before == c, "{tag}: group {} width_before", change.group_id);
                    ensure!(
                        change.width_after == expect,
                        "{tag}: group {} kept {} of {c}, expected {expect}",
                        change.group_id,
                        change.width_after
                    );
                    ensure!(change.removed.len() == c - expect, "{tag}: removed list length");
                    removed_total += change.removed.len();
                }
                for g in &graph.groups {
                    let want = targeted.get(&g.group_id).copied().unwrap_or(g.width);
                    for m in &g.members {
                        let got = member_width(&pruned, m).map_err(err(&tag))?;
                        ensure!(got == want, "{tag}: {} ({:?}) has width {got}, group says {want}", m.layer, m.axis);
                    }
                }
                for seed in 0..10 {
                    check_forward(&pruned, &out, seed).map_err(err(&tag))?;
                }
                configs += 1;
            }
        }
    }
    ensure!(removed_total > 0, "no configuration removed anything");
    Ok(format!("{configs} configurations, {removed_total} indices removed"))
}

// ---------------------------------------------------------------- criterion 2

fn l_norm(row: &[f64], p: u8) -> f64 {
    let mut acc = 0.0;
    for &v in row {
        acc += if p == 1 { v.abs() } else { v * v };
    }
    if p == 1 {
        acc
    } else {
        acc.sqrt()
    }
}

/// Exhaustive search over all index subsets of size `n` for the smallest total norm.
fn brute_force_lowest(scores: &[f64], n: usize) -> Vec<usize> {
    let width = scores.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << width) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let idx: Vec<usize> = (0..width).filter(|i| mask & (1 << i) != 0).collect();
        let total: f64 = idx.iter().map(|&i| scores[i]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, idx));
        }
    }
    best.map(|(_, i)| i).unwrap_or_default()
}

fn mlp(rng: &mut ChaCha8Rng, inp: usize, hidden: usize) -> ModelHandle<f32> {
    let mut b = NetworkBuilder::new(vec![inp, 1, 1]);
    let f = b.push("flatten", Op::Flatten, &[b.input()]);
    let l1 = b.push("fc1", Op::Linear(Dense::Float(Linear::new(rng, inp, hidden, true))), &[f]);
    let a = b.push("act", Op::Relu, &[l1]);
    b.push("fc2", Op::Linear(Dense::Float(Linear::new(rng, hidden, 3, true))), &[a]);
    common::handle_from(b.build().expect("mlp"), 3)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..20 {
        let (inp, hidden) = (rng.random_range(2..=9), rng.random_range(3..=12));
        let h = mlp(&mut rng, inp, hidden);
        let graph = build_dependency_graph(&h, &spec_of(&h)).map_err(err("graph"))?;
        let group = graph.output_group("fc1").ok_or("fc1 has no output group")?.clone();
        let Op::Linear(Dense::Float(l)) = &h.network.node("fc1").unwrap().op else { return Err("fc1".into()) };
        let rows: Vec<Vec<f64>> =
            (0..hidden).map(|o| (0..inp).map(|i| l.weight[[o, i]] as f64).collect()).collect();
        let n = hidden * rng.random_range(1..=6) / 10;
        for (p, importance) in [(1u8, Importance::L1), (2, Importance::L2)] {
            let scores: Vec<f64> = rows.iter().map(|r| l_norm(r, p)).collect();
            let oracle = brute_force_lowest(&scores, n);
            let picked = select_removed(&h, &group, n, importance).map_err(err("select"))?;
            ensure!(picked == oracle, "trial {trial} L{p}: picked {picked:?}, oracle {oracle:?}");
            if n > 0 {
                let mut pruned = h.clone();
                let ratio = n as f64 / hidden as f64;
                let target = GroupTarget { group_id: group.group_id, ratio, directive: "oracle".into() };
                let s = prune_groups(&mut pruned, &graph, &[target], importance).map_err(err("prune"))?;
                ensure!(s.groups[0].removed == oracle, "trial {trial} L{p}: prune_groups removed other indices");
            }
        }
    }
    let mut checked = 0;
    for model in [fixtures::TINY_RESNET, fixtures::TINY_VIT, fixtures::TINY_CNN, fixtures::TINY_BN_CNN] {
        let h = acquire_model::<f32>(model, Device::Cpu).map_err(err(model))?;
        let graph = build_dependency_graph(&h, &spec_of(&h)).map_err(err(model))?;
        for ratio in [0.01, 0.1, 0.2, 0.5] {
            let counts: Vec<u64> = [BaselineMethod::L1, BaselineMethod::L2, BaselineMethod::Random]
                .into_iter()
                .map(|method| {
                    apply_baseline_pruning(&h, &graph, &BaselineSpec { method, ratio: Some(ratio), seed: 5 })
                        .map(|(m, _)| m.param_count())
                        .map_err(err(model))
                })
                .collect::<Result<_, _>>()?;
            ensure!(counts.windows(2).all(|w| w[0] == w[1]), "{model}@{ratio}: param counts differ {counts:?}");
            checked += 1;
        }
    }
    Ok(format!("20 matrices match the exhaustive oracle; {checked} equal-count checks"))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..12 {
        let g = [1, 2][rng.random_range(0..2)];
        let (cin, cout) = (g * rng.random_range(1..=4), g * rng.random_range(1..=4));
        let (k, s, p) = (rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(0..=1));
        let (hh, ww) = (rng.random_range(k..=9), rng.random_range(k..=9));
        let mut b = NetworkBuilder::<f32>::new(vec![cin, hh, ww]);
        b.push("conv", Op::Conv2d(Conv2d::new(&mut rng, cin, cout, (k, k), (s, s), (p, p), g, true)), &[b.input()]);
        let net = b.build().map_err(err("conv net"))?;
        let layer = enumerate_network(&net).into_iter().find(|l| l.kind == LayerKind::Conv2d).ok_or("no conv")?;
        let got = count_macs(&layer, &[cin, hh, ww]).map_err(err("count_macs"))?;
        let want = common::naive_conv_macs(cin, cout, k, s, p, g, hh, ww);
        ensure!(got == want, "conv case {case}: {got} vs naive {want}");

        let (inp, out, tokens) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=5));
        let mut b = NetworkBuilder::<f32>::new(vec![1, tokens, inp]);
        b.push("fc", Op::Linear(Dense::Float(Linear::new(&mut rng, inp, out, true))), &[b.input()]);
        let net = b.build().map_err(err("linear net"))?;
        let layer = enumerate_network(&net).into_iter().find(|l| l.kind == LayerKind::Linear).ok_or("no linear")?;
        let got = count_macs(&layer, &[tokens, inp]).map_err(err("count_macs"))?;
        let want = common::naive_linear_macs(tokens, inp, out);
        ensure!(got == want, "linear case {case}: {got} vs naive {want}");
    }
    let mut b = NetworkBuilder::<f32>::new(vec![1, 1, 4]);
    b.push("fc", Op::Linear(Dense::Float(Linear::new(&mut rng, 4, 8, true))), &[b.input()]);
    let net: Network<f32> = b.build().map_err(err("linear 4->8"))?;
    let layer = &enumerate_network(&net)[0];
    ensure!(layer.param_count == 40, "linear(4->8) has {} params", layer.param_count);
    let macs = count_macs(layer, &[4]).map_err(err("count_macs"))?;
    ensure!(macs == 32, "linear(4->8) has {macs} MACs");
    Ok("12 conv + 12 linear configs match the naive loop; linear(4->8): 40 params, 32 MACs".into())
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let h = acquire_model::<f32>(fixtures::TINY_MLP, Device::Cpu).map_err(err("mlp"))?;
    let layers = enumerate_layers(&h);
    ensure!(
        layers.iter().all(|l| matches!(l.kind, LayerKind::Linear | LayerKind::Other)),
        "fixture is not all-linear"
    );
    let (q, _) = uniform_dynamic_quantize(&h).map_err(err("quantize"))?;
    // analytic: float32 weights become 1 byte each plus one 4-byte scale per output row
    let mut before = 0u64;
    let mut saved = 0u64;
    for l in &layers {
        before += l.param_count * 4;
        if l.kind == LayerKind::Linear {
            let w = (l.out_channels * l.in_channels) as u64;
            saved += w * 4 - (w + 4 * l.out_channels as u64);
        }
    }
    let analytic = 100.0 * saved as f64 / before as f64;
    let (mb, ma) = (measure_memory(&h), measure_memory(&q));
    let measured = 100.0 * (mb as f64 - ma as f64) / mb as f64;
    ensure!((measured - analytic).abs() <= 2.0, "measured {measured:.2}% vs analytic {analytic:.2}%");
    ensure!(q.param_count() == h.param_count(), "parameter count changed");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = h.input_shape();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&shape), |_| rng.random_range(-1.0f32..=1.0));
        let a = h.network.forward(&x).map_err(err("forward"))?;
        let b = q.network.forward(&x).map_err(err("forward q"))?;
        for (u, v) in a.iter().zip(b.iter()) {
            worst = worst.max((u - v).abs() as f64);
        }
    }
    ensure!(worst <= 0.1, "max logit deviation {worst}");
    Ok(format!("reduction {measured:.2}% (analytic {analytic:.2}%), params equal, max logit dev {worst:.4}"))
}

// ---------------------------------------------------------------- criterion 5

fn eval_report(c: &Candidate) -> EvaluationReport {
    EvaluationReport {
        model_ref: "mock".into(),
        dataset_id: "mock".into(),
        n_samples: c.n_samples,
        correct: c.correct,
        accuracy: c.correct as f64 / c.n_samples as f64,
        exact_correct: c.correct,
        exact_accuracy: c.correct as f64 / c.n_samples as f64,
        mean_latency_s: c.latency_s,
        latency_samples_s: vec![c.latency_s; c.n_samples],
        memory_bytes: c.params * 4,
        param_count: c.params,
        seed: 0,
        timing: TimingMode::Modeled,
        sample_ids: (0..c.n_samples).map(|i| i.to_string()).collect(),
        timestamp: Utc::now(),
    }
}

struct MockAgents<'a> {
    llm: LlmGateway,
    handle: &'a ModelHandle<f32>,
    table: Vec<Candidate>,
}

impl LoopAgents for MockAgents<'_> {
    type Model = usize;

    fn analyze(
        &mut self,
        report: &ProfilingReport,
        history: &profagent::analysis::AnalysisHistory,
        i: usize,
    ) -> profagent::Result<CompressionPlan> {
        validate_plan(&synthesize_plan(report, Some(history), &mut self.llm, i), self.handle)
    }

    fn apply(&mut self, _plan: &CompressionPlan) -> profagent::Result<usize> {
        Ok(0)
    }

    fn evaluate(&mut self, _model: &usize, i: usize) -> profagent::Result<EvaluationReport> {
        Ok(eval_report(&self.table[i - 1]))
    }

    fn persist(&mut self, _model: &usize, _dir: &std::path::Path) -> profagent::Result<()> {
        Ok(())
    }
}

/// Reference ordering: accuracy as a float (exact for denominators ≤ 1000), then params, then latency.
fn oracle_better(a: &Candidate, b: &Candidate) -> bool {
    let (fa, fb) = (a.correct as f64 / a.n_samples as f64, b.correct as f64 / b.n_samples as f64);
    (-fa, a.params, a.latency_s).partial_cmp(&(-fb, b.params, b.latency_s)) == Some(std::cmp::Ordering::Less)
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let h = acquire_model::<f32>(fixtures::TINY_RESNET, Device::Cpu).map_err(err("model"))?;
    let report = profile(&h, &spec_of(&h), ProfileOptions { warmup: 0, repeats: 1, accelerator: false })
        .map_err(err("profile"))?;
    let plans = [
        common::resnet_agent_plan(),
        r#"{"pruning_recommendations": [{"layer": "encoder\\.stages1\\..*convolution", "pruning_type": "structured", "pruning_ratio": 0.3}], "quantization_recommendations": []}"#.into(),
        "not a plan at all".into(),
        r#"{"pruning_recommendations": [{"layer": "embedder\\.convolution", "pruning_type": "structured", "pruning_ratio": 0.5}], "quantization_recommendations": []}"#.into(),
        r#"```json
{"pruning_recommendations": [{"layer": "encoder\\.stages0\\.layer\\.0\\.convolution", "pruning_type": "structured", "pruning_ratio": 0.25}], "quantization_recommendations": []}
```"#.into(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seed_kept = 0;
    for trial in 0..200 {
        let n = 20;
        let draw = |rng: &mut ChaCha8Rng| Candidate {
            correct: rng.random_range(15..=18),
            n_samples: n,
            params: rng.random_range(100..=102),
            latency_s: [0.1, 0.2, 0.3][rng.random_range(0..3)],
        };
        let seed_c = draw(&mut rng);
        let table: Vec<Candidate> = (0..5).map(|_| draw(&mut rng)).collect();
        // the gateway retries on schema failures, so every response is scripted thrice
        let responses: Vec<String> = plans.iter().flat_map(|p| std::iter::repeat_n(p.clone(), 3)).collect();
        let llm = LlmGateway::scripted(responses).map_err(err("gateway"))?;
        let mut agents = MockAgents { llm, handle: &h, table: table.clone() };
        let seed = Seed {
            plan: CompressionPlan::empty(PlanSource::Llm, 0),
            eval: eval_report(&seed_c),
            model: None,
            reference: None,
        };
        let state = run_iterations(&report, seed, 5, &mut agents, None).map_err(err("loop"))?;
        let all: Vec<Candidate> = std::iter::once(seed_c).chain(table.iter().copied()).collect();
        let mut want = 0;
        for (i, c) in all.iter().enumerate() {
            if oracle_better(c, &all[want]) {
                want = i;
            }
        }
        ensure!(
            state.best.found_at_iteration == want,
            "trial {trial}: loop picked iteration {}, oracle {want}",
            state.best.found_at_iteration
        );
        ensure!(state.best.candidate() == all[want], "trial {trial}: best record differs from its iteration");
        if want == 0 {
            seed_kept += 1;
        }
    }
    ensure!(seed_kept > 0, "no trial exercised a seed-held best");
    for _ in 0..10_000 {
        let mut c = || Candidate {
            correct: rng.random_range(0..=10),
            n_samples: rng.random_range(1..=10),
            params: rng.random_range(0..=2),
            latency_s: rng.random_range(0..=2) as f64 * 0.5,
        };
        let (a, b) = (c(), c());
        let (a, b) = (Candidate { correct: a.correct.min(a.n_samples), ..a }, Candidate { correct: b.correct.min(b.n_samples), ..b });
        ensure!(better(&a, &b) == oracle_better(&a, &b), "better() disagrees on {a:?} vs {b:?}");
    }
    Ok(format!("200 loops match the brute-force optimum ({seed_kept} seed-held), 10^4 comparisons agree, {:.1}s", started.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let h = acquire_model::<f32>(fixtures::TINY_RESNET, Device::Cpu).map_err(err("model"))?;
    let report = profile(&h, &spec_of(&h), ProfileOptions { warmup: 0, repeats: 1, accelerator: false })
        .map_err(err("profile"))?;
    let adversarial: [&str; 10] = [
        "I'm sorry, I cannot help with that.",
        r#"{"foo": 1, "bar": [1, 2]}"#,
        r#"{"pruning_recommendations": [{"layer": "encoder\\.stages0\\.layer\\.0\\.convolution", "pruning_type": "structured", "pruning_ratio": 1.7}], "quantization_recommendations": []}"#,
        r#"{"pruning_recommendations": "everything", "quantization_recommendations": 5}"#,
        r#"{"pruning_recommendations": [{"layer": 12, "pruning_type": [], "pruning_ratio": "high"}], "quantization_recommendations": [{"layer": "all", "quantization_type": "static", "dtype": "int4"}]}"#,
        r#"{"pruning_recommendations": [{"layer": "classifier", "pruning_type": "structured", "pruning_ratio": -0.3}], "quantization_recommendations": []}"#,
        r#"{"pruning_recommendations": [{"layer": "encoder\\.stages((", "pruning_type": "structured", "pruning_ratio": 0.2}], "quantization_recommendations": []}"#,
        r#"{"pruning_recommendations": [{"layer": "no\\.such\\.layer", "pruning_type": "head", "pruning_ratio": 0.2}], "quantization_recommendations": [{"layer": "nothing_here", "quantization_type": "dynamic", "dtype": "qint8"}]}"#,
        r#"Sure! {"pruning_recommendations": [{"layer": "encoder\\.stages1\\.layer\\.1\\.convolution", "pruning_type": "structured", "pruning_ratio": 1e308, "extra": true}], "quantization_recommendations": [], "confidence": "high"}"#,
        "[1, 2, 3]",
    ];
    for (i, text) in adversarial.iter().enumerate() {
        let mut llm = LlmGateway::scripted(vec![*text; 3]).map_err(err("gateway"))?;
        let plan = synthesize_plan(&report, None, &mut llm, 0);
        let mut llm = LlmGateway::scripted(vec![*text; 3]).map_err(err("gateway"))?;
        let valid = synthesize_validated_plan(&report, None, &mut llm, 0, &h, false)
            .map_err(|e| format!("backend {i}: no valid plan: {e}"))?;
        ensure!(!valid.is_empty(), "backend {i}: empty plan");
        for p in [&plan, &valid] {
            for d in &p.pruning {
                ensure!(
                    d.pruning_ratio > 0.0 && d.pruning_ratio < 1.0,
                    "backend {i}: ratio {} out of range",
                    d.pruning_ratio
                );
                ensure!(
                    (RATIO_MIN..=RATIO_MAX).contains(&d.pruning_ratio),
                    "backend {i}: ratio {} not clamped",
                    d.pruning_ratio
                );
                ensure!(profagent::analysis::compile_pattern(&d.layer_pattern).is_ok(), "backend {i}: bad pattern");
            }
            for q in &p.quantization {
                ensure!(q.layer_selector.matcher().is_ok(), "backend {i}: bad selector");
            }
            if matches!(p.source, PlanSource::Llm | PlanSource::FallbackRule) {
                ensure!(!p.is_empty(), "backend {i}: {:?} plan without directives", p.source);
            }
        }
        ensure!(validate_plan(&valid, &h).ok().as_ref() == Some(&valid), "backend {i}: validate is not idempotent");
    }
    let mut llm = LlmGateway::scripted(vec![common::resnet_agent_plan()]).map_err(err("gateway"))?;
    let plan = synthesize_plan(&report, None, &mut llm, 0);
    ensure!(plan.source == PlanSource::Llm, "agent plan fell back: {:?}", plan.warnings);
    ensure!(plan.pruning.len() == 1 && plan.quantization.len() == 1, "directive counts");
    let d = &plan.pruning[0];
    ensure!(
        d.pruning_type == PruningType::Structured
            && d.pruning_ratio == 0.2
            && d.layer_pattern == r"encoder\.stages\d+\.layer\.\d+\.convolution",
        "pruning directive {d:?}"
    );
    let q = &plan.quantization[0];
    ensure!(q.layer_selector == LayerSelector::All && q.dtype == QuantDtype::Qint8, "quantization directive {q:?}");
    Ok("10 adversarial backends yield valid plans; agent plan parses to structured@0.2 + qint8 all".into())
}

// ---------------------------------------------------------------- criterion 7

fn strip_volatile(mut v: Value) -> Value {
    if let Some(o) = v.as_object_mut() {
        o.remove("started");
        o.remove("finished");
        if let Some(Value::Array(stages)) = o.get_mut("stages") {
            for s in stages {
                if let Some(so) = s.as_object_mut() {
                    so.remove("wall_s");
                }
            }
        }
    }
    v
}

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let cfg = RunConfig {
        run_id: "repro".into(),
        model_id: fixtures::TINY_RESNET.into(),
        stages: STAGE_ORDER.to_vec(),
        llm_backend: BackendKind::Scripted,
        llm_fixtures: Some(common::fixture_dir().join("scripted_run")),
        n_samples: 40,
        warmup: 1,
        repeats: 3,
        iterations: 5,
        baseline_method: Some(BaselineMethod::L1),
        baseline_ratio: Some(0.2),
        timing: TimingMode::Modeled,
        ..RunConfig::default()
    };
    let mut manifests: Vec<(RunManifest, Vec<u8>)> = Vec::new();
    let dirs = [tempfile::tempdir().map_err(err("tmp"))?, tempfile::tempdir().map_err(err("tmp"))?];
    for d in &dirs {
        let m = run_pipeline(cfg.clone(), d.path()).map_err(err("run"))?;
        for s in &m.stages {
            ensure!(s.status == StageStatus::Ok, "stage {} is {:?}: {:?}", s.stage.as_str(), s.status, s.detail);
        }
        let run_dir = d.path().join("repro");
        for a in &m.artifacts {
            let p = run_dir.join(a);
            ensure!(p.exists(), "manifest lists missing {a}");
            if a.ends_with(".json") {
                serde_json::from_slice::<Value>(&std::fs::read(&p).map_err(err(a))?).map_err(err(a))?;
            }
        }
        let report = std::fs::read(run_dir.join(REPORT_FILE)).map_err(err("report"))?;
        manifests.push((m, report));
    }
    let a = strip_volatile(serde_json::to_value(&manifests[0].0).map_err(err("json"))?);
    let b = strip_volatile(serde_json::to_value(&manifests[1].0).map_err(err("json"))?);
    ensure!(a == b, "manifests differ:\n{a}\n{b}");
    ensure!(manifests[0].1 == manifests[1].1, "rendered reports differ");
    ensure!(manifests[0].0.stages.len() == 7 && manifests[0].0.status(Stage::Iterate) == Some(StageStatus::Ok), "stages");
    Ok(format!("two scripted runs agree; {} report bytes identical, {:.1}s", manifests[0].1.len(), started.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- criteria 8, 9

enum Gate {
    Run,
    Skip(String),
}

fn gate() -> Gate {
    if std::env::var("PROFAGENT_GATED").as_deref() != Ok("1") {
        return Gate::Skip("set PROFAGENT_GATED=1 with pretrained weights and the dataset in the model cache".into());
    }
    Gate::Run
}

fn pretrained(model_id: &str) -> Result<ModelHandle<f32>, String> {
    let h = acquire_model::<f32>(model_id, Device::Cpu).map_err(err(model_id))?;
    match h.weights {
        WeightsSource::Pretrained { .. } => Ok(h),
        _ => Err(format!("no pretrained checkpoint cached for {model_id}")),
    }
}

fn criterion_8() -> Result<Outcome, String> {
    let h = pretrained("google/vit-base-patch16-224")?;
    let dataset = open_dataset("imagenet-1k-val-subset").map_err(err("dataset"))?;
    Ok((|| {
        let (q, _) = uniform_dynamic_quantize(&h).map_err(err("quantize"))?;
        let opts = EvalOptions { n_samples: 1000, seed: 42, timing: TimingMode::Wall };
        let before = evaluate_on(&h, "original", &dataset, opts).map_err(err("eval"))?;
        let after = evaluate_on(&q, "qint8", &dataset, opts).map_err(err("eval q"))?;
        let c = compare("qint8", &before, &after).map_err(err("compare"))?;
        ensure!((c.mem_reduction_pct - 74.0).abs() <= 2.0, "memory reduction {:.2}%", c.mem_reduction_pct);
        ensure!(c.delta_acc_points >= -1.0, "top-1 drop {:.2} points", -c.delta_acc_points);
        ensure!(c.speedup > 1.0, "speedup {:.3}", c.speedup);
        Ok(format!(
            "mem -{:.1}%, top-1 {:.1} -> {:.1}, speedup {:.2}x",
            c.mem_reduction_pct,
            100.0 * c.accuracy_before,
            100.0 * c.accuracy_after,
            c.speedup
        ))
    })())
}

fn criterion_9() -> Result<Outcome, String> {
    let h = pretrained("microsoft/resnet-101")?;
    Ok((|| {
        let (q, _) = uniform_dynamic_quantize(&h).map_err(err("quantize"))?;
        let (mb, ma) = (measure_memory(&h) as f64, measure_memory(&q) as f64);
        let red = 100.0 * (mb - ma) / mb;
        ensure!((red - 3.4).abs() <= 1.0, "memory reduction {red:.2}%");
        Ok(format!("mem -{red:.2}%"))
    })())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test` passes harness flags such as `--list`; there are no sub-tests to list
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("structural pruning soundness", criterion_1),
        ("baseline ranking oracle equivalence", criterion_2),
        ("MAC and parameter counting", criterion_3),
        ("quantization bytes", criterion_4),
        ("iterative loop optimality", criterion_5),
        ("analysis robustness", criterion_6),
        ("pipeline reproducibility", criterion_7),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {e}", i + 1);
            }
        }
    }
    let gated: [(&str, fn() -> Result<Outcome, String>); 2] =
        [("ViT-B/16 qint8 on ImageNet subset", criterion_8), ("ResNet-101 qint8 memory", criterion_9)];
    for (i, (name, f)) in gated.iter().enumerate() {
        let n = i + 8;
        let outcome = match gate() {
            Gate::Skip(why) => Err(why),
            Gate::Run => f(),
        };
        match outcome {
            Err(why) => println!("criterion {n}: GATED {name}: {why}"),
            Ok(Ok(detail)) => println!("criterion {n}: PASS  {name}: {detail}"),
            Ok(Err(e)) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name}: {e}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
