//! The analysis agent: profiling report in, validated compression plan out.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evaluation::EvaluationReport;
use crate::llm::{JsonSchemaSpec, JsonType, LlmGateway};
use crate::profiler::ProfilingReport;
use crate::zoo::{enumerate_layers, LayerDescriptor, LayerKind, ModelHandle};

pub const RATIO_MIN: f64 = 0.01;
pub const RATIO_MAX: f64 = 0.95;
pub const FALLBACK_RATIO: f64 = 0.1;
const TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningType {
    Structured,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizationType {
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantDtype {
    Qint8,
    Float16,
}

impl QuantDtype {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qint8" | "int8" => Ok(QuantDtype::Qint8),
            "float16" | "fp16" | "half" => Ok(QuantDtype::Float16),
            _ => Err(Error::UnsupportedDtype(s.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuantDtype::Qint8 => "qint8",
            QuantDtype::Float16 => "float16",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSelector {
    All,
    Pattern(String),
}

impl LayerSelector {
    pub fn from_str(s: &str) -> Self {
        if s.trim().eq_ignore_ascii_case("all") {
            LayerSelector::All
        } else {
            LayerSelector::Pattern(s.to_string())
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            LayerSelector::All => "all",
            LayerSelector::Pattern(p) => p,
        }
    }

    pub fn matcher(&self) -> Result<Option<Regex>> {
        match self {
            LayerSelector::All => Ok(None),
            LayerSelector::Pattern(p) => compile_pattern(p).map(Some),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningDirective {
    pub layer_pattern: String,
    pub pruning_type: PruningType,
    pub pruning_ratio: f64,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationDirective {
    pub layer_selector: LayerSelector,
    pub quantization_type: QuantizationType,
    pub dtype: QuantDtype,
    pub justification: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Llm,
    FallbackRule,
    UserCli,
}

/// Pruning and quantization directives, stored on disk in the recommendation-list layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PlanFile", try_from = "PlanFile")]
pub struct CompressionPlan {
    pub pruning: Vec<PruningDirective>,
    pub quantization: Vec<QuantizationDirective>,
    pub source: PlanSource,
    pub iteration: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PruneRec {
    layer: String,
    pruning_type: PruningType,
    pruning_ratio: f64,
    justification: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuantRec {
    layer: String,
    quantization_type: QuantizationType,
    dtype: QuantDtype,
    justification: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanMeta {
    source: PlanSource,
    iteration: usize,
    #[serde(default)]
    warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanFile {
    pruning_recommendations: Vec<PruneRec>,
    quantization_recommendations: Vec<QuantRec>,
    #[serde(rename = "_meta")]
    meta: PlanMeta,
}

impl From<CompressionPlan> for PlanFile {
    fn from(p: CompressionPlan) -> Self {
        PlanFile {
            pruning_recommendations: p
                .pruning
                .into_iter()
                .map(|d| PruneRec {
                    layer: d.layer_pattern,
                    pruning_type: d.pruning_type,
                    pruning_ratio: d.pruning_ratio,
                    justification: d.justification,
                })
                .collect(),
            quantization_recommendations: p
                .quantization
                .into_iter()
                .map(|d| QuantRec {
                    layer: d.layer_selector.as_str().to_string(),
                    quantization_type: d.quantization_type,
                    dtype: d.dtype,
                    justification: d.justification,
                })
                .collect(),
            meta: PlanMeta { source: p.source, iteration: p.iteration, warnings: p.warnings },
        }
    }
}

impl TryFrom<PlanFile> for CompressionPlan {
    type Error = String;

    fn try_from(f: PlanFile) -> std::result::Result<Self, String> {
        let pruning = f
            .pruning_recommendations
            .into_iter()
            .map(|r| {
                if !(r.pruning_ratio > 0.0 && r.pruning_ratio < 1.0) {
                    return Err(format!("pruning_ratio {} outside (0, 1)", r.pruning_ratio));
                }
                compile_pattern(&r.layer).map_err(|e| e.to_string())?;
                Ok(PruningDirective {
                    layer_pattern: r.layer,
                    pruning_type: r.pruning_type,
                    pruning_ratio: r.pruning_ratio,
                    justification: r.justification,
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        let quantization = f
            .quantization_recommendations
            .into_iter()
            .map(|r| QuantizationDirective {
                layer_selector: LayerSelector::from_str(&r.layer),
                quantization_type: r.quantization_type,
                dtype: r.dtype,
                justification: r.justification,
            })
            .collect();
        Ok(CompressionPlan {
            pruning,
            quantization,
            source: f.meta.source,
            iteration: f.meta.iteration,
            warnings: f.meta.warnings,
        })
    }
}

impl CompressionPlan {
    pub fn empty(source: PlanSource, iteration: usize) -> Self {
        Self { pruning: Vec::new(), quantization: Vec::new(), source, iteration, warnings: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.pruning.is_empty() && self.quantization.is_empty()
    }

    fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        if !self.warnings.contains(&msg) {
            self.warnings.push(msg);
        }
    }

    /// Quantize every linear layer with `dtype`; the command-line fallback.
    pub fn quantize_all(dtype: QuantDtype, source: PlanSource) -> Self {
        let mut p = Self::empty(source, 0);
        p.quantization.push(QuantizationDirective {
            layer_selector: LayerSelector::All,
            quantization_type: QuantizationType::Dynamic,
            dtype,
            justification: "requested on the command line".into(),
        });
        p
    }
}

/// Anchored regex: the pattern must match a whole qualified name.
pub fn compile_pattern(pattern: &str) -> Result<Regex> {
    Regex::new(&format!("^(?:{pattern})$")).map_err(|e| Error::InvalidPattern {
        pattern: pattern.to_string(),
        reason: e.to_string(),
    })
}

fn clamp_ratio(r: f64) -> (f64, bool) {
    if r < RATIO_MIN {
        (RATIO_MIN, true)
    } else if r > RATIO_MAX {
        (RATIO_MAX, true)
    } else {
        (r, false)
    }
}

fn as_items(v: Option<&Value>) -> Vec<&Value> {
    match v {
        Some(Value::Array(items)) => items.iter().collect(),
        Some(o @ Value::Object(_)) => vec![o],
        _ => Vec::new(),
    }
}

fn text_field(item: &Value, key: &str) -> Option<String> {
    item.get(key).and_then(Value::as_str).map(str::to_string)
}

/// Normalize an LLM payload into a plan. Malformed directives are dropped with a warning;
/// ratios outside `[0.01, 0.95]` are clamped and flagged.
pub fn plan_from_payload(payload: &Value, source: PlanSource, iteration: usize) -> CompressionPlan {
    let mut plan = CompressionPlan::empty(source, iteration);
    for (i, item) in as_items(payload.get("pruning_recommendations")).into_iter().enumerate() {
        let Some(layer) = text_field(item, "layer") else {
            plan.warn(format!("pruning recommendation {i} dropped: `layer` is not a string"));
            continue;
        };
        let pruning_type = match text_field(item, "pruning_type").as_deref().map(str::to_ascii_lowercase).as_deref() {
            Some("structured") => PruningType::Structured,
            Some("head") => PruningType::Head,
            other => {
                plan.warn(format!("pruning recommendation {i} dropped: unknown pruning_type {other:?}"));
                continue;
            }
        };
        let Some(ratio) = item.get("pruning_ratio").and_then(Value::as_f64) else {
            plan.warn(format!("pruning recommendation {i} dropped: `pruning_ratio` is not a number"));
            continue;
        };
        if let Err(e) = compile_pattern(&layer) {
            plan.warn(format!("pruning recommendation {i} dropped: {e}"));
            continue;
        }
        let (pruning_ratio, clamped) = clamp_ratio(ratio);
        if clamped {
            plan.warn(format!("pruning ratio {ratio} for `{layer}` clamped to {pruning_ratio}"));
        }
        plan.pruning.push(PruningDirective {
            layer_pattern: layer,
            pruning_type,
            pruning_ratio,
            justification: text_field(item, "justification").unwrap_or_default(),
        });
    }
    for (i, item) in as_items(payload.get("quantization_recommendations")).into_iter().enumerate() {
        let Some(layer) = text_field(item, "layer") else {
            plan.warn(format!("quantization recommendation {i} dropped: `layer` is not a string"));
            continue;
        };
        let qtype = text_field(item, "quantization_type").map(|s| s.to_ascii_lowercase());
        if qtype.as_deref() != Some("dynamic") {
            plan.warn(format!("quantization recommendation {i} dropped: only dynamic quantization is supported, got {qtype:?}"));
            continue;
        }
        let dtype = match text_field(item, "dtype").map(|d| QuantDtype::parse(&d)) {
            Some(Ok(d)) => d,
            Some(Err(e)) => {
                plan.warn(format!("quantization recommendation {i} dropped: {e}"));
                continue;
            }
            None => {
                plan.warn(format!("quantization recommendation {i} dropped: `dtype` is not a string"));
                continue;
            }
        };
        let selector = LayerSelector::from_str(&layer);
        if let Err(e) = selector.matcher() {
            plan.warn(format!("quantization recommendation {i} dropped: {e}"));
            continue;
        }
        plan.quantization.push(QuantizationDirective {
            layer_selector: selector,
            quantization_type: QuantizationType::Dynamic,
            dtype,
            justification: text_field(item, "justification").unwrap_or_default(),
        });
    }
    plan
}

pub fn plan_schema() -> JsonSchemaSpec {
    JsonSchemaSpec::new(vec![
        ("pruning_recommendations", vec![JsonType::Array, JsonType::Object]),
        ("quantization_recommendations", vec![JsonType::Array, JsonType::Object]),
    ])
}

/// The prior iteration handed back to the LLM.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisHistory {
    pub plan: CompressionPlan,
    pub eval: EvaluationReport,
    /// Evaluation of the unmodified model, used to express deltas.
    pub reference: Option<EvaluationReport>,
}

fn ranking(out: &mut String, title: &str, rows: &[(String, String)]) {
    let _ = writeln!(out, "{title}:");
    for (i, (name, detail)) in rows.iter().enumerate() {
        let _ = writeln!(out, "  {}. {name} {detail}", i + 1);
    }
}

pub fn build_analysis_prompt(report: &ProfilingReport, history: Option<&AnalysisHistory>) -> String {
    let s = &report.static_profile;
    let mut out = String::new();
    let spec = &report.input_spec;
    let _ = writeln!(
        out,
        "You are optimizing the vision classification model '{}' (family: {}) for inference.",
        report.model_id,
        serde_json::to_value(report.family).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
    );
    let _ = writeln!(
        out,
        "Input: {}x{}x{}. Total parameters: {}. Total MACs: {}.\n",
        spec.channels, spec.height, spec.width, s.total_params, s.total_macs
    );

    let mut by_macs: Vec<_> = s.layers.iter().filter(|l| l.mac_count > 0).collect();
    by_macs.sort_by_key(|l| std::cmp::Reverse(l.mac_count));
    let total_macs = s.total_macs.max(1) as f64;
    let rows: Vec<_> = by_macs
        .iter()
        .take(TOP_K)
        .map(|l| {
            (
                l.qualified_name.clone(),
                format!("({:?}) macs={} ({:.1}%)", l.kind, l.mac_count, 100.0 * l.mac_count as f64 / total_macs),
            )
        })
        .collect();
    ranking(&mut out, &format!("Top {TOP_K} layers by MACs"), &rows);

    let mut by_params: Vec<_> = s.layers.iter().filter(|l| l.param_count > 0).collect();
    by_params.sort_by_key(|l| std::cmp::Reverse(l.param_count));
    let rows: Vec<_> = by_params
        .iter()
        .take(TOP_K)
        .map(|l| (l.qualified_name.clone(), format!("({:?}) params={}", l.kind, l.param_count)))
        .collect();
    ranking(&mut out, &format!("Top {TOP_K} layers by parameters"), &rows);

    if !report.layer_latency.is_empty() {
        let mut by_lat: Vec<_> = report.layer_latency.iter().collect();
        by_lat.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
        let rows: Vec<_> = by_lat
            .iter()
            .take(TOP_K)
            .map(|(n, us)| (n.to_string(), format!("mean_latency_us={us:.1}")))
            .collect();
        ranking(&mut out, &format!("Top {TOP_K} layers by measured latency"), &rows);
    }

    if let Some(h) = history {
        let plan_json = serde_json::to_string_pretty(&h.plan).unwrap_or_default();
        let _ = writeln!(out, "\nPrevious recommendation (iteration {}):\n{plan_json}", h.plan.iteration);
        let e = &h.eval;
        let _ = write!(
            out,
            "Measured result: accuracy {:.4}, parameters {}, mean latency {:.6} s",
            e.accuracy, e.param_count, e.mean_latency_s
        );
        if let Some(r) = &h.reference {
            let _ = write!(
                out,
                "; accuracy delta {:+.2} points, parameter reduction {:.2}%, speed-up {:.3}x versus the original",
                100.0 * (e.accuracy - r.accuracy),
                100.0 * (1.0 - e.param_count as f64 / r.param_count.max(1) as f64),
                r.mean_latency_s / e.mean_latency_s.max(f64::MIN_POSITIVE)
            );
        }
        let _ = writeln!(out, ".\nAdjust the recommendation to keep accuracy while reducing parameters and latency.");
    }

    out.push_str(
        "\nRespond with one JSON object of this form:\n\
         {\"pruning_recommendations\": [{\"layer\": \"<regex over full layer names>\", \
         \"pruning_type\": \"structured\" or \"head\", \"pruning_ratio\": <number between 0 and 1>, \
         \"justification\": \"<short reason>\"}],\n \
         \"quantization_recommendations\": [{\"layer\": \"all\" or \"<regex>\", \
         \"quantization_type\": \"dynamic\", \"dtype\": \"qint8\" or \"float16\", \
         \"justification\": \"<short reason>\"}]}\n\
         Structured pruning removes output channels of convolution and linear layers; \
         head pruning removes attention heads. Patterns must match complete dotted layer names.\n",
    );
    out
}

/// Rule plan used when the LLM gives nothing usable: prune the two highest-MAC
/// convolution/linear layers by 10% and quantize every linear layer to qint8.
pub fn fallback_plan(report: &ProfilingReport, iteration: usize) -> CompressionPlan {
    let mut plan = CompressionPlan::empty(crate::analysis::PlanSource::FallbackRule, iteration);
    let mut candidates: Vec<_> = report
        .static_profile
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv2d | LayerKind::Linear) && l.mac_count > 0)
        .collect();
    // stable sort keeps definition order among equal MAC counts
    candidates.sort_by_key(|l| std::cmp::Reverse(l.mac_count));
    let total = report.static_profile.total_macs.max(1) as f64;
    for l in candidates.into_iter().take(2) {
        plan.pruning.push(PruningDirective {
            layer_pattern: regex::escape(&l.qualified_name),
            pruning_type: PruningType::Structured,
            pruning_ratio: FALLBACK_RATIO,
            justification: format!("{:.1}% of total MACs", 100.0 * l.mac_count as f64 / total),
        });
    }
    plan.quantization.push(QuantizationDirective {
        layer_selector: LayerSelector::All,
        quantization_type: QuantizationType::Dynamic,
        dtype: QuantDtype::Qint8,
        justification: "dynamic qint8 on linear layers reduces weight memory".into(),
    });
    plan
}

/// Ask the LLM for a plan; any failure or an empty answer yields the rule plan.
pub fn synthesize_plan(
    report: &ProfilingReport,
    history: Option<&AnalysisHistory>,
    llm: &mut LlmGateway,
    iteration: usize,
) -> CompressionPlan {
    let prompt = build_analysis_prompt(report, history);
    match llm.complete_json(&prompt, &plan_schema(), None) {
        Ok((payload, _)) => {
            let plan = plan_from_payload(&payload, PlanSource::Llm, iteration);
            if plan.is_empty() {
                let mut fb = fallback_plan(report, iteration);
                fb.warnings = plan.warnings;
                fb.warn("LLM plan had no usable directives; using the rule plan");
                fb
            } else {
                plan
            }
        }
        Err(e) => {
            let mut fb = fallback_plan(report, iteration);
            fb.warn(format!("LLM analysis failed ({e}); using the rule plan"));
            fb
        }
    }
}

fn matching<'a>(re: &Regex, layers: &'a [LayerDescriptor], kinds: &[LayerKind]) -> Vec<&'a LayerDescriptor> {
    layers
        .iter()
        .filter(|l| kinds.contains(&l.kind) && re.is_match(&l.qualified_name))
        .collect()
}

fn pruning_kinds(t: PruningType) -> &'static [LayerKind] {
    match t {
        PruningType::Structured => &[LayerKind::Conv2d, LayerKind::Linear],
        PruningType::Head => &[LayerKind::Attention],
    }
}

/// Names of the layers a pruning directive targets.
pub fn pruning_targets(d: &PruningDirective, layers: &[LayerDescriptor]) -> Result<Vec<String>> {
    let re = compile_pattern(&d.layer_pattern)?;
    Ok(matching(&re, layers, pruning_kinds(d.pruning_type))
        .into_iter()
        .map(|l| l.qualified_name.clone())
        .collect())
}

/// Names of the float linear layers a quantization directive targets.
pub fn quantization_targets(d: &QuantizationDirective, layers: &[LayerDescriptor]) -> Result<Vec<String>> {
    let re = d.layer_selector.matcher()?;
    Ok(layers
        .iter()
        .filter(|l| l.kind == LayerKind::Linear && l.storage.as_deref() == Some("float"))
        .filter(|l| re.as_ref().is_none_or(|r| r.is_match(&l.qualified_name)))
        .map(|l| l.qualified_name.clone())
        .collect())
}

pub fn validate_plan<T: profagent_nn::Scalar>(plan: &CompressionPlan, handle: &ModelHandle<T>) -> Result<CompressionPlan> {
    validate_plan_against(plan, &enumerate_layers(handle))
}

/// [`synthesize_plan`] followed by [`validate_plan`]. When nothing of the proposed plan
/// applies to `handle`, the rule plan is validated instead. `prune_only` discards
/// quantization directives before validation.
pub fn synthesize_validated_plan<T: profagent_nn::Scalar>(
    report: &ProfilingReport,
    history: Option<&AnalysisHistory>,
    llm: &mut LlmGateway,
    iteration: usize,
    handle: &ModelHandle<T>,
    prune_only: bool,
) -> Result<CompressionPlan> {
    let layers = enumerate_layers(handle);
    let mut plan = synthesize_plan(report, history, llm, iteration);
    if prune_only {
        plan.quantization.clear();
    }
    match validate_plan_against(&plan, &layers) {
        Err(Error::EmptyPlan) if plan.source == PlanSource::Llm => {
            let mut fb = fallback_plan(report, iteration);
            if prune_only {
                fb.quantization.clear();
            }
            fb.warnings = plan.warnings;
            fb.warn("no directive of the proposed plan applies to this model; using the rule plan");
            validate_plan_against(&fb, &layers)
        }
        other => other,
    }
}

/// Drop directives that match nothing (or head directives that match no attention block)
/// and flag overlapping directives; the later directive wins on overlap.
pub fn validate_plan_against(plan: &CompressionPlan, layers: &[LayerDescriptor]) -> Result<CompressionPlan> {
    let mut out = CompressionPlan { pruning: Vec::new(), quantization: Vec::new(), ..plan.clone() };
    let mut claimed: Vec<(String, BTreeSet<String>)> = Vec::new();
    for d in &plan.pruning {
        let re = match compile_pattern(&d.layer_pattern) {
            Ok(re) => re,
            Err(e) => {
                out.warn(format!("pruning directive dropped: {e}"));
                continue;
            }
        };
        let hits = matching(&re, layers, pruning_kinds(d.pruning_type));
        if hits.is_empty() {
            let any = layers.iter().any(|l| re.is_match(&l.qualified_name));
            if d.pruning_type == PruningType::Head && any {
                out.warn(format!("head pruning directive `{}` dropped: it matches no attention layer", d.layer_pattern));
            } else {
                out.warn(format!("pruning directive `{}` dropped: it matches no prunable layer", d.layer_pattern));
            }
            continue;
        }
        let mut d = d.clone();
        let (r, clamped) = clamp_ratio(d.pruning_ratio);
        if clamped {
            out.warn(format!("pruning ratio {} for `{}` clamped to {r}", d.pruning_ratio, d.layer_pattern));
            d.pruning_ratio = r;
        }
        let names: BTreeSet<String> = hits.iter().map(|l| l.qualified_name.clone()).collect();
        for (prev, prev_names) in &claimed {
            let shared: Vec<_> = prev_names.intersection(&names).collect();
            if let Some(first) = shared.first() {
                out.warn(format!(
                    "directives `{prev}` and `{}` overlap on {} layer(s) starting at `{first}`; the later one applies",
                    d.layer_pattern,
                    shared.len()
                ));
            }
        }
        claimed.push((d.layer_pattern.clone(), names));
        out.pruning.push(d);
    }
    for d in &plan.quantization {
        match quantization_targets(d, layers) {
            Ok(t) if !t.is_empty() => out.quantization.push(d.clone()),
            Ok(_) => out.warn(format!(
                "quantization directive `{}` dropped: it matches no float linear layer",
                d.layer_selector.as_str()
            )),
            Err(e) => out.warn(format!("quantization directive dropped: {e}")),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyPlan);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn clamp_and_flag() {
        let p = plan_from_payload(
            &json!({"pruning_recommendations": [{"layer": "a", "pruning_type": "structured", "pruning_ratio": 1.7}],
                    "quantization_recommendations": []}),
            PlanSource::Llm,
            0,
        );
        assert_eq!(p.pruning[0].pruning_ratio, 0.95);
        assert!(p.warnings.iter().any(|w| w.contains("clamped")));
    }

    #[test]
    fn unknown_dtype_dropped() {
        let p = plan_from_payload(
            &json!({"pruning_recommendations": [],
                    "quantization_recommendations": [{"layer": "all", "quantization_type": "dynamic", "dtype": "int4"}]}),
            PlanSource::Llm,
            0,
        );
        assert!(p.quantization.is_empty());
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn plan_file_round_trip() {
        let mut p = CompressionPlan::quantize_all(QuantDtype::Float16, PlanSource::UserCli);
        p.pruning.push(PruningDirective {
            layer_pattern: r"encoder\.stages\d+\.layer\.\d+\.convolution".into(),
            pruning_type: PruningType::Structured,
            pruning_ratio: 0.2,
            justification: "j".into(),
        });
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["quantization_recommendations"][0]["layer"], "all");
        assert_eq!(v["_meta"]["source"], "user_cli");
        let back: CompressionPlan = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn anchored_patterns() {
        let re = compile_pattern("features\\.0").unwrap();
        assert!(re.is_match("features.0"));
        assert!(!re.is_match("features.01"));
        assert!(!re.is_match("x.features.0"));
        let alt = compile_pattern("a|b").unwrap();
        assert!(alt.is_match("b") && !alt.is_match("ab"));
    }
}
