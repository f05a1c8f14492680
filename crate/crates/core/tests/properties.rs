use std::collections::BTreeSet;

use profagent::analysis::{plan_from_payload, validate_plan, PlanSource};
use profagent::compression::{
    build_dependency_graph, lowest_indices, member_width, prune_groups, removal_count, GroupTarget, Importance,
};
use profagent::evaluation::subset_indices;
use profagent::iterative::{better, Candidate};
use profagent::zoo::{acquire_model, fixtures, load_handle, probe_input, save_handle, Device, InputSpec, ModelHandle};
use proptest::prelude::*;
use serde_json::{json, Value};

fn fixture(name: &str) -> ModelHandle<f32> {
    acquire_model(name, Device::Cpu).unwrap()
}

fn spec_of(h: &ModelHandle<f32>) -> InputSpec {
    let s = h.input_shape();
    InputSpec::image(s[0], s[1], s[2])
}

fn importance() -> impl Strategy<Value = Importance> {
    prop_oneof![Just(Importance::L1), Just(Importance::L2), any::<u64>().prop_map(|seed| Importance::Random { seed })]
}

fn json_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        any::<f64>().prop_map(Value::from),
        any::<i64>().prop_map(Value::from),
        "[a-z_.*\\\\()\\[\\]0-9]{0,12}".prop_map(Value::from),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            prop::collection::btree_map(
                prop_oneof![
                    Just("layer".to_string()),
                    Just("pruning_type".to_string()),
                    Just("pruning_ratio".to_string()),
                    Just("quantization_type".to_string()),
                    Just("dtype".to_string()),
                    "[a-z]{1,6}"
                ],
                inner,
                0..5
            )
            .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn directive_payload() -> impl Strategy<Value = Value> {
    let pattern = prop_oneof![
        Just(r"features\.\d+"),
        Just(r"features\.0"),
        Just("classifier"),
        Just(r"encoder\.stages\d+\.layer\.\d+\.convolution"),
        Just(r"vit\.encoder\.layer\.\d+\.attention"),
        Just("nothing.here"),
        Just("(unclosed"),
        Just(".*"),
    ];
    let pruning = (pattern.clone(), prop_oneof![Just("structured"), Just("head"), Just("bogus")], -0.5f64..1.5)
        .prop_map(|(l, t, r)| json!({"layer": l, "pruning_type": t, "pruning_ratio": r, "justification": "x"}));
    let quant = (prop_oneof![Just("all"), pattern], prop_oneof![Just("qint8"), Just("float16"), Just("int4")])
        .prop_map(|(l, d)| json!({"layer": l, "quantization_type": "dynamic", "dtype": d}));
    (prop::collection::vec(pruning, 0..4), prop::collection::vec(quant, 0..3))
        .prop_map(|(p, q)| json!({"pruning_recommendations": p, "quantization_recommendations": q}))
}

fn candidate() -> impl Strategy<Value = Candidate> {
    (1usize..6, 0u64..4, 0u8..4).prop_flat_map(|(n, params, lat)| {
        (0..=n).prop_map(move |correct| Candidate {
            correct,
            n_samples: n,
            params,
            latency_s: lat as f64 * 0.5,
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pruned_groups_stay_consistent(
        name in prop::sample::select(vec![fixtures::TINY_CNN, fixtures::TINY_RESNET, fixtures::TINY_VIT, fixtures::TINY_RESIDUAL]),
        ratio in 0.01f64..0.95,
        imp in importance(),
    ) {
        let h = fixture(name);
        let graph = build_dependency_graph(&h, &spec_of(&h)).unwrap();
        let targets: Vec<GroupTarget> = graph
            .prunable_groups()
            .map(|g| GroupTarget { group_id: g.group_id, ratio, directive: "p".into() })
            .collect();
        let mut pruned = h.clone();
        let summary = prune_groups(&mut pruned, &graph, &targets, imp).unwrap();
        prop_assert_eq!(summary.groups.len(), targets.len());
        for change in &summary.groups {
            let g = graph.group(change.group_id);
            prop_assert_eq!(change.width_before, g.width);
            prop_assert_eq!(change.width_after, g.width - removal_count(g.width, ratio));
            prop_assert!(change.removed.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(change.removed.iter().all(|&i| i < g.width));
            for m in &g.members {
                prop_assert_eq!(member_width(&pruned, m).unwrap(), change.width_after, "{}", m.layer);
            }
        }
        prop_assert!(summary.params_after <= summary.params_before);
        prop_assert_eq!(summary.params_after, pruned.param_count());
        let x = probe_input::<f32>(&h.input_shape(), 5);
        let (y, y0) = (pruned.network.forward(&x).unwrap(), h.network.forward(&x).unwrap());
        prop_assert_eq!(y.shape(), y0.shape());
    }

    #[test]
    fn removal_count_matches_integer_floor(width in 1usize..4096, pct in 0u32..=100) {
        // pct/100 is exact in rationals; floor(pct·w/100) in integers is the reference
        let want = ((pct as usize * width) / 100).min(width - 1);
        prop_assert_eq!(removal_count(width, pct as f64 / 100.0), want);
    }

    #[test]
    fn lowest_indices_matches_stable_sort(scores in prop::collection::vec(0u8..6, 0..40), n in 0usize..45) {
        let as_f: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let mut order: Vec<(u8, usize)> = scores.iter().copied().zip(0..).collect();
        order.sort();
        let mut want: Vec<usize> = order.into_iter().take(n).map(|(_, i)| i).collect();
        want.sort();
        prop_assert_eq!(lowest_indices(&as_f, n), want);
    }

    #[test]
    fn payload_parsing_never_panics(v in json_value(), wrap in any::<bool>()) {
        let payload = if wrap { json!({"pruning_recommendations": v.clone(), "quantization_recommendations": v}) } else { v };
        let plan = plan_from_payload(&payload, PlanSource::Llm, 0);
        for d in &plan.pruning {
            prop_assert!((0.01..=0.95).contains(&d.pruning_ratio));
        }
    }

    #[test]
    fn validation_is_idempotent(payload in directive_payload(), name in prop::sample::select(vec![fixtures::TINY_CNN, fixtures::TINY_VIT, fixtures::TINY_RESNET])) {
        let h = fixture(name);
        let plan = plan_from_payload(&payload, PlanSource::Llm, 0);
        if let Ok(once) = validate_plan(&plan, &h) {
            let twice = validate_plan(&once, &h).unwrap();
            prop_assert_eq!(&twice.pruning, &once.pruning);
            prop_assert_eq!(&twice.quantization, &once.quantization);
        }
    }

    #[test]
    fn subsets_are_sorted_distinct_and_pure(len in 1usize..500, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n = 1 + ((len - 1) as f64 * frac) as usize;
        let a = subset_indices("some-dataset", len, n, seed).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.iter().all(|&i| i < len));
        prop_assert_eq!(&a, &subset_indices("some-dataset", len, n, seed).unwrap());
    }

    #[test]
    fn better_is_a_strict_order(a in candidate(), b in candidate(), c in candidate()) {
        prop_assert!(!better(&a, &a));
        prop_assert!(!(better(&a, &b) && better(&b, &a)));
        if better(&a, &b) && better(&b, &c) {
            prop_assert!(better(&a, &c));
        }
    }
}

#[test]
fn save_load_roundtrip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for name in fixtures::NAMES {
        let h = fixture(name);
        let path = dir.path().join(name);
        save_handle(&h, &path).unwrap();
        let back: ModelHandle<f32> = load_handle(&path).unwrap();
        assert_eq!(back.network, h.network, "{name}");
        assert_eq!(back.labels, h.labels);
        let x = probe_input::<f32>(&h.input_shape(), 1);
        assert_eq!(back.network.forward(&x).unwrap(), h.network.forward(&x).unwrap());
    }
    let names: BTreeSet<&str> = fixtures::NAMES.iter().copied().collect();
    assert_eq!(names.len(), fixtures::NAMES.len());
}
