use std::collections::BTreeMap;

use activelab_core::chem::{self, AssayInput};
use activelab_core::engine::{disagreement, select_mode, Mode};
use activelab_core::ensemble::shannon_entropy;
use activelab_core::exprlang::{evaluate, ParsedHypothesis};
use activelab_core::fitkit::confidence_from_predictions;
use activelab_core::grn::{self, Edge, Intervention, SignedGraph};
use activelab_core::metrics::{budget_to_target, graph_metrics, rmsle};
use activelab_core::oracle::{Difficulty, OracleError};
use activelab_core::seeding;
use proptest::prelude::*;
use rand::Rng;

fn leaf() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("x".to_string()),
        Just("y".to_string()),
        (0..4u8).prop_map(|i| format!("C{i}")),
        (1..9u8).prop_map(|n| n.to_string()),
    ]
}

fn expr() -> impl Strategy<Value = String> {
    leaf().prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} + {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} * {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} - {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} / {b})")),
            inner.clone().prop_map(|a| format!("exp({a})")),
            inner.prop_map(|a| format!("({a})**2")),
        ]
    })
}

fn skeleton(text: &str) -> String {
    ParsedHypothesis::parse(text).unwrap().skeleton().to_string()
}

fn signed_graph() -> impl Strategy<Value = SignedGraph> {
    let pairs = grn::admissible_pairs();
    proptest::collection::vec(prop_oneof![Just(0i8), Just(1), Just(-1)], pairs.len()).prop_map(move |signs| {
        let edges: Vec<Edge> = pairs
            .iter()
            .zip(signs)
            .filter(|(_, s)| *s != 0)
            .map(|(&(a, b), s)| Edge::new(a, b, s))
            .collect();
        SignedGraph::from_edges(&edges).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn skeleton_ignores_operand_order(a in expr(), b in expr()) {
        prop_assert_eq!(skeleton(&format!("{a} + {b}")), skeleton(&format!("{b} + {a}")));
        prop_assert_eq!(skeleton(&format!("{a} * {b}")), skeleton(&format!("{b} * {a}")));
    }

    #[test]
    fn skeleton_ignores_constant_names(e in expr(), shift in 4..20u8) {
        let renamed = (0..4u8).rev().fold(e.clone(), |t, i| t.replace(&format!("C{i}"), &format!("C{}", i + shift)));
        prop_assert_eq!(skeleton(&e), skeleton(&renamed));
    }

    #[test]
    fn canonical_text_reparses_to_the_same_skeleton(e in expr()) {
        let h = ParsedHypothesis::parse(&e).unwrap();
        let again = ParsedHypothesis::parse(&h.canonical_text()).unwrap();
        prop_assert_eq!(h.skeleton(), again.skeleton());
    }

    #[test]
    fn compiled_and_interpreted_evaluation_agree(e in expr(), x in 0.1f64..5.0, y in 0.1f64..5.0, c in proptest::array::uniform4(0.1f64..3.0)) {
        let h = ParsedHypothesis::parse(&e).unwrap();
        let names = vec!["x".to_string(), "y".to_string()];
        let constants: BTreeMap<String, f64> = (0..4).map(|i| (format!("C{i}"), c[i])).collect();
        let vars = BTreeMap::from([("x".to_string(), x), ("y".to_string(), y)]);
        let interpreted = evaluate(&h, &vars, &constants).unwrap();
        let compiled = h.compile(&names).unwrap();
        let ordered: Vec<f64> = h.free_constants.iter().map(|n| constants[n]).collect();
        let fast = compiled.eval(&[x, y], &ordered);
        if interpreted.is_finite() {
            prop_assert!((fast - interpreted).abs() <= 1e-9 * interpreted.abs().max(1.0), "{} vs {}", fast, interpreted);
        } else {
            prop_assert!(!fast.is_finite());
        }
    }

    #[test]
    fn disagreement_is_scale_free(p in proptest::collection::vec(1e-3f64..1e3, 2..10), c in 1e-3f64..1e3) {
        let scaled: Vec<f64> = p.iter().map(|v| v * c).collect();
        prop_assert!((disagreement(&p) - disagreement(&scaled)).abs() < 1e-9);
    }

    #[test]
    fn entropy_is_bounded_and_order_free(mut sizes in proptest::collection::vec(1usize..30, 1..12)) {
        let h = shannon_entropy(&sizes).unwrap();
        prop_assert!(h >= 0.0 && h <= (sizes.len() as f64).log2() + 1e-12);
        sizes.reverse();
        prop_assert!((shannon_entropy(&sizes).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn confidence_stays_in_unit_interval(rows in proptest::collection::vec(proptest::collection::vec(-10f64..10.0, 3), 1..8)) {
        let c = confidence_from_predictions(&rows);
        prop_assert!((0.0..=1.0).contains(&c));
        let same = vec![rows[0].iter().map(|v| v.abs() + 1.0).collect::<Vec<_>>(); 4];
        prop_assert_eq!(confidence_from_predictions(&same), 1.0);
    }

    #[test]
    fn mode_is_a_threshold_on_confidence(c in 0f64..1.0, tau in 0f64..1.0) {
        prop_assert_eq!(select_mode(c, tau) == Mode::Disambiguate, c < tau);
    }

    #[test]
    fn rmsle_is_a_symmetric_distance(p in proptest::collection::vec(0f64..1e4, 1..20), seed in any::<u64>()) {
        let mut rng = seeding::rng_for(seed, "prop/rmsle");
        let y: Vec<f64> = p.iter().map(|_| rng.random_range(0.0..1e4)).collect();
        let d = rmsle(&p, &y).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, rmsle(&y, &p).unwrap());
        prop_assert_eq!(rmsle(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn graph_metrics_are_bounded(a in signed_graph(), b in signed_graph()) {
        let s = graph_metrics(&a, &b, "activation_chain");
        for v in [s.precision, s.recall, s.f1, s.sign_accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(s.exact_graph, a == b);
        let own = graph_metrics(&a, &a, "activation_chain");
        prop_assert!(own.exact_graph && own.f1 == 1.0 && own.sign_accuracy == 1.0);
    }

    #[test]
    fn graphs_survive_the_wire_format(g in signed_graph()) {
        let wire: Vec<String> = g.clone().into();
        prop_assert_eq!(SignedGraph::try_from(wire).unwrap(), g);
    }

    #[test]
    fn budget_to_target_never_exceeds_the_first_hit(scores in proptest::collection::vec(0f64..1.0, 1..12)) {
        let curve: Vec<(f64, f64)> = scores.iter().enumerate().map(|(i, s)| ((i + 1) as f64 * 10.0, *s)).collect();
        let first = curve.iter().find(|(_, s)| *s <= 0.3).map(|(b, _)| *b);
        match budget_to_target(&curve, 0.3, true) {
            Some(b) => {
                let f = first.unwrap();
                prop_assert!(b <= f && b >= f - 10.0);
            }
            None => prop_assert!(first.is_none()),
        }
    }

    #[test]
    fn chem_rates_are_non_negative_and_ignore_irrelevant_inputs(family in 0usize..57, seed in 0u64..1000, u in proptest::array::uniform7(0f64..1.0), v in proptest::array::uniform7(0f64..1.0)) {
        let d = &chem::catalog()[family];
        let spec = chem::instantiate(&d.id, d.tier, seed).unwrap();
        let bounds = chem::assay_bounds();
        let x: Vec<f64> = bounds.iter().zip(u).map(|(b, t)| b.lo + t * (b.hi - b.lo)).collect();
        let r = spec.r0(&AssayInput::from_slice(&x));
        prop_assert!(r >= 0.0 && r.is_finite());
        let moved: Vec<f64> = bounds
            .iter()
            .zip(x.iter().zip(v))
            .map(|(b, (xi, t))| if spec.relevant_variables.contains(&b.name) { *xi } else { b.lo + t * (b.hi - b.lo) })
            .collect();
        prop_assert_eq!(spec.r0(&AssayInput::from_slice(&moved)).to_bits(), r.to_bits());
    }

    #[test]
    fn chem_rate_is_linear_in_enzyme(family in 0usize..57, seed in 0u64..1000, u in proptest::array::uniform7(0f64..1.0), k in 0.1f64..1.0) {
        let d = &chem::catalog()[family];
        let spec = chem::instantiate(&d.id, d.tier, seed).unwrap();
        let bounds = chem::assay_bounds();
        let mut x: Vec<f64> = bounds.iter().zip(u).map(|(b, t)| b.lo + t * (b.hi - b.lo)).collect();
        x[4] = 10.0;
        let full = spec.r0(&AssayInput::from_slice(&x));
        x[4] = 10.0 * k;
        let part = spec.r0(&AssayInput::from_slice(&x));
        prop_assert!((part - k * full).abs() <= 1e-12 * full.abs().max(1e-300));
    }

    #[test]
    fn budget_is_never_exceeded(budget in 1usize..30, attempts in 0usize..60, seed in any::<u64>()) {
        let m = activelab_core::oracle::TaskManifest {
            benchmark: activelab_core::oracle::BenchmarkId::Chem,
            task_id: "michaelis_menten".into(),
            family: "michaelis_menten".into(),
            difficulty: Difficulty::Easy,
            variant: 0,
            seed,
            budget,
            noise_sigma: 0.05,
            plugin: None,
        };
        let activelab_core::oracle::OpenedTask::Chem(mut o) = activelab_core::oracle::open_task(&m).unwrap() else { unreachable!() };
        let x = AssayInput::from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 298.0, 7.0]);
        for i in 0..attempts {
            let r = o.query(&x);
            prop_assert_eq!(r.is_ok(), i < budget);
            if i >= budget {
                prop_assert_eq!(r.unwrap_err(), OracleError::BudgetExhausted);
            }
        }
        prop_assert_eq!(o.query_log().len(), attempts.min(budget));
    }

    #[test]
    fn canonical_interventions_are_idempotent(i in 0usize..200) {
        let menu = grn::admissible_interventions();
        let iv = &menu[i % menu.len()];
        prop_assert!(iv.validate().is_ok());
        prop_assert_eq!(iv.canonical().canonical(), iv.canonical());
        let reversed = Intervention { actions: iv.actions.iter().rev().cloned().collect() };
        prop_assert_eq!(reversed.canonical(), iv.canonical());
    }

    #[test]
    fn labelled_streams_are_reproducible(seed in any::<u64>()) {
        let draw = |label: &str| -> Vec<u64> {
            let mut r = seeding::rng_for(seed, label);
            (0..4).map(|_| r.random()).collect()
        };
        prop_assert_eq!(draw("a"), draw("a"));
        prop_assert_ne!(draw("a"), draw("b"));
    }
}
