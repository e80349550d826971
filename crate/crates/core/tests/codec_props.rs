//! Property tests for the condition codec: edit locality, norm
//! preservation, annealed-noise moment matching, and metric bounds.

use proptest::prelude::*;
use weakguide_core::codec::{cads_perturb, CadsParams, EditMode, PromptSpec};
use weakguide_core::metrics::{avg_delta, discrepancy, energy_distance, RatioReport};
use weakguide_core::presets;
use weakguide_core::seed::derive_rng;
use weakguide_core::stats::mean_std;

const CONTEXTS: [&str; 6] = ["ceo", "nurse", "teacher", "pilot", "librarian", "doctor"];
const ATTRIBUTES: [&str; 4] = ["female", "male", "north", "south"];
const FILLERS: [&str; 5] = ["a", "an", "photo", "of", "portrait"];

fn prompt_strategy() -> impl Strategy<Value = PromptSpec> {
    (
        0..CONTEXTS.len(),
        proptest::option::of(0..ATTRIBUTES.len()),
        proptest::collection::vec(0..FILLERS.len(), 0..4),
    )
        .prop_map(|(c, q, extras)| {
            let mut p = match q {
                Some(q) => PromptSpec::qualified(CONTEXTS[c], ATTRIBUTES[q]),
                None => PromptSpec::context(CONTEXTS[c]),
            };
            p.extra_tokens = extras.into_iter().map(|i| FILLERS[i].to_string()).collect();
            p
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn masked_edits_preserve_prefix_rows_and_norms(
        prompt in prompt_strategy(),
        attr in 0..ATTRIBUTES.len(),
    ) {
        let codec = presets::default_codec();
        let c = codec.encode(&prompt).unwrap();
        let a = codec.attribute_direction(ATTRIBUTES[attr]).unwrap();
        let edited = codec.apply_weak(&c, &a, EditMode::EosMasked).unwrap();
        prop_assert_eq!(edited.eos_index(), c.eos_index());
        for i in 0..c.eos_index() {
            prop_assert_eq!(edited.row(i), c.row(i), "prefix row {} changed", i);
        }
        for i in 0..c.positions() {
            let drift = (edited.row_norm(i) - c.row_norm(i)).abs();
            prop_assert!(drift < 1e-9, "row {} norm drift {}", i, drift);
        }
    }

    #[test]
    fn every_position_edits_preserve_norms_too(
        prompt in prompt_strategy(),
        attr in 0..ATTRIBUTES.len(),
    ) {
        let codec = presets::default_codec();
        let c = codec.encode(&prompt).unwrap();
        let a = codec.attribute_direction(ATTRIBUTES[attr]).unwrap();
        let edited = codec.apply_weak(&c, &a, EditMode::EveryPosition).unwrap();
        for i in 0..c.positions() {
            let drift = (edited.row_norm(i) - c.row_norm(i)).abs();
            prop_assert!(drift < 1e-9, "row {} norm drift {}", i, drift);
        }
    }

    #[test]
    fn encode_is_pure(prompt in prompt_strategy()) {
        let codec = presets::default_codec();
        let a = codec.encode(&prompt).unwrap();
        let b = codec.encode(&prompt).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(codec.readout(&a), codec.readout(&b));
        prop_assert_eq!(codec.eos_mask(&a).0, codec.eos_mask(&b).0);
    }

    #[test]
    fn annealing_coefficient_is_a_valid_ramp(
        s in 0.0f64..2.0,
        tau1 in 0.0f64..0.89,
        width in 0.01f64..0.1,
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let params = CadsParams::new(s, tau1, (tau1 + width).min(1.0)).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let g_lo = params.gamma(lo);
        let g_hi = params.gamma(hi);
        prop_assert!((0.0..=1.0).contains(&g_lo));
        prop_assert!((0.0..=1.0).contains(&g_hi));
        // non-increasing in time
        prop_assert!(g_hi <= g_lo + 1e-12);
    }

    #[test]
    fn cads_output_matches_input_moments(
        prompt in prompt_strategy(),
        t in 0.0f64..1.0,
        s in 0.05f64..1.0,
        case in 0u64..1000,
    ) {
        let codec = presets::default_codec();
        let c = codec.encode(&prompt).unwrap();
        let params = CadsParams::new(s, 0.6, 0.9).unwrap();
        let mut rng = derive_rng(7000, &[case]);
        let out = cads_perturb(&c, t, &params, &mut rng);
        let (mc, sc) = mean_std(c.entries());
        let (mo, so) = mean_std(out.entries());
        prop_assert!((mo - mc).abs() < 1e-6, "mean drift {}", (mo - mc).abs());
        prop_assert!((so - sc).abs() < 1e-6, "std drift {}", (so - sc).abs());
        // the quiet region is bit-exact
        if t <= 0.6 {
            prop_assert_eq!(out, c);
        }
    }

    #[test]
    fn avg_delta_stays_in_range(counts in proptest::collection::vec((0usize..500, 0usize..500), 1..6)) {
        let reports: Vec<RatioReport> = counts
            .into_iter()
            .filter(|(a, b)| a + b > 0)
            .map(|(a, b)| {
                RatioReport::from_counts(
                    "ctx",
                    vec!["x".into(), "y".into()],
                    vec![a, b],
                )
                .unwrap()
            })
            .collect();
        prop_assume!(!reports.is_empty());
        let d = avg_delta(&reports).unwrap();
        prop_assert!((0.0..=0.5).contains(&d));
    }

    #[test]
    fn discrepancy_is_permutation_invariant(
        counts in proptest::collection::vec(0usize..200, 2..6),
        seed in 0u64..1000,
    ) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let labels: Vec<String> = (0..counts.len()).map(|i| format!("a{i}")).collect();
        let base = RatioReport::from_counts("ctx", labels.clone(), counts.clone()).unwrap();
        // rotate by a pseudo-random offset
        let k = (seed as usize) % counts.len();
        let rot_labels: Vec<String> = labels[k..].iter().chain(&labels[..k]).cloned().collect();
        let rot_counts: Vec<usize> = counts[k..].iter().chain(&counts[..k]).copied().collect();
        let rotated = RatioReport::from_counts("ctx", rot_labels, rot_counts).unwrap();
        let a = discrepancy(&base).unwrap().d;
        let b = discrepancy(&rotated).unwrap().d;
        prop_assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn energy_distance_is_nonnegative_and_zero_on_self(
        points in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..20),
    ) {
        let a: Vec<Vec<f64>> = points.iter().map(|(x, y)| vec![*x, *y]).collect();
        let d = energy_distance(&a, &a).unwrap();
        prop_assert!(d.abs() < 1e-10);
        let shifted: Vec<Vec<f64>> = a.iter().map(|p| vec![p[0] + 1.0, p[1]]).collect();
        prop_assert!(energy_distance(&a, &shifted).unwrap() >= 0.0);
    }
}
