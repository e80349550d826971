//! Analytic-score verification against independent numerical oracles:
//! central finite differences of the log density, quadrature of the
//! one-dimensional density, and the terminal-Gaussianity bound.

use weakguide_core::codec::PromptSpec;
use weakguide_core::gaussian::SpdMatrix;
use weakguide_core::presets;
use weakguide_core::seed::derive_rng;
use weakguide_core::world::{
    AttributeFamily, ComponentSpec, ContextSpec, MixtureParams, WorldSpec,
};

use rand::Rng;

/// Central finite differences of the diffused log density.
fn fd_score(mixture: &MixtureParams, z: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for k in 0..z.len() {
        let mut plus = z.to_vec();
        plus[k] += h;
        let mut minus = z.to_vec();
        minus[k] -= h;
        let fp = mixture.log_density(&plus).unwrap();
        let fm = mixture.log_density(&minus).unwrap();
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

#[test]
fn analytic_score_matches_finite_differences_everywhere() {
    let codec = presets::default_codec();
    let world = presets::default_world(&codec);
    let schedule = presets::default_schedule();
    let mut rng = derive_rng(101, &[]);

    let contexts: Vec<&str> = world.contexts().iter().map(|c| c.id.as_str()).collect();
    let mut worst: f64 = 0.0;
    for probe in 0..1000 {
        let ctx = contexts[rng.random_range(0..contexts.len())];
        let qualifier = if world.context(ctx).unwrap().is_object() {
            None
        } else if rng.random::<f64>() < 0.3 {
            Some(if rng.random::<f64>() < 0.5 {
                "female"
            } else {
                "male"
            })
        } else {
            None
        };
        let prompt = match qualifier {
            Some(q) => PromptSpec::qualified(ctx, q),
            None => PromptSpec::context(ctx),
        };
        let c = codec.encode(&prompt).unwrap();
        let t = rng.random_range(1..=schedule.steps());
        let abar = schedule.abar(t).unwrap();
        let z = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];

        let analytic = world.score(&codec, &z, abar, &c, ctx).unwrap();
        let diffused = world
            .mixture_for(&codec, &c, ctx)
            .unwrap()
            .diffuse(abar)
            .unwrap();
        let numeric = fd_score(&diffused, &z, 1e-5);

        let num: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(den > 1e-6, "probe {probe}: degenerate score magnitude");
        let rel = num / den;
        worst = worst.max(rel);
        assert!(
            rel < 1e-4,
            "probe {probe} ({ctx}, t={t}): relative error {rel:.3e}"
        );
    }
    // the oracle agreement is usually far tighter than the gate
    assert!(worst < 1e-5, "worst relative error {worst:.3e}");
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    // quadrature oracle on a 1-d world variant
    let attrs = ["left".to_string(), "right".to_string()];
    let codec = weakguide_core::codec::Codec::new(
        weakguide_core::codec::CodecParams::default(),
        &attrs,
        &["thing".to_string()],
        &[],
    )
    .unwrap();
    let iso = |s: f64| SpdMatrix::isotropic(1, s);
    let world = WorldSpec::new(
        1,
        10.0,
        vec![AttributeFamily {
            name: "side".into(),
            members: vec!["left".into(), "right".into()],
        }],
        vec![ContextSpec {
            id: "thing".into(),
            components: vec![
                ComponentSpec {
                    parts: vec!["left".into()],
                    prior: 0.25,
                    mean: vec![-2.0],
                    cov: iso(0.5),
                },
                ComponentSpec {
                    parts: vec!["right".into()],
                    prior: 0.75,
                    mean: vec![2.0],
                    cov: iso(0.7),
                },
            ],
            object: None,
        }],
        &codec,
    )
    .unwrap();

    let c = codec.encode(&PromptSpec::context("thing")).unwrap();
    for abar in [1.0, 0.5, 0.05] {
        let mixture = world
            .mixture_for(&codec, &c, "thing")
            .unwrap()
            .diffuse(abar)
            .unwrap();
        // Simpson's rule over a range that holds all the mass
        let (lo, hi, steps) = (-12.0f64, 12.0f64, 24000usize);
        let h = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for i in 0..=steps {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            total += w * mixture.log_density(&[x]).unwrap().exp();
        }
        total *= h / 3.0;
        assert!((total - 1.0).abs() < 1e-6, "abar {abar}: integral {total}");
    }
}

#[test]
fn terminal_mixture_is_close_to_standard_normal() {
    let codec = presets::default_codec();
    let world = presets::default_world(&codec);
    let schedule = presets::default_schedule();
    let abar_n = schedule.abar(schedule.steps()).unwrap();

    let c = codec.encode(&PromptSpec::context("ceo")).unwrap();
    let terminal = world
        .mixture_for(&codec, &c, "ceo")
        .unwrap()
        .diffuse(abar_n)
        .unwrap();
    let unit = MixtureParams {
        weights: vec![1.0],
        means: vec![vec![0.0, 0.0]],
        covs: vec![SpdMatrix::isotropic(2, 1.0)],
        labels: vec!["reference".into()],
    };

    // Monte Carlo KL(p_N || N(0, I))
    let mut rng = derive_rng(102, &[]);
    let n = 50_000;
    let mut kl = 0.0;
    for _ in 0..n {
        let (x, _) = terminal.sample(&mut rng).unwrap();
        kl += terminal.log_density(&x).unwrap() - unit.log_density(&x).unwrap();
    }
    kl /= n as f64;
    assert!(kl.abs() < 1e-3, "terminal KL estimate {kl}");
}
