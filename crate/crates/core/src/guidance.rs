//! Per-step condition selection for every sampling scheme under study.
//!
//! A [`GuidanceSpec`] names a scheme; [`make_driver`] resolves it against a
//! prompt into a per-chain [`GuidanceDriver`] holding the precomputed
//! embeddings and any attribute targets drawn for the chain. During
//! sampling the driver answers, for each reverse step, which conditional
//! embedding to use, which unconditional embedding to contrast against,
//! and at what guidance scale.
//!
//! Step indexing: reverse sampling visits `t = N, N-1, ..., 1`, so the
//! "first" steps are the high-noise ones. Schedules that split the chain
//! (swapping, exclusive-then-alternate steering) count from there.

use alloc::borrow::Cow;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::codec::{cads_perturb, CadsParams, Codec, CondEmbedding, EditMode, PromptSpec};
use crate::{Error, Result};

/// A guidance scheme and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum GuidanceSpec {
    /// Conditional sampling only (guidance scale 0).
    Vanilla,
    /// Classifier-free guidance at scale `alpha`.
    Cfg { alpha: f64 },
    /// Annealed Gaussian noise on the conditional embedding; the
    /// unconditional side stays clean.
    Cads { alpha: f64, params: CadsParams },
    /// Attribute-qualified prompt for the first `ceil(fraction * N)`
    /// reverse steps, the plain prompt afterwards.
    Swap {
        alpha: f64,
        fraction: f64,
        attribute: String,
    },
    /// The attribute appended as the last prefix token, used at every step.
    PromptAppend { alpha: f64, attribute: String },
    /// Attenuated attribute steering: per chain, one attribute is drawn
    /// uniformly from each family, their directions are added under the
    /// edit mode, and the edited embedding is used exclusively for the
    /// first `ceil(tau * N)` steps, then alternated with the original.
    Weak {
        alpha: f64,
        tau: f64,
        families: Vec<Vec<String>>,
        mode: EditMode,
    },
}

impl GuidanceSpec {
    /// Guidance scale of the scheme.
    pub fn alpha(&self) -> f64 {
        match self {
            GuidanceSpec::Vanilla => 0.0,
            GuidanceSpec::Cfg { alpha }
            | GuidanceSpec::Cads { alpha, .. }
            | GuidanceSpec::Swap { alpha, .. }
            | GuidanceSpec::PromptAppend { alpha, .. }
            | GuidanceSpec::Weak { alpha, .. } => *alpha,
        }
    }

    /// Short stable name for logs and reports.
    pub fn name(&self) -> &'static str {
        match self {
            GuidanceSpec::Vanilla => "vanilla",
            GuidanceSpec::Cfg { .. } => "cfg",
            GuidanceSpec::Cads { .. } => "cads",
            GuidanceSpec::Swap { .. } => "swap",
            GuidanceSpec::PromptAppend { .. } => "prompt_append",
            GuidanceSpec::Weak { mode, .. } => match mode {
                EditMode::EosMasked => "weak",
                EditMode::EveryPosition => "every_position",
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha().is_finite() && self.alpha() >= 0.0) {
            return Err(Error::InvalidParameter(
                "guidance scale must be >= 0".into(),
            ));
        }
        match self {
            GuidanceSpec::Swap { fraction, .. } => {
                if !(0.0..=1.0).contains(fraction) {
                    return Err(Error::InvalidParameter(
                        "swap fraction must be in [0, 1]".into(),
                    ));
                }
            }
            GuidanceSpec::Weak { tau, families, .. } => {
                if !(0.0..=1.0).contains(tau) {
                    return Err(Error::InvalidParameter("tau must be in [0, 1]".into()));
                }
                if families.is_empty() || families.iter().any(Vec::is_empty) {
                    return Err(Error::InvalidParameter(
                        "weak steering needs at least one non-empty attribute family".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Policy {
    /// base embedding at every step
    Base,
    /// steered embedding at every step
    Steered,
    /// base embedding perturbed per step at the step's normalized time
    Annealed(CadsParams),
    /// steered for the first ceil(fraction * N) steps, base afterwards
    SwapThenBase { fraction: f64 },
    /// steered for the first ceil(tau * N) steps, then alternating
    /// steered/base starting with steered
    ExclusiveThenAlternate { tau: f64 },
}

/// Resolved per-chain guidance state.
#[derive(Debug, Clone)]
pub struct GuidanceDriver {
    base: CondEmbedding,
    uncond: CondEmbedding,
    steered: Option<CondEmbedding>,
    alpha: f64,
    policy: Policy,
    targets: Vec<String>,
}

/// What the sampler needs for one reverse step.
#[derive(Debug)]
pub struct StepCondition<'a> {
    pub cond: Cow<'a, CondEmbedding>,
    pub uncond: &'a CondEmbedding,
    pub alpha: f64,
}

impl GuidanceDriver {
    /// The prompt's own embedding.
    pub fn base(&self) -> &CondEmbedding {
        &self.base
    }

    /// The empty-prompt embedding used as the guidance contrast.
    pub fn uncond(&self) -> &CondEmbedding {
        &self.uncond
    }

    /// The steered embedding, if the scheme has one.
    pub fn steered(&self) -> Option<&CondEmbedding> {
        self.steered.as_ref()
    }

    /// Attribute targets resolved for this chain (one per family for
    /// steered schemes, empty otherwise).
    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Effective condition for reverse step `t` of `n`.
    pub fn condition_at<R: Rng>(
        &self,
        t: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<StepCondition<'_>> {
        if t == 0 || t > n {
            return Err(Error::StepOutOfRange(t));
        }
        // 1-based execution order: step N is the 1st step taken
        let k = n - t + 1;
        let cond: Cow<'_, CondEmbedding> = match &self.policy {
            Policy::Base => Cow::Borrowed(&self.base),
            Policy::Steered => Cow::Borrowed(self.steered.as_ref().expect("steered policy")),
            Policy::Annealed(params) => {
                let time = t as f64 / n as f64;
                Cow::Owned(cads_perturb(&self.base, time, params, rng))
            }
            Policy::SwapThenBase { fraction } => {
                if k <= ceil_steps(*fraction, n) {
                    Cow::Borrowed(self.steered.as_ref().expect("swap policy"))
                } else {
                    Cow::Borrowed(&self.base)
                }
            }
            Policy::ExclusiveThenAlternate { tau } => {
                let exclusive = ceil_steps(*tau, n);
                let use_steered = if k <= exclusive {
                    true
                } else {
                    // alternation starts with the steered embedding
                    (k - exclusive) % 2 == 1
                };
                if use_steered {
                    Cow::Borrowed(self.steered.as_ref().expect("weak policy"))
                } else {
                    Cow::Borrowed(&self.base)
                }
            }
        };
        Ok(StepCondition {
            cond,
            uncond: &self.uncond,
            alpha: self.alpha,
        })
    }
}

/// `ceil(fraction * n)` robust to the usual binary-fraction wobble, so a
/// fraction of  0.2 over 50 steps means exactly 10 steps.
fn ceil_steps(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let rounded = libm::round(x);
    let exact = if (x - rounded).abs() < 1e-9 {
        rounded
    } else {
        libm::ceil(x)
    };
    exact as usize
}

/// Resolve a guidance spec against a prompt for one chain. Weak steering
/// draws its target attribute(s) here, uniformly per family.
pub fn make_driver<R: Rng>(
    spec: &GuidanceSpec,
    prompt: &PromptSpec,
    codec: &Codec,
    rng: &mut R,
) -> Result<GuidanceDriver> {
    spec.validate()?;
    let base = codec.encode(prompt)?;
    let uncond = codec.encode(&PromptSpec::empty())?;
    let alpha = spec.alpha();
    let (steered, policy, targets) = match spec {
        GuidanceSpec::Vanilla | GuidanceSpec::Cfg { .. } => (None, Policy::Base, Vec::new()),
        GuidanceSpec::Cads { params, .. } => (None, Policy::Annealed(*params), Vec::new()),
        GuidanceSpec::Swap {
            fraction,
            attribute,
            ..
        } => {
            let mut qualified = prompt.clone();
            qualified.qualifier = Some(attribute.clone());
            let steered = codec.encode(&qualified)?;
            (
                Some(steered),
                Policy::SwapThenBase {
                    fraction: *fraction,
                },
                alloc::vec![attribute.clone()],
            )
        }
        GuidanceSpec::PromptAppend { attribute, .. } => {
            let mut appended = prompt.clone();
            appended.extra_tokens.push(attribute.clone());
            let steered = codec.encode(&appended)?;
            (
                Some(steered),
                Policy::Steered,
                alloc::vec![attribute.clone()],
            )
        }
        GuidanceSpec::Weak {
            tau,
            families,
            mode,
            ..
        } => {
            let mut targets = Vec::with_capacity(families.len());
            let mut directions = Vec::with_capacity(families.len());
            for family in families {
                let pick = if family.len() == 1 {
                    0
                } else {
                    rng.random_range(0..family.len())
                };
                let attribute = family[pick].to_string();
                directions.push(codec.attribute_direction(&attribute)?);
                targets.push(attribute);
            }
            let dir_refs: Vec<_> = directions.iter().collect();
            let steered = codec.apply_weak_sum(&base, &dir_refs, *mode)?;
            (
                Some(steered),
                Policy::ExclusiveThenAlternate { tau: *tau },
                targets,
            )
        }
    };
    Ok(GuidanceDriver {
        base,
        uncond,
        steered,
        alpha,
        policy,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::seed::derive_rng;
    use crate::stats::chi_square_gof;
    use alloc::vec;

    fn fixtures() -> (Codec, PromptSpec) {
        (presets::default_codec(), PromptSpec::context("ceo"))
    }

    fn gender() -> Vec<Vec<String>> {
        vec![vec!["female".to_string(), "male".to_string()]]
    }

    #[test]
    fn vanilla_driver_uses_the_prompt_embedding_everywhere() {
        let (codec, prompt) = fixtures();
        let mut rng = derive_rng(0, &[]);
        let driver = make_driver(&GuidanceSpec::Vanilla, &prompt, &codec, &mut rng).unwrap();
        let c = codec.encode(&prompt).unwrap();
        for t in [1usize, 25, 50] {
            let step = driver.condition_at(t, 50, &mut rng).unwrap();
            assert_eq!(step.cond.as_ref(), &c);
            assert_eq!(step.alpha, 0.0);
        }
        assert!(driver.targets().is_empty());
        assert!(driver.condition_at(0, 50, &mut rng).is_err());
        assert!(driver.condition_at(51, 50, &mut rng).is_err());
    }

    #[test]
    fn singleton_family_always_targets_it() {
        let (codec, prompt) = fixtures();
        let mut rng = derive_rng(1, &[]);
        for _ in 0..32 {
            let spec = GuidanceSpec::Weak {
                alpha: 0.0,
                tau: 0.9,
                families: vec![vec!["female".to_string()]],
                mode: EditMode::EosMasked,
            };
            let driver = make_driver(&spec, &prompt, &codec, &mut rng).unwrap();
            assert_eq!(driver.targets(), ["female".to_string()]);
        }
    }

    #[test]
    fn family_draws_are_uniform() {
        let (codec, prompt) = fixtures();
        let spec = GuidanceSpec::Weak {
            alpha: 0.0,
            tau: 0.9,
            families: gender(),
            mode: EditMode::EosMasked,
        };
        let mut counts = [0usize; 2];
        for i in 0..10000 {
            let mut rng = derive_rng(2, &[i]);
            let driver = make_driver(&spec, &prompt, &codec, &mut rng).unwrap();
            match driver.targets()[0].as_str() {
                "female" => counts[0] += 1,
                "male" => counts[1] += 1,
                other => panic!("unexpected target {other}"),
            }
        }
        // 99% CI around 0.5 at n = 10000 is about +-0.0129
        let ratio = counts[0] as f64 / 10000.0;
        assert!((ratio - 0.5).abs() < 0.0129, "female share {ratio}");
        let (_, p) = chi_square_gof(&[counts[0], counts[1]], &[0.5, 0.5]).unwrap();
        assert!(p > 0.01, "uniformity rejected, p = {p}");
    }

    #[test]
    fn weak_tau_endpoints() {
        let (codec, prompt) = fixtures();
        let mut rng = derive_rng(3, &[]);
        let n = 50;

        let all = GuidanceSpec::Weak {
            alpha: 0.0,
            tau: 1.0,
            families: gender(),
            mode: EditMode::EosMasked,
        };
        let driver = make_driver(&all, &prompt, &codec, &mut rng).unwrap();
        let steered = driver.steered().unwrap().clone();
        for t in 1..=n {
            let step = driver.condition_at(t, n, &mut rng).unwrap();
            assert_eq!(step.cond.as_ref(), &steered, "tau=1 must steer at t={t}");
        }

        // tau = 0: strict alternation from the very first step, steered first
        let none = GuidanceSpec::Weak {
            alpha: 0.0,
            tau: 0.0,
            families: gender(),
            mode: EditMode::EosMasked,
        };
        let driver = make_driver(&none, &prompt, &codec, &mut rng).unwrap();
        let steered = driver.steered().unwrap().clone();
        for t in (1..=n).rev() {
            let k = n - t + 1;
            let step = driver.condition_at(t, n, &mut rng).unwrap();
            let want_steered = k % 2 == 1;
            assert_eq!(
                step.cond.as_ref() == &steered,
                want_steered,
                "alternation phase wrong at k={k}"
            );
        }
    }

    #[test]
    fn weak_usage_count_matches_schedule_formula() {
        let (codec, prompt) = fixtures();
        let mut rng = derive_rng(4, &[]);
        let n = 50;
        for tau in [0.0, 0.1, 0.25, 0.5, 0.9, 0.97, 1.0] {
            let spec = GuidanceSpec::Weak {
                alpha: 0.0,
                tau,
                families: gender(),
                mode: EditMode::EosMasked,
            };
            let driver = make_driver(&spec, &prompt, &codec, &mut rng).unwrap();
            let steered = driver.steered().unwrap().clone();
            let mut used = 0usize;
            for t in (1..=n).rev() {
                let step = driver.condition_at(t, n, &mut rng).unwrap();
                if step.cond.as_ref() == &steered {
                    used += 1;
                }
            }
            let exclusive = ceil_steps(tau, n);
            let remaining = n - exclusive;
            let expect = exclusive + remaining.div_ceil(2);
            assert_eq!(used, expect, "tau = {tau}");
        }
    }

    #[test]
    fn swap_boundary_is_exact() {
        let (codec, prompt) = fixtures();
        let mut rng = derive_rng(5, &[]);
        let n = 50;
        for fraction in [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0] {
            let spec = GuidanceSpec::Swap {
                alpha: 0.0,
                fraction,
                attribute: "female".to_string(),
            };
            let driver = make_driver(&spec, &prompt, &codec, &mut rng).unwrap();
            let steered = driver.steered().unwrap().clone();
            let boundary = ceil_steps(fraction, n);
            assert_eq!(boundary, libm::ceil(fraction * n as f64 - 1e-12) as usize);
            for t in (1..=n).rev() {
                let k = n - t + 1;
                let step = driver.condition_at(t, n, &mut rng).unwrap();
                let is_steered = step.cond.as_ref() == &steered;
                assert_eq!(is_steered, k <= boundary, "fraction {fraction}, step {k}");
            }
        }
    }

    #[test]
    fn swap_steered_embedding_is_the_qualified_prompt() {
        let (codec, prompt) = fixtures();
        let mut rng = derive_rng(6, &[]);
        let spec = GuidanceSpec::Swap {
            alpha: 0.0,
            fraction: 0.5,
            attribute: "female".to_string(),
        };
        let driver = make_driver(&spec, &prompt, &codec, &mut rng).unwrap();
        let qualified = codec
            .encode(&PromptSpec::qualified("ceo", "female"))
            .unwrap();
        assert_eq!(driver.steered().unwrap(), &qualified);
    }

    #[test]
    fn prompt_append_places_the_attribute_last_in_the_prefix() {
        let (codec, prompt) = fixtures();
        let mut rng = derive_rng(7, &[]);
        let spec = GuidanceSpec::PromptAppend {
            alpha: 0.0,
            attribute: "female".to_string(),
        };
        let driver = make_driver(&spec, &prompt, &codec, &mut rng).unwrap();
        let appended = codec
            .encode(&PromptSpec::context("ceo").with_extras(&["female"]))
            .unwrap();
        assert_eq!(driver.steered().unwrap(), &appended);
        let step = driver.condition_at(50, 50, &mut rng).unwrap();
        assert_eq!(step.cond.as_ref(), &appended);
    }

    #[test]
    fn weak_eos_masked_preserves_prefix_rows_at_every_step() {
        let (codec, prompt) = fixtures();
        let mut rng = derive_rng(8, &[]);
        let spec = GuidanceSpec::Weak {
            alpha: 6.0,
            tau: 0.9,
            families: gender(),
            mode: EditMode::EosMasked,
        };
        let driver = make_driver(&spec, &prompt, &codec, &mut rng).unwrap();
        let base = codec.encode(&prompt).unwrap();
        let n = 50;
        for t in (1..=n).rev() {
            let step = driver.condition_at(t, n, &mut rng).unwrap();
            for i in 0..base.eos_index() {
                assert_eq!(
                    step.cond.row(i),
                    base.row(i),
                    "prefix row {i} changed at t={t}"
                );
            }
        }
    }

    #[test]
    fn annealed_policy_is_clean_in_the_late_phase() {
        let (codec, prompt) = fixtures();
        let mut rng = derive_rng(9, &[]);
        let params = CadsParams::new(0.25, 0.6, 0.9).unwrap();
        let spec = GuidanceSpec::Cads { alpha: 6.0, params };
        let driver = make_driver(&spec, &prompt, &codec, &mut rng).unwrap();
        let base = codec.encode(&prompt).unwrap();
        let n = 50;
        // t/n <= tau1: untouched; t/n >= tau2: perturbed
        let clean = driver.condition_at(30, n, &mut rng).unwrap();
        assert_eq!(clean.cond.as_ref(), &base);
        let noisy = driver.condition_at(n, n, &mut rng).unwrap();
        assert_ne!(noisy.cond.as_ref(), &base);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let (codec, prompt) = fixtures();
        let mut rng = derive_rng(10, &[]);
        let bad_alpha = GuidanceSpec::Cfg { alpha: -1.0 };
        assert!(make_driver(&bad_alpha, &prompt, &codec, &mut rng).is_err());
        let bad_fraction = GuidanceSpec::Swap {
            alpha: 0.0,
            fraction: 1.5,
            attribute: "female".to_string(),
        };
        assert!(make_driver(&bad_fraction, &prompt, &codec, &mut rng).is_err());
        let empty_family = GuidanceSpec::Weak {
            alpha: 0.0,
            tau: 0.5,
            families: vec![vec![]],
            mode: EditMode::EosMasked,
        };
        assert!(make_driver(&empty_family, &prompt, &codec, &mut rng).is_err());
        let unknown = GuidanceSpec::Weak {
            alpha: 0.0,
            tau: 0.5,
            families: vec![vec!["purple".to_string()]],
            mode: EditMode::EosMasked,
        };
        assert!(matches!(
            make_driver(&unknown, &prompt, &codec, &mut rng),
            Err(Error::UnknownAttribute(_))
        ));
    }
}
