//! Discrete variance-preserving diffusion: the noise schedule, forward
//! noising, classifier-free guidance combination, and the reverse sampler.
//!
//! Conventions: step `t` runs from `N` (pure noise) down to `0` (data);
//! `abar(t)` is the cumulative signal level with `abar(0) = 1`. Reverse
//! steps use the standard ancestral update
//!
//! ```text
//! z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(1 - beta_t) + sigma_t * xi
//! sigma_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t)
//! ```
//!
//! with `sigma_t = 0` in deterministic mode. Chains are driven by a
//! [`crate::guidance::GuidanceDriver`], which picks the
//! effective condition and guidance scale at every step; the chain itself
//! owns no shared state, so any number of chains can run in parallel from
//! independently derived RNG streams.

use alloc::vec::Vec;

use libm::sqrt;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec::Codec;
use crate::guidance::GuidanceDriver;
use crate::world::WorldSpec;
use crate::{Error, Result};

/// Reference beta ramp endpoints at 1000 training steps; coarser schedules
/// scale these up so the terminal signal level stays near zero.
const BETA_START_REF: f64 = 1e-4;
const BETA_END_REF: f64 = 0.02;
const REFERENCE_STEPS: f64 = 1000.0;

/// Discrete noise schedule with cached cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    abar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Build from explicit per-step noise rates. Enforces the schedule
    /// invariants: every beta in (0, 1), strictly decreasing `abar`, and a
    /// terminal level below 1e-4 so the chain start is indistinguishable
    /// from pure noise.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter(
                "schedule needs at least one step".into(),
            ));
        }
        if !betas.iter().all(|b| b.is_finite() && *b > 0.0 && *b < 1.0) {
            return Err(Error::InvalidParameter(
                "every beta must lie in (0, 1)".into(),
            ));
        }
        let mut abar = Vec::with_capacity(betas.len() + 1);
        abar.push(1.0);
        for (i, b) in betas.iter().enumerate() {
            let next = abar[i] * (1.0 - b);
            if next >= abar[i] {
                return Err(Error::InvalidParameter(
                    "abar must strictly decrease".into(),
                ));
            }
            abar.push(next);
        }
        if *abar.last().unwrap() >= 1e-4 {
            return Err(Error::InvalidParameter(
                "terminal abar must be below 1e-4 (schedule too short or too gentle)".into(),
            ));
        }
        Ok(Self { betas, abar })
    }

    /// Linear ramp from `1e-4 * (1000/N)` to `0.02 * (1000/N)`.
    pub fn linear(steps: usize) -> Result<Self> {
        let scale = REFERENCE_STEPS / steps as f64;
        Self::linear_with(steps, BETA_START_REF * scale, BETA_END_REF * scale)
    }

    /// Linear ramp with explicit endpoints.
    pub fn linear_with(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidParameter(
                "schedule needs at least two steps".into(),
            ));
        }
        let betas = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    /// Squared-cosine signal curve: `abar(t) = cos^2((t/N + s)/(1 + s) * pi/2)`
    /// normalized to `abar(0) = 1`, with the implied betas clipped at 0.999.
    /// Compared to a linear ramp with the same terminal level this keeps
    /// the low-noise steps much gentler, which shrinks the ancestral
    /// sampler's discretization bias and stretches the usable
    /// partial-noising range (`abar` at 60% depth is ~0.34 instead of ~0.02).
    pub fn cosine(steps: usize) -> Result<Self> {
        const OFFSET: f64 = 0.008;
        let f = |t: f64| {
            let x = (t / steps as f64 + OFFSET) / (1.0 + OFFSET) * core::f64::consts::FRAC_PI_2;
            let c = libm::cos(x);
            c * c
        };
        let betas = (1..=steps)
            .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999))
            .collect();
        Self::from_betas(betas)
    }

    /// Quadratic ramp, linear in sqrt(beta) space.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidParameter(
                "schedule needs at least two steps".into(),
            ));
        }
        if beta_start <= 0.0 || beta_end <= 0.0 {
            return Err(Error::InvalidParameter(
                "beta endpoints must be positive".into(),
            ));
        }
        let (s0, s1) = (sqrt(beta_start), sqrt(beta_end));
        let betas = (0..steps)
            .map(|i| {
                let s = s0 + (s1 - s0) * i as f64 / (steps - 1) as f64;
                s * s
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Noise rate of step `t`, for t in 1..=N.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::StepOutOfRange(t));
        }
        Ok(self.betas[t - 1])
    }

    /// Cumulative signal level at step `t`, for t in 0..=N.
    pub fn abar(&self, t: usize) -> Result<f64> {
        self.abar.get(t).copied().ok_or(Error::StepOutOfRange(t))
    }

    /// Normalized time of step `t`: 1 at the noise end, 0 at the data end.
    pub fn normalized_time(&self, t: usize) -> f64 {
        t as f64 / self.steps() as f64
    }
}

/// State of one reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub z: Vec<f64>,
    pub t: usize,
}

/// Ancestral (stochastic) or deterministic reverse update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    Ancestral,
    Deterministic,
}

/// Where a chain starts.
#[derive(Debug, Clone)]
pub enum ChainStart {
    /// z_N drawn from a standard normal.
    Fresh,
    /// Resume from a given latent at step `t`, as produced by
    /// [`forward_noise`].
    FromLatent { z: Vec<f64>, t: usize },
}

/// Forward noising: `z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
/// `t = 0` returns `x0` unchanged without consuming randomness.
pub fn forward_noise<R: Rng>(
    schedule: &DiffusionSchedule,
    x0: &[f64],
    t: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let abar = schedule.abar(t)?;
    if t == 0 {
        return Ok(x0.to_vec());
    }
    let signal = sqrt(abar);
    let noise = sqrt(1.0 - abar);
    Ok(x0
        .iter()
        .map(|&x| signal * x + noise * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Classifier-free guidance: `(1 + alpha) * eps_cond - alpha * eps_uncond`.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], alpha: f64) -> Vec<f64> {
    assert_eq!(
        eps_cond.len(),
        eps_uncond.len(),
        "guidance shapes must match"
    );
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| (1.0 + alpha) * c - alpha * u)
        .collect()
}

/// One reverse update. Noise is only drawn when the step variance is
/// positive, so the final step (and deterministic mode) consume no
/// randomness.
pub fn reverse_step<R: Rng>(
    schedule: &DiffusionSchedule,
    state: &ChainState,
    eps: &[f64],
    mode: StepMode,
    rng: &mut R,
) -> Result<ChainState> {
    if state.t == 0 {
        return Err(Error::StepUnderflow);
    }
    let t = state.t;
    let beta = schedule.beta(t)?;
    let abar_t = schedule.abar(t)?;
    let abar_prev = schedule.abar(t - 1)?;
    let mean_scale = 1.0 / sqrt(1.0 - beta);
    let eps_coef = beta / sqrt(1.0 - abar_t);
    let mut z: Vec<f64> = state
        .z
        .iter()
        .zip(eps)
        .map(|(zi, ei)| (zi - eps_coef * ei) * mean_scale)
        .collect();
    if mode == StepMode::Ancestral {
        let var = beta * (1.0 - abar_prev) / (1.0 - abar_t);
        if var > 0.0 {
            let sd = sqrt(var);
            for zi in z.iter_mut() {
                *zi += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(ChainState { z, t: t - 1 })
}

/// Run one full reverse chain under a guidance driver.
///
/// At each step the driver supplies the effective conditional embedding,
/// the unconditional embedding, and the guidance scale; the world supplies
/// exact noise predictions. `noise_rng` drives the chain's own randomness
/// (initial latent and ancestral noise); `driver_rng` drives any per-step
/// condition randomness. Keeping the two streams separate means guidance
/// variants can be compared on identical chain noise.
#[allow(clippy::too_many_arguments)]
pub fn run_chain<R1: Rng, R2: Rng>(
    schedule: &DiffusionSchedule,
    world: &WorldSpec,
    codec: &Codec,
    context: &str,
    driver: &GuidanceDriver,
    start: ChainStart,
    mode: StepMode,
    noise_rng: &mut R1,
    driver_rng: &mut R2,
) -> Result<Vec<f64>> {
    let n = schedule.steps();
    let mut state = match start {
        ChainStart::Fresh => ChainState {
            z: (0..world.dim())
                .map(|_| noise_rng.sample::<f64, _>(StandardNormal))
                .collect(),
            t: n,
        },
        ChainStart::FromLatent { z, t } => {
            if t > n {
                return Err(Error::StepOutOfRange(t));
            }
            if z.len() != world.dim() {
                return Err(Error::ShapeMismatch {
                    expected: world.dim(),
                    got: z.len(),
                });
            }
            ChainState { z, t }
        }
    };
    // Conditions repeat across steps (schedules reuse at most a few
    // embeddings), so resolved mixtures are cached by embedding identity.
    // Per-step perturbed conditions come through as owned values and are
    // resolved fresh.
    let mut cache: Vec<(usize, crate::world::MixtureParams)> = Vec::with_capacity(3);
    while state.t > 0 {
        let t = state.t;
        let abar = schedule.abar(t)?;
        let step = driver.condition_at(t, n, driver_rng)?;
        let eps_c = match &step.cond {
            alloc::borrow::Cow::Borrowed(c) => {
                let key = *c as *const _ as usize;
                if !cache.iter().any(|(k, _)| *k == key) {
                    cache.push((key, world.mixture_for(codec, c, context)?));
                }
                let (_, m) = cache.iter().find(|(k, _)| *k == key).unwrap();
                m.eps_at(&state.z, abar)?
            }
            alloc::borrow::Cow::Owned(c) => world
                .mixture_for(codec, c, context)?
                .eps_at(&state.z, abar)?,
        };
        let eps = if step.alpha == 0.0 {
            eps_c
        } else {
            let key = step.uncond as *const _ as usize;
            if !cache.iter().any(|(k, _)| *k == key) {
                cache.push((key, world.mixture_for(codec, step.uncond, context)?));
            }
            let (_, m) = cache.iter().find(|(k, _)| *k == key).unwrap();
            let eps_u = m.eps_at(&state.z, abar)?;
            cfg_combine(&eps_c, &eps_u, step.alpha)
        };
        state = reverse_step(schedule, &state, &eps, mode, noise_rng)?;
    }
    Ok(state.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::PromptSpec;
    use crate::guidance::{make_driver, GuidanceSpec};
    use crate::presets;
    use crate::seed::derive_rng;
    use alloc::vec;
    use libm::fabs;

    #[test]
    fn schedule_invariants_hold_for_default() {
        let s = presets::default_schedule();
        assert_eq!(s.steps(), 200);
        assert_eq!(s.abar(0).unwrap(), 1.0);
        for t in 1..=s.steps() {
            assert!(s.abar(t).unwrap() < s.abar(t - 1).unwrap());
            let b = s.beta(t).unwrap();
            assert!(b > 0.0 && b < 1.0);
        }
        assert!(s.abar(s.steps()).unwrap() < 1e-4);
        // partial-noising depth used by the mode test keeps real signal
        let t6 = (0.6 * s.steps() as f64).round() as usize;
        let a = s.abar(t6).unwrap();
        assert!(a > 0.2 && a < 0.5, "abar(0.6N) = {a}");
    }

    #[test]
    fn linear_ramp_matches_reference_scaling() {
        let s = DiffusionSchedule::linear(50).unwrap();
        // 1e-4 * (1000/50) and 0.02 * (1000/50)
        assert!(fabs(s.beta(1).unwrap() - 0.002) < 1e-15);
        assert!(fabs(s.beta(50).unwrap() - 0.4) < 1e-15);
        assert!(s.abar(50).unwrap() < 1e-4);
    }

    #[test]
    fn bad_schedules_are_rejected() {
        assert!(DiffusionSchedule::from_betas(vec![]).is_err());
        assert!(DiffusionSchedule::from_betas(vec![0.0, 0.5]).is_err());
        assert!(DiffusionSchedule::from_betas(vec![0.5, 1.0]).is_err());
        // too gentle: terminal abar stays large
        assert!(DiffusionSchedule::linear_with(10, 1e-5, 1e-4).is_err());
    }

    #[test]
    fn forward_noise_at_zero_is_identity() {
        let s = presets::default_schedule();
        let mut rng = derive_rng(1, &[]);
        let x0 = vec![1.25, -0.5];
        let z = forward_noise(&s, &x0, 0, &mut rng).unwrap();
        assert_eq!(z, x0);
        assert!(forward_noise(&s, &x0, s.steps() + 1, &mut rng).is_err());
    }

    #[test]
    fn forward_noise_is_variance_preserving() {
        // scalar x0 ~ N(0,1): Var(z_t) = abar + (1 - abar) = 1 at every t
        let s = presets::default_schedule();
        let mut rng = derive_rng(2, &[]);
        for &t in &[20usize, 100, 200] {
            let draws: Vec<f64> = (0..20000)
                .map(|_| {
                    let x0 = [rng.sample::<f64, _>(StandardNormal)];
                    forward_noise(&s, &x0, t, &mut rng).unwrap()[0]
                })
                .collect();
            let (mean, sd) = crate::stats::mean_std(&draws);
            assert!(fabs(mean) < 0.03, "t={t}: mean {mean}");
            assert!(fabs(sd - 1.0) < 0.02, "t={t}: sd {sd}");
        }
    }

    #[test]
    fn terminal_forward_noise_is_standard_normal() {
        let s = presets::default_schedule();
        let mut rng = derive_rng(3, &[]);
        let x0 = vec![3.0, -3.0];
        let n = 10000;
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        let mut cross = 0.0f64;
        for _ in 0..n {
            let z = forward_noise(&s, &x0, s.steps(), &mut rng).unwrap();
            for d in 0..2 {
                sums[d] += z[d];
                sq[d] += z[d] * z[d];
            }
            cross += z[0] * z[1];
        }
        let nf = n as f64;
        for d in 0..2 {
            let mean = sums[d] / nf;
            let var = sq[d] / nf - mean * mean;
            // residual signal sqrt(abar_N)*3 is ~0.018, inside the CI slack
            assert!(fabs(mean) < 0.05, "mean[{d}] = {mean}");
            assert!(fabs(var - 1.0) < 0.05, "var[{d}] = {var}");
        }
        assert!(fabs(cross / nf) < 0.04);
    }

    #[test]
    fn cfg_combine_reference_points() {
        let c = [1.0, 0.0];
        let u = [0.0, 1.0];
        assert_eq!(cfg_combine(&c, &u, 0.0), vec![1.0, 0.0]);
        assert_eq!(cfg_combine(&c, &c, 3.7), c.to_vec());
        assert_eq!(cfg_combine(&c, &u, 2.0), vec![3.0, -2.0]);
    }

    #[test]
    fn final_reverse_step_is_noiseless() {
        // sigma_1^2 = beta_1 * (1 - abar_0) / (1 - abar_1) = 0
        let s = presets::default_schedule();
        let state = ChainState {
            z: vec![0.3, -0.3],
            t: 1,
        };
        let eps = vec![0.1, 0.2];
        let mut r1 = derive_rng(4, &[]);
        let mut r2 = derive_rng(4, &[]);
        let a = reverse_step(&s, &state, &eps, StepMode::Ancestral, &mut r1).unwrap();
        let b = reverse_step(&s, &state, &eps, StepMode::Deterministic, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.t, 0);
        // and the two rngs were equally (un)consumed
        use rand::RngCore;
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn reverse_step_underflow_errors() {
        let s = presets::default_schedule();
        let state = ChainState {
            z: vec![0.0, 0.0],
            t: 0,
        };
        let mut rng = derive_rng(5, &[]);
        assert!(matches!(
            reverse_step(&s, &state, &[0.0, 0.0], StepMode::Ancestral, &mut rng),
            Err(Error::StepUnderflow)
        ));
    }

    #[test]
    fn gentle_deterministic_step_barely_moves_z() {
        // with eps = 0 the update scales z by 1/sqrt(1 - beta) -> 1 as beta -> 0
        let s = DiffusionSchedule::linear_with(400, 1e-5, 0.05).unwrap();
        let state = ChainState {
            z: vec![1.0, -1.0],
            t: 1,
        };
        let mut rng = derive_rng(6, &[]);
        let next =
            reverse_step(&s, &state, &[0.0, 0.0], StepMode::Deterministic, &mut rng).unwrap();
        assert!(fabs(next.z[0] - 1.0) < 1e-4);
    }

    #[test]
    fn deterministic_chain_is_bit_reproducible() {
        let codec = presets::default_codec();
        let world = presets::default_world(&codec);
        let schedule = presets::default_schedule();
        let run = || {
            let mut noise = derive_rng(7, &[1]);
            let mut driver_rng = derive_rng(7, &[2]);
            let driver = make_driver(
                &GuidanceSpec::Cfg { alpha: 4.0 },
                &PromptSpec::context("ceo"),
                &codec,
                &mut driver_rng,
            )
            .unwrap();
            run_chain(
                &schedule,
                &world,
                &codec,
                "ceo",
                &driver,
                ChainStart::Fresh,
                StepMode::Deterministic,
                &mut noise,
                &mut driver_rng,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn singleton_world_chain_mean_approaches_component_mean() {
        let codec = presets::default_codec();
        let world = presets::default_world(&codec);
        let schedule = presets::default_schedule();
        let prompt = PromptSpec::context("car");
        let n_chains = 5000;
        let mut sum = [0.0f64; 2];
        for i in 0..n_chains {
            let mut noise = derive_rng(8, &[i as u64, 0]);
            let mut drv = derive_rng(8, &[i as u64, 1]);
            let driver = make_driver(&GuidanceSpec::Vanilla, &prompt, &codec, &mut drv).unwrap();
            let x = run_chain(
                &schedule,
                &world,
                &codec,
                "car",
                &driver,
                ChainStart::Fresh,
                StepMode::Ancestral,
                &mut noise,
                &mut drv,
            )
            .unwrap();
            sum[0] += x[0];
            sum[1] += x[1];
        }
        let mean = [sum[0] / n_chains as f64, sum[1] / n_chains as f64];
        // 3 standard errors of the component sigma, plus discretization slack
        let tol = 3.0 * presets::DEFAULT_SIGMA / sqrt(n_chains as f64) + 0.02;
        let target = &presets::OBJECT_CONTEXTS[0].1;
        assert!(fabs(mean[0] - target[0]) < tol, "{mean:?} vs {target:?}");
        assert!(fabs(mean[1] - target[1]) < tol, "{mean:?} vs {target:?}");
    }
}
