//! Config-driven experiment orchestration.
//!
//! Every experiment reduces to sampling cells of reverse-diffusion chains
//! and tabulating metrics. Determinism contract: each chain derives its
//! RNG streams from `(master seed, stream scope, context, chain index)`,
//! so results are identical for any worker count and execution order.
//! Cells that are compared against each other share a noise scope; their
//! chains then see identical initial latents and ancestral noise, which
//! makes equivalences exact and differences easier to detect.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use weakguide_core::codec::{CadsParams, EditMode, PromptSpec};
use weakguide_core::diffusion::{forward_noise, run_chain, ChainStart, StepMode};
use weakguide_core::guidance::{make_driver, GuidanceSpec};
use weakguide_core::metrics::{
    alignment_scores, attribute_ratio, avg_delta, compliance, discrepancy, energy_permutation_test,
    marginal_report, RatioReport,
};
use weakguide_core::seed::{derive_rng, fnv1a64};
use weakguide_core::stats::{
    isotonic_mean_trend_test, isotonic_trend_test, mean_difference_test, mean_std, sample_sd,
    two_proportion_test, Tail, TrendCell,
};
use weakguide_core::world::WorldSpec;
use weakguide_core::Result;

use crate::config::Lab;
use crate::report::{RunOutput, RunRecord, SCHEMA_VERSION};

/// Substream ids hung off each chain's tag path.
const SUB_NOISE: u64 = 0;
const SUB_DRIVER: u64 = 1;
const SUB_ORACLE: u64 = 2;

/// Pairs drawn per side when estimating a permutation threshold; capped so
/// the O(n^2) distance sums stay cheap.
const ENERGY_SUBSAMPLE: usize = 800;
const ENERGY_PERMUTATIONS: usize = 99;

/// Build the worker pool; `workers = 0` uses one thread per core.
pub fn make_pool(workers: usize) -> ThreadPool {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        builder = builder.num_threads(workers);
    }
    builder.build().expect("worker pool")
}

/// One sampled cell: final samples plus the per-chain steering targets
/// (empty strings for unsteered schemes).
pub struct CellSamples {
    pub samples: Vec<Vec<f64>>,
    pub targets: Vec<String>,
}

impl CellSamples {
    fn has_targets(&self) -> bool {
        self.targets.iter().any(|t| !t.is_empty())
    }
}

/// Run `n` fresh chains for one cell. `spec_fn` resolves the guidance spec
/// per chain (drawing from the chain's driver stream when the scheme calls
/// for a random attribute).
#[allow(clippy::too_many_arguments)]
pub fn sample_cell<F>(
    lab: &Lab,
    pool: &ThreadPool,
    seed: u64,
    scope: &str,
    context: &str,
    prompt: &PromptSpec,
    n: usize,
    spec_fn: F,
) -> Result<CellSamples>
where
    F: Fn(usize, &mut ChaCha8Rng) -> GuidanceSpec + Sync,
{
    let scope_tag = fnv1a64(scope.as_bytes());
    let ctx_tag = fnv1a64(context.as_bytes());
    let out: Result<Vec<(Vec<f64>, String)>> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut noise = derive_rng(seed, &[scope_tag, ctx_tag, i as u64, SUB_NOISE]);
                let mut drv = derive_rng(seed, &[scope_tag, ctx_tag, i as u64, SUB_DRIVER]);
                let spec = spec_fn(i, &mut drv);
                let driver = make_driver(&spec, prompt, &lab.codec, &mut drv)?;
                let x = run_chain(
                    &lab.schedule,
                    &lab.world,
                    &lab.codec,
                    context,
                    &driver,
                    ChainStart::Fresh,
                    StepMode::Ancestral,
                    &mut noise,
                    &mut drv,
                )?;
                Ok((x, driver.targets().join("+")))
            })
            .collect()
    });
    let pairs = out?;
    let (samples, targets) = pairs.into_iter().unzip();
    Ok(CellSamples { samples, targets })
}

#[allow(clippy::too_many_arguments)]
fn push_record(
    output: &mut RunOutput,
    lab: &Lab,
    cell: &str,
    context: &str,
    seed: u64,
    n: usize,
    guidance: String,
    targets: Option<Vec<String>>,
    metrics: BTreeMap<String, f64>,
    started: Instant,
) {
    output.records.push(RunRecord {
        schema: SCHEMA_VERSION,
        experiment: output.experiment.clone(),
        cell: cell.to_string(),
        context: context.to_string(),
        seed,
        n,
        guidance,
        codec_hash: format!("{:016x}", lab.codec_hash),
        world_hash: format!("{:016x}", lab.world_hash),
        schedule_hash: format!("{:016x}", lab.schedule_hash),
        chain_targets: targets,
        metrics,
        wall_ms: started.elapsed().as_millis() as u64,
    });
}

fn alignment_stats(
    lab: &Lab,
    samples: &[Vec<f64>],
    prompt: &PromptSpec,
    context: &str,
) -> Result<(f64, f64)> {
    let c = lab.codec.encode(prompt)?;
    let scores = alignment_scores(&lab.world, &lab.codec, samples, &c, context)?;
    let (mean, _) = mean_std(&scores);
    Ok((mean, sample_sd(&scores)))
}

fn major_label(world: &WorldSpec, context: &str) -> Result<String> {
    let ctx = world.context(context)?;
    let comps = ctx.components().expect("attributed context");
    let weights = ctx.prior_weights().expect("attributed context");
    let mut best = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > weights[best] {
            best = i;
        }
    }
    Ok(comps[best].label.clone())
}

fn summary_table(output: &RunOutput) -> String {
    let mut s = String::new();
    for r in &output.rows {
        let _ = writeln!(
            s,
            "  {:<22} {:<18} {:<34} {:>14.6} (n = {})",
            r.cell, r.context, r.metric, r.value, r.n
        );
    }
    s
}

fn finish_summary(output: &mut RunOutput, lab: &Lab, seed: u64, started: Instant) {
    let mut head = String::new();
    let _ = writeln!(head, "experiment: {}", output.experiment);
    let _ = writeln!(
        head,
        "seed: {seed}  codec: {:016x}  world: {:016x}  schedule: {:016x}",
        lab.codec_hash, lab.world_hash, lab.schedule_hash
    );
    let _ = writeln!(head, "{}", summary_table(output));
    let _ = writeln!(head, "wall time: {} ms", started.elapsed().as_millis());
    output.summary = head;
}

/// Partial-noising probe: generate known minority samples, noise them to
/// step `t_star`, denoise under the attribute-neutral prompt, and compare
/// the minor-attribute ratio against a fresh baseline of equal size.
pub fn mode_test(
    lab: &Lab,
    pool: &ThreadPool,
    seed: u64,
    n: usize,
    context: &str,
    minor: &str,
    t_star_frac: f64,
) -> Result<RunOutput> {
    let started = Instant::now();
    let mut output = RunOutput::new("mode_test");
    let steps = lab.schedule.steps();
    let t_star = ((t_star_frac * steps as f64).round() as usize).min(steps);
    let prompt = PromptSpec::context(context);

    let baseline = sample_cell(
        lab,
        pool,
        seed,
        "mode_test/fresh",
        context,
        &prompt,
        n,
        |_, _| GuidanceSpec::Vanilla,
    )?;
    let baseline_report = attribute_ratio(&lab.world, &baseline.samples, context)?;
    let baseline_minor = baseline_report.ratio_of(minor).expect("minor attribute");

    // stage 1-3: oracle minority draws, forward noising, neutral denoising
    let scope_tag = fnv1a64(b"mode_test/resume");
    let ctx_tag = fnv1a64(context.as_bytes());
    let resumed: Result<Vec<Vec<f64>>> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut oracle_rng = derive_rng(seed, &[scope_tag, ctx_tag, i as u64, SUB_ORACLE]);
                let (x0, _) = lab
                    .world
                    .sample_oracle(&lab.codec, context, Some(minor), 1, &mut oracle_rng)?
                    .pop()
                    .expect("one draw");
                let mut noise = derive_rng(seed, &[scope_tag, ctx_tag, i as u64, SUB_NOISE]);
                let z = forward_noise(&lab.schedule, &x0, t_star, &mut noise)?;
                let mut drv = derive_rng(seed, &[scope_tag, ctx_tag, i as u64, SUB_DRIVER]);
                let driver = make_driver(&GuidanceSpec::Vanilla, &prompt, &lab.codec, &mut drv)?;
                run_chain(
                    &lab.schedule,
                    &lab.world,
                    &lab.codec,
                    context,
                    &driver,
                    ChainStart::FromLatent { z, t: t_star },
                    StepMode::Ancestral,
                    &mut noise,
                    &mut drv,
                )
            })
            .collect()
    });
    let resumed = resumed?;
    let resumed_report = attribute_ratio(&lab.world, &resumed, context)?;
    let resumed_minor = resumed_report.ratio_of(minor).expect("minor attribute");

    let minor_idx = baseline_report
        .labels
        .iter()
        .position(|l| l == minor)
        .unwrap();
    let (z_greater, p_greater) = two_proportion_test(
        resumed_report.counts[minor_idx],
        n,
        baseline_report.counts[minor_idx],
        n,
        Tail::Greater,
    );
    let (_, p_two_sided) = two_proportion_test(
        resumed_report.counts[minor_idx],
        n,
        baseline_report.counts[minor_idx],
        n,
        Tail::TwoSided,
    );

    output.push_row("baseline", context, "minor_ratio", baseline_minor, n);
    let cell = format!("t_star_{t_star}");
    output.push_row(&cell, context, "minor_ratio", resumed_minor, n);
    output.push_row(&cell, context, "t_star_step", t_star as f64, n);
    output.push_row(&cell, context, "z_greater_than_baseline", z_greater, n);
    output.push_row(&cell, context, "p_greater_than_baseline", p_greater, n);
    output.push_row(&cell, context, "p_two_sided_vs_baseline", p_two_sided, n);

    push_record(
        &mut output,
        lab,
        "baseline",
        context,
        seed,
        n,
        format!("{:?}", GuidanceSpec::Vanilla),
        None,
        BTreeMap::from([("minor_ratio".to_string(), baseline_minor)]),
        started,
    );
    push_record(
        &mut output,
        lab,
        &cell,
        context,
        seed,
        n,
        format!(
            "mode test resume at t* = {t_star} under {:?}",
            GuidanceSpec::Vanilla
        ),
        None,
        BTreeMap::from([
            ("minor_ratio".to_string(), resumed_minor),
            ("p_greater_than_baseline".to_string(), p_greater),
        ]),
        started,
    );
    finish_summary(&mut output, lab, seed, started);
    Ok(output)
}

/// Guidance-scale sweep: majority ratio and alignment per scale, with
/// isotonic trend verdicts over the grid.
pub fn sweep_cfg(
    lab: &Lab,
    pool: &ThreadPool,
    seed: u64,
    n: usize,
    context: &str,
    grid: &[f64],
) -> Result<RunOutput> {
    let started = Instant::now();
    let mut output = RunOutput::new("sweep_cfg");
    let prompt = PromptSpec::context(context);
    let major = major_label(&lab.world, context)?;

    let mut ratio_cells = Vec::new();
    let mut align_cells = Vec::new();
    for &alpha in grid {
        let cell_started = Instant::now();
        let spec = GuidanceSpec::Cfg { alpha };
        let cell = sample_cell(lab, pool, seed, "sweep_cfg", context, &prompt, n, |_, _| {
            spec.clone()
        })?;
        let report = attribute_ratio(&lab.world, &cell.samples, context)?;
        let major_ratio = report.ratio_of(&major).expect("major attribute");
        let (align_mean, align_sd) = alignment_stats(lab, &cell.samples, &prompt, context)?;
        let name = format!("alpha_{alpha}");
        output.push_row(&name, context, "major_ratio", major_ratio, n);
        output.push_row(&name, context, "alignment_mean", align_mean, n);
        output.push_row(&name, context, "alignment_sd", align_sd, n);
        let successes = (major_ratio * n as f64).round() as usize;
        ratio_cells.push(TrendCell {
            score: alpha,
            n,
            successes,
            mean: 0.0,
            sd: 0.0,
        });
        align_cells.push(TrendCell {
            score: alpha,
            n,
            successes: 0,
            mean: align_mean,
            sd: align_sd,
        });
        push_record(
            &mut output,
            lab,
            &name,
            context,
            seed,
            n,
            format!("{spec:?}"),
            None,
            BTreeMap::from([
                ("major_ratio".to_string(), major_ratio),
                ("alignment_mean".to_string(), align_mean),
            ]),
            cell_started,
        );
    }

    let ratio_trend = isotonic_trend_test(&ratio_cells, 0.99);
    let align_trend = isotonic_mean_trend_test(&align_cells, 0.99);
    output.push_row("trend", context, "ratio_trend_z", ratio_trend.z, n);
    output.push_row("trend", context, "ratio_trend_p", ratio_trend.p, n);
    output.push_row(
        "trend",
        context,
        "ratio_monotone_consistent",
        f64::from(ratio_trend.monotone_consistent),
        n,
    );
    output.push_row("trend", context, "alignment_trend_z", align_trend.z, n);
    output.push_row("trend", context, "alignment_trend_p", align_trend.p, n);
    output.push_row(
        "trend",
        context,
        "alignment_monotone_consistent",
        f64::from(align_trend.monotone_consistent),
        n,
    );
    finish_summary(&mut output, lab, seed, started);
    Ok(output)
}

/// Annealed-condition-noise sweep over (s, tau1) cells against a clean
/// guided baseline at the same scale. The baseline and every cell share
/// chain noise, so the s = 0 cells reproduce the baseline exactly.
#[allow(clippy::too_many_arguments)]
pub fn sweep_cads(
    lab: &Lab,
    pool: &ThreadPool,
    seed: u64,
    n: usize,
    context: &str,
    s_grid: &[f64],
    tau1_grid: &[f64],
    tau2: f64,
    alpha: f64,
) -> Result<RunOutput> {
    let started = Instant::now();
    let mut output = RunOutput::new("sweep_cads");
    let prompt = PromptSpec::context(context);
    let major = major_label(&lab.world, context)?;

    let base_spec = GuidanceSpec::Cfg { alpha };
    let base = sample_cell(
        lab,
        pool,
        seed,
        "sweep_cads",
        context,
        &prompt,
        n,
        |_, _| base_spec.clone(),
    )?;
    let base_report = attribute_ratio(&lab.world, &base.samples, context)?;
    let base_major = base_report.ratio_of(&major).expect("major");
    let base_scores = {
        let c = lab.codec.encode(&prompt)?;
        alignment_scores(&lab.world, &lab.codec, &base.samples, &c, context)?
    };
    let (base_align, _) = mean_std(&base_scores);
    let base_align_sd = sample_sd(&base_scores);
    output.push_row("cfg_baseline", context, "major_ratio", base_major, n);
    output.push_row("cfg_baseline", context, "alignment_mean", base_align, n);
    output.push_row("cfg_baseline", context, "alignment_sd", base_align_sd, n);
    let major_idx = base_report.labels.iter().position(|l| *l == major).unwrap();

    for &tau1 in tau1_grid {
        for &s in s_grid {
            let cell_started = Instant::now();
            let params = CadsParams::new(s, tau1, tau2)?;
            let spec = GuidanceSpec::Cads { alpha, params };
            let cell = sample_cell(
                lab,
                pool,
                seed,
                "sweep_cads",
                context,
                &prompt,
                n,
                |_, _| spec.clone(),
            )?;
            let report = attribute_ratio(&lab.world, &cell.samples, context)?;
            let major_ratio = report.ratio_of(&major).expect("major");
            let c = lab.codec.encode(&prompt)?;
            let scores = alignment_scores(&lab.world, &lab.codec, &cell.samples, &c, context)?;
            let (align_mean, _) = mean_std(&scores);
            let align_sd = sample_sd(&scores);

            let (_, p_ratio_less) = two_proportion_test(
                report.counts[major_idx],
                n,
                base_report.counts[major_idx],
                n,
                Tail::Less,
            );
            let (_, p_ratio_two) = two_proportion_test(
                report.counts[major_idx],
                n,
                base_report.counts[major_idx],
                n,
                Tail::TwoSided,
            );
            let (_, p_align_less) = mean_difference_test(
                align_mean,
                align_sd,
                n,
                base_align,
                base_align_sd,
                n,
                Tail::Less,
            );
            let (_, p_align_two) = mean_difference_test(
                align_mean,
                align_sd,
                n,
                base_align,
                base_align_sd,
                n,
                Tail::TwoSided,
            );

            let name = format!("s_{s}_tau1_{tau1}");
            output.push_row(&name, context, "major_ratio", major_ratio, n);
            output.push_row(&name, context, "alignment_mean", align_mean, n);
            output.push_row(&name, context, "alignment_sd", align_sd, n);
            output.push_row(&name, context, "p_ratio_below_baseline", p_ratio_less, n);
            output.push_row(&name, context, "p_ratio_two_sided", p_ratio_two, n);
            output.push_row(
                &name,
                context,
                "p_alignment_below_baseline",
                p_align_less,
                n,
            );
            output.push_row(&name, context, "p_alignment_two_sided", p_align_two, n);
            push_record(
                &mut output,
                lab,
                &name,
                context,
                seed,
                n,
                format!("{spec:?}"),
                None,
                BTreeMap::from([
                    ("major_ratio".to_string(), major_ratio),
                    ("alignment_mean".to_string(), align_mean),
                ]),
                cell_started,
            );
        }
    }
    finish_summary(&mut output, lab, seed, started);
    Ok(output)
}

/// Prompt-swap sweep: the attribute-qualified prompt drives the first
/// `ceil(fraction * N)` steps, the neutral prompt the rest.
#[allow(clippy::too_many_arguments)]
pub fn sweep_swap(
    lab: &Lab,
    pool: &ThreadPool,
    seed: u64,
    n: usize,
    context: &str,
    attribute: &str,
    grid: &[f64],
    alpha: f64,
) -> Result<RunOutput> {
    let started = Instant::now();
    let mut output = RunOutput::new("sweep_swap");
    let prompt = PromptSpec::context(context);

    let base_spec = GuidanceSpec::Cfg { alpha };
    let base = sample_cell(
        lab,
        pool,
        seed,
        "sweep_swap",
        context,
        &prompt,
        n,
        |_, _| base_spec.clone(),
    )?;
    let base_report = attribute_ratio(&lab.world, &base.samples, context)?;
    let base_minor = base_report.ratio_of(attribute).expect("swap attribute");
    output.push_row("baseline", context, "minor_ratio", base_minor, n);
    let minor_idx = base_report
        .labels
        .iter()
        .position(|l| l == attribute)
        .unwrap();

    let mut cells = Vec::new();
    for &fraction in grid {
        let cell_started = Instant::now();
        let spec = GuidanceSpec::Swap {
            alpha,
            fraction,
            attribute: attribute.to_string(),
        };
        let cell = sample_cell(
            lab,
            pool,
            seed,
            "sweep_swap",
            context,
            &prompt,
            n,
            |_, _| spec.clone(),
        )?;
        let report = attribute_ratio(&lab.world, &cell.samples, context)?;
        let minor_ratio = report.ratio_of(attribute).expect("swap attribute");
        let (_, p_two) = two_proportion_test(
            report.counts[minor_idx],
            n,
            base_report.counts[minor_idx],
            n,
            Tail::TwoSided,
        );
        let name = format!("fraction_{fraction}");
        output.push_row(&name, context, "minor_ratio", minor_ratio, n);
        output.push_row(&name, context, "p_two_sided_vs_baseline", p_two, n);
        cells.push(TrendCell {
            score: fraction,
            n,
            successes: report.counts[minor_idx],
            mean: 0.0,
            sd: 0.0,
        });
        push_record(
            &mut output,
            lab,
            &name,
            context,
            seed,
            n,
            format!("{spec:?}"),
            Some(cell.targets),
            BTreeMap::from([("minor_ratio".to_string(), minor_ratio)]),
            cell_started,
        );
    }
    let trend = isotonic_trend_test(&cells, 0.99);
    output.push_row("trend", context, "minor_trend_z", trend.z, n);
    output.push_row("trend", context, "minor_trend_p", trend.p, n);
    output.push_row(
        "trend",
        context,
        "minor_monotone_consistent",
        f64::from(trend.monotone_consistent),
        n,
    );
    finish_summary(&mut output, lab, seed, started);
    Ok(output)
}

/// Methods compared by the de-biasing evaluation.
const DEBIAS_METHODS: [&str; 4] = ["vanilla", "weak", "every_position", "prompt_append"];

/// De-biasing evaluation: per biased context, sample under each method,
/// report per-attribute ratios and discrepancy, aggregate the mean
/// absolute deviation from balance, steer two families at once on the
/// product context, and check distributional parity on object contexts.
#[allow(clippy::too_many_arguments)]
pub fn debias(
    lab: &Lab,
    pool: &ThreadPool,
    seed: u64,
    n: usize,
    contexts: &[String],
    family: &str,
    tau: f64,
    alpha: f64,
    multi_context: &str,
    multi_families: &[String],
    object_contexts: &[String],
) -> Result<RunOutput> {
    let started = Instant::now();
    let mut output = RunOutput::new("debias");
    let members = lab.world.family(family)?.members.clone();

    let spec_for = |method: &str| -> GuidanceSpec {
        match method {
            "vanilla" => GuidanceSpec::Vanilla,
            "weak" => GuidanceSpec::Weak {
                alpha,
                tau,
                families: vec![members.clone()],
                mode: EditMode::EosMasked,
            },
            "every_position" => GuidanceSpec::Weak {
                alpha,
                tau,
                families: vec![members.clone()],
                mode: EditMode::EveryPosition,
            },
            _ => GuidanceSpec::Vanilla, // prompt_append resolved per chain
        }
    };

    let mut per_method_reports: BTreeMap<String, Vec<RatioReport>> = BTreeMap::new();
    for context in contexts {
        let prompt = PromptSpec::context(context);
        for method in DEBIAS_METHODS {
            let cell_started = Instant::now();
            let cell = if method == "prompt_append" {
                let members = members.clone();
                sample_cell(
                    lab,
                    pool,
                    seed,
                    "debias",
                    context,
                    &prompt,
                    n,
                    move |_, rng| {
                        use rand::Rng;
                        let pick = rng.random_range(0..members.len());
                        GuidanceSpec::PromptAppend {
                            alpha,
                            attribute: members[pick].clone(),
                        }
                    },
                )?
            } else {
                let spec = spec_for(method);
                sample_cell(
                    lab,
                    pool,
                    seed,
                    "debias",
                    context,
                    &prompt,
                    n,
                    move |_, _| spec.clone(),
                )?
            };
            let report = attribute_ratio(&lab.world, &cell.samples, context)?;
            for (label, ratio) in report.labels.iter().zip(report.ratios()) {
                output.push_row(method, context, &format!("ratio_{label}"), ratio, n);
            }
            let d = discrepancy(&report)?;
            output.push_row(method, context, "discrepancy", d.d, n);
            let guidance = if method == "prompt_append" {
                format!("PromptAppend {{ alpha: {alpha}, attribute: per-chain uniform draw }}")
            } else {
                format!("{:?}", spec_for(method))
            };
            push_record(
                &mut output,
                lab,
                method,
                context,
                seed,
                n,
                guidance,
                cell.has_targets().then(|| cell.targets.clone()),
                BTreeMap::from([("discrepancy".to_string(), d.d)]),
                cell_started,
            );
            per_method_reports
                .entry(method.to_string())
                .or_default()
                .push(report);
        }
    }
    for method in DEBIAS_METHODS {
        let reports = &per_method_reports[method];
        output.push_row(method, "all", "avg_delta", avg_delta(reports)?, n);
        let mean_d = reports
            .iter()
            .map(|r| discrepancy(r).map(|d| d.d))
            .sum::<Result<f64>>()?
            / reports.len() as f64;
        output.push_row(method, "all", "mean_discrepancy", mean_d, n);
    }

    // simultaneous steering of several families on the product context
    {
        let prompt = PromptSpec::context(multi_context);
        let multi_members: Vec<Vec<String>> = multi_families
            .iter()
            .map(|f| lab.world.family(f).map(|fam| fam.members.clone()))
            .collect::<Result<_>>()?;
        for (method, spec) in [
            ("vanilla", GuidanceSpec::Vanilla),
            (
                "weak_multi",
                GuidanceSpec::Weak {
                    alpha,
                    tau,
                    families: multi_members,
                    mode: EditMode::EosMasked,
                },
            ),
        ] {
            let cell_started = Instant::now();
            let spec_clone = spec.clone();
            let cell = sample_cell(
                lab,
                pool,
                seed,
                "debias_multi",
                multi_context,
                &prompt,
                n,
                move |_, _| spec_clone.clone(),
            )?;
            let report = attribute_ratio(&lab.world, &cell.samples, multi_context)?;
            let mut metrics = BTreeMap::new();
            for fam_name in multi_families {
                let fam = lab.world.family(fam_name)?;
                let marginal = marginal_report(&lab.world, &report, fam)?;
                let d = discrepancy(&marginal)?;
                output.push_row(
                    method,
                    multi_context,
                    &format!("discrepancy_{fam_name}"),
                    d.d,
                    n,
                );
                metrics.insert(format!("discrepancy_{fam_name}"), d.d);
            }
            push_record(
                &mut output,
                lab,
                method,
                multi_context,
                seed,
                n,
                format!("{spec:?}"),
                cell.has_targets().then(|| cell.targets.clone()),
                metrics,
                cell_started,
            );
        }
    }

    // general-prompt parity on object contexts: steered sampling must be
    // indistinguishable from vanilla
    for context in object_contexts {
        let cell_started = Instant::now();
        let prompt = PromptSpec::context(context);
        let vanilla = sample_cell(
            lab,
            pool,
            seed,
            "debias_objects",
            context,
            &prompt,
            n,
            |_, _| GuidanceSpec::Vanilla,
        )?;
        let weak_spec = GuidanceSpec::Weak {
            alpha,
            tau,
            families: vec![members.clone()],
            mode: EditMode::EosMasked,
        };
        let weak_spec_clone = weak_spec.clone();
        let weak = sample_cell(
            lab,
            pool,
            seed,
            "debias_objects",
            context,
            &prompt,
            n,
            move |_, _| weak_spec_clone.clone(),
        )?;
        let take = n.min(ENERGY_SUBSAMPLE);
        let mut perm_rng = derive_rng(
            seed,
            &[fnv1a64(b"debias_objects"), fnv1a64(context.as_bytes())],
        );
        let outcome = energy_permutation_test(
            &vanilla.samples[..take],
            &weak.samples[..take],
            ENERGY_PERMUTATIONS,
            &mut perm_rng,
        )?;
        let (align_vanilla, _) = alignment_stats(lab, &vanilla.samples, &prompt, context)?;
        let (align_weak, _) = alignment_stats(lab, &weak.samples, &prompt, context)?;
        let rel_gap = (align_weak - align_vanilla).abs() / align_vanilla.abs().max(1e-12);
        output.push_row(
            "object_parity",
            context,
            "energy_statistic",
            outcome.statistic,
            take,
        );
        output.push_row("object_parity", context, "energy_p", outcome.p_value, take);
        output.push_row(
            "object_parity",
            context,
            "alignment_vanilla",
            align_vanilla,
            n,
        );
        output.push_row("object_parity", context, "alignment_weak", align_weak, n);
        output.push_row("object_parity", context, "alignment_rel_gap", rel_gap, n);
        push_record(
            &mut output,
            lab,
            "object_parity",
            context,
            seed,
            n,
            format!("{weak_spec:?}"),
            None,
            BTreeMap::from([
                ("energy_p".to_string(), outcome.p_value),
                ("alignment_rel_gap".to_string(), rel_gap),
            ]),
            cell_started,
        );
    }
    finish_summary(&mut output, lab, seed, started);
    Ok(output)
}

/// Compliance evaluation: prompts carry explicit qualifiers; steering is
/// aimed at the opposite attribute to probe whether the explicit prompt
/// survives.
#[allow(clippy::too_many_arguments)]
pub fn compliance_eval(
    lab: &Lab,
    pool: &ThreadPool,
    seed: u64,
    n: usize,
    contexts: &[String],
    family: &str,
    tau: f64,
    alpha: f64,
) -> Result<RunOutput> {
    let started = Instant::now();
    let mut output = RunOutput::new("compliance");
    let members = lab.world.family(family)?.members.clone();

    for context in contexts {
        for specified in &members {
            let opposite: Vec<String> = members
                .iter()
                .filter(|m| *m != specified)
                .cloned()
                .collect();
            let prompt = PromptSpec::qualified(context, specified);
            let scope = format!("compliance/{specified}");
            for (method, spec) in [
                ("vanilla", GuidanceSpec::Vanilla),
                (
                    "weak_opposite",
                    GuidanceSpec::Weak {
                        alpha,
                        tau,
                        families: vec![opposite.clone()],
                        mode: EditMode::EosMasked,
                    },
                ),
                (
                    "every_position_opposite",
                    GuidanceSpec::Weak {
                        alpha,
                        tau,
                        families: vec![opposite.clone()],
                        mode: EditMode::EveryPosition,
                    },
                ),
            ] {
                let cell_started = Instant::now();
                let spec_clone = spec.clone();
                let cell =
                    sample_cell(lab, pool, seed, &scope, context, &prompt, n, move |_, _| {
                        spec_clone.clone()
                    })?;
                let value = compliance(&lab.world, &cell.samples, context, specified)?;
                output.push_row(
                    method,
                    context,
                    &format!("compliance_{specified}"),
                    value,
                    n,
                );
                push_record(
                    &mut output,
                    lab,
                    method,
                    context,
                    seed,
                    n,
                    format!("{spec:?}"),
                    cell.has_targets().then(|| cell.targets.clone()),
                    BTreeMap::from([(format!("compliance_{specified}"), value)]),
                    cell_started,
                );
            }
        }
    }
    finish_summary(&mut output, lab, seed, started);
    Ok(output)
}

/// World and schedule invariant suite: structural checks plus seeded
/// Monte Carlo checks of the calibration contracts.
pub fn validate_world(lab: &Lab, pool: &ThreadPool, seed: u64) -> Result<RunOutput> {
    let started = Instant::now();
    let mut output = RunOutput::new("validate_world");
    let mut all_pass = true;
    let mut push_check = |output: &mut RunOutput, name: &str, pass: bool, value: f64| {
        output.push_row("invariant", "world", name, value, 0);
        output.push_row(
            "invariant",
            "world",
            &format!("{name}_pass"),
            f64::from(pass),
            0,
        );
        all_pass &= pass;
    };

    for (name, pass, _detail) in lab.world.validate(&lab.codec) {
        push_check(&mut output, &name, pass, f64::from(pass));
    }

    // neutral prompts reproduce the prior table exactly, except for tokens
    // with a declared pull
    let pulled: Vec<&str> = lab
        .config
        .codec
        .pull
        .iter()
        .map(|p| p.token.as_str())
        .collect();
    let mut worst_prior_gap = 0.0f64;
    for ctx in lab.world.contexts() {
        if ctx.is_object() || pulled.contains(&ctx.id.as_str()) {
            continue;
        }
        let c = lab.codec.encode(&PromptSpec::context(&ctx.id))?;
        let m = lab.world.mixture_for(&lab.codec, &c, &ctx.id)?;
        let prior = ctx.prior_weights().unwrap();
        for (a, b) in m.weights.iter().zip(&prior) {
            worst_prior_gap = worst_prior_gap.max((a - b).abs());
        }
    }
    push_check(
        &mut output,
        "neutral_prompts_match_priors",
        worst_prior_gap < 1e-9,
        worst_prior_gap,
    );

    // an explicit qualifier must dominate every context it applies to
    let mut worst_qualifier = 1.0f64;
    for ctx in lab.world.contexts() {
        let Some(comps) = ctx.components() else {
            continue;
        };
        let mut attrs: Vec<&String> = comps.iter().flat_map(|c| c.parts.iter()).collect();
        attrs.sort();
        attrs.dedup();
        for attr in attrs {
            let c = lab.codec.encode(&PromptSpec::qualified(&ctx.id, attr))?;
            let m = lab.world.mixture_for(&lab.codec, &c, &ctx.id)?;
            let mass: f64 = m
                .weights
                .iter()
                .zip(&m.labels)
                .filter(|(_, l)| l.split('+').any(|p| p == attr))
                .map(|(w, _)| w)
                .sum();
            worst_qualifier = worst_qualifier.min(mass);
        }
    }
    push_check(
        &mut output,
        "qualifier_weight_at_least_0_99",
        worst_qualifier >= 0.99,
        worst_qualifier,
    );

    // Bayes classification of ground-truth draws
    let mut worst_accuracy = 1.0f64;
    let accuracy_n = 2000;
    for ctx in lab.world.contexts() {
        if ctx.is_object() {
            continue;
        }
        let mut rng = derive_rng(
            seed,
            &[fnv1a64(b"validate/acc"), fnv1a64(ctx.id.as_bytes())],
        );
        let draws = lab
            .world
            .sample_oracle(&lab.codec, &ctx.id, None, accuracy_n, &mut rng)?;
        let correct = pool.install(|| {
            draws
                .par_iter()
                .map(|(x, label)| {
                    usize::from(lab.world.classify(x, &ctx.id).unwrap().attribute == *label)
                })
                .sum::<usize>()
        });
        worst_accuracy = worst_accuracy.min(correct as f64 / accuracy_n as f64);
    }
    push_check(
        &mut output,
        "classifier_accuracy_at_least_0_99",
        worst_accuracy >= 0.99,
        worst_accuracy,
    );

    // oracle frequencies of the flagship context stay inside the binomial
    // band around the prior table
    {
        let freq_n = 2000;
        let mut rng = derive_rng(seed, &[fnv1a64(b"validate/freq")]);
        let samples: Vec<Vec<f64>> = lab
            .world
            .sample_oracle(&lab.codec, "ceo", None, freq_n, &mut rng)?
            .into_iter()
            .map(|(x, _)| x)
            .collect();
        let report = attribute_ratio(&lab.world, &samples, "ceo")?;
        let prior = lab.world.context("ceo")?.prior_weights().unwrap();
        let mut ok = true;
        let mut worst = 0.0f64;
        for (got, want) in report.ratios().iter().zip(&prior) {
            let hw = weakguide_core::stats::binomial_ci_half_width(*want, freq_n, 0.99);
            worst = worst.max((got - want).abs() / hw);
            ok &= (got - want).abs() <= hw;
        }
        push_check(&mut output, "oracle_frequencies_match_priors", ok, worst);
    }

    // terminal diffusion is numerically standard normal
    {
        let c = lab.codec.encode(&PromptSpec::context("ceo"))?;
        let terminal = lab
            .world
            .mixture_for(&lab.codec, &c, "ceo")?
            .diffuse(lab.schedule.abar(lab.schedule.steps())?)?;
        let unit = weakguide_core::world::MixtureParams {
            weights: vec![1.0],
            means: vec![vec![0.0; lab.world.dim()]],
            covs: vec![weakguide_core::gaussian::SpdMatrix::isotropic(
                lab.world.dim(),
                1.0,
            )],
            labels: vec!["reference".to_string()],
        };
        let mut rng = derive_rng(seed, &[fnv1a64(b"validate/kl")]);
        let kl_n = 20000;
        let mut kl = 0.0;
        for _ in 0..kl_n {
            let (x, _) = terminal.sample(&mut rng)?;
            kl += terminal.log_density(&x)? - unit.log_density(&x)?;
        }
        kl /= kl_n as f64;
        push_check(&mut output, "terminal_kl_below_1e_3", kl.abs() < 1e-3, kl);
    }

    output.push_row("invariant", "world", "all_pass", f64::from(all_pass), 0);
    push_record(
        &mut output,
        lab,
        "invariant",
        "world",
        seed,
        0,
        "invariant suite".to_string(),
        None,
        BTreeMap::from([("all_pass".to_string(), f64::from(all_pass))]),
        started,
    );
    finish_summary(&mut output, lab, seed, started);
    Ok(output)
}
