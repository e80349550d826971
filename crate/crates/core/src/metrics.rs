//! Quantitative measures over generated samples: attribute ratios, mean
//! deviation from a balanced target, discrepancy from the uniform target,
//! prompt compliance, a log-density alignment proxy, and the
//! energy-distance fidelity proxy (re-exported from [`crate::stats`]).
//!
//! Classification always goes through the world's uniform-prior Bayes
//! classifier, so the measurement instrument does not inherit the world's
//! bias.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::{Codec, CondEmbedding};
use crate::world::{AttributeFamily, WorldSpec};
use crate::{Error, Result};

pub use crate::stats::{energy_distance, energy_permutation_test, PermutationOutcome};

/// Attribute tally over a sample set for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioReport {
    pub context: String,
    /// Component labels in the context's declared order.
    pub labels: Vec<String>,
    pub counts: Vec<usize>,
    pub n: usize,
}

impl RatioReport {
    pub fn from_counts(context: &str, labels: Vec<String>, counts: Vec<usize>) -> Result<Self> {
        if labels.len() != counts.len() {
            return Err(Error::ShapeMismatch {
                expected: labels.len(),
                got: counts.len(),
            });
        }
        let n = counts.iter().sum();
        if n == 0 {
            return Err(Error::EmptySamples);
        }
        Ok(Self {
            context: context.to_string(),
            labels,
            counts,
            n,
        })
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.n as f64)
            .collect()
    }

    pub fn ratio_of(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.counts[i] as f64 / self.n as f64)
    }
}

/// Mean absolute deviation of per-attribute frequencies from the uniform
/// target `1/|S|`, plus the per-attribute deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyReport {
    pub d: f64,
    pub deviations: Vec<f64>,
}

/// Classify every sample under the context's Bayes classifier and tally
/// per-component counts.
pub fn attribute_ratio(
    world: &WorldSpec,
    samples: &[Vec<f64>],
    context: &str,
) -> Result<RatioReport> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let ctx = world.context(context)?;
    let Some(comps) = ctx.components() else {
        return Err(Error::NoAttributes(context.to_string()));
    };
    let labels: Vec<String> = comps.iter().map(|c| c.label.clone()).collect();
    let mut counts = vec![0usize; labels.len()];
    for x in samples {
        let label = world.classify(x, context)?;
        let idx = labels
            .iter()
            .position(|l| *l == label.attribute)
            .expect("classifier label must be a component label");
        counts[idx] += 1;
    }
    RatioReport::from_counts(context, labels, counts)
}

/// Mean over reports of |ratio - 0.5|; defined for binary attribute sets,
/// where the deviation is the same whichever attribute is read.
pub fn avg_delta(reports: &[RatioReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut total = 0.0;
    for r in reports {
        if r.labels.len() != 2 {
            return Err(Error::InvalidParameter(
                "avg delta is defined for binary attribute sets".into(),
            ));
        }
        let ratio = r.counts[0] as f64 / r.n as f64;
        total += (ratio - 0.5).abs();
    }
    Ok(total / reports.len() as f64)
}

/// Discrepancy from the uniform target: `(1/|S|) * sum_s |ratio_s - 1/|S||`.
pub fn discrepancy(report: &RatioReport) -> Result<DiscrepancyReport> {
    let k = report.labels.len();
    if k < 2 {
        return Err(Error::InvalidParameter(
            "discrepancy needs at least two attributes".into(),
        ));
    }
    let target = 1.0 / k as f64;
    let deviations: Vec<f64> = report.ratios().iter().map(|r| (r - target).abs()).collect();
    let d = deviations.iter().sum::<f64>() / k as f64;
    Ok(DiscrepancyReport { d, deviations })
}

/// Collapse a composite-attribute report onto one family's margin: each
/// member's count is the sum over components carrying that part.
pub fn marginal_report(
    world: &WorldSpec,
    report: &RatioReport,
    family: &AttributeFamily,
) -> Result<RatioReport> {
    let ctx = world.context(&report.context)?;
    let Some(comps) = ctx.components() else {
        return Err(Error::NoAttributes(report.context.clone()));
    };
    let mut counts = vec![0usize; family.members.len()];
    for (comp, &count) in comps.iter().zip(&report.counts) {
        let mut hits = 0;
        for part in &comp.parts {
            if let Some(idx) = family.members.iter().position(|m| m == part) {
                counts[idx] += count;
                hits += 1;
            }
        }
        if hits != 1 {
            return Err(Error::InvalidParameter({
                let mut s = String::from("component `");
                s.push_str(&comp.label);
                s.push_str("` does not carry exactly one attribute of family `");
                s.push_str(&family.name);
                s.push('`');
                s
            }));
        }
    }
    RatioReport::from_counts(&report.context, family.members.clone(), counts)
}

/// Fraction of samples classified as the specified attribute (matching a
/// composite component when it carries the attribute as one of its parts).
pub fn compliance(
    world: &WorldSpec,
    samples: &[Vec<f64>],
    context: &str,
    specified: &str,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut hits = 0usize;
    for x in samples {
        let label = world.classify(x, context)?;
        if label.attribute == specified || label.attribute.split('+').any(|p| p == specified) {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Per-sample log densities under the literal prompt's mixture.
pub fn alignment_scores(
    world: &WorldSpec,
    codec: &Codec,
    samples: &[Vec<f64>],
    prompt_embedding: &CondEmbedding,
    context: &str,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mixture = world.mixture_for(codec, prompt_embedding, context)?;
    samples.iter().map(|x| mixture.log_density(x)).collect()
}

/// Mean log density under the literal prompt's mixture; higher means the
/// samples sit where the prompt says they should.
pub fn alignment_score(
    world: &WorldSpec,
    codec: &Codec,
    samples: &[Vec<f64>],
    prompt_embedding: &CondEmbedding,
    context: &str,
) -> Result<f64> {
    let scores = alignment_scores(world, codec, samples, prompt_embedding, context)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
