//! Ground-truth conditional data distribution: a Gaussian mixture per
//! context whose component weights respond to the condition embedding.
//!
//! The world plays two roles that a real pipeline delegates to learned
//! models. As the generator, it exposes the exact score of its diffused
//! mixture, i.e. the quantity a trained denoiser approximates. As the
//! measurement instrument, it exposes a Bayes classifier over a context's
//! attribute components with a deliberately uniform prior, so measurements
//! do not inherit the world's own bias.
//!
//! Conditioning is linear in embedding space: a context's component `k`
//! gets weight `softmax(b_k + beta * <readout(c), u_k>)`, where `b_k` are
//! the context's biased prior log-weights and `u_k` is the component's
//! steering axis (the normalized sum of its attribute-part axes). Object
//! contexts carry a single component and ignore the condition entirely.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, sqrt};
use rand::Rng;

use crate::codec::{Codec, CondEmbedding, PromptSpec};
use crate::gaussian::SpdMatrix;
use crate::stats::log_sum_exp;
use crate::{Error, Result};

/// One mixture component of an attributed context.
#[derive(Debug, Clone)]
pub struct Component {
    /// Attribute parts, one per family (e.g. `["female"]` or
    /// `["female", "north"]` for a two-family context).
    pub parts: Vec<String>,
    /// Stable label, the parts joined with `+`.
    pub label: String,
    /// Prior log-weight b_k (softmax-normalized on use).
    pub prior_log: f64,
    pub mean: Vec<f64>,
    pub cov: SpdMatrix,
    /// Unit steering axis in embedding space.
    pub axis: Vec<f64>,
}

#[derive(Debug, Clone)]
enum ContextKind {
    /// Attribute-bearing context with one component per attribute.
    Attributed(Vec<Component>),
    /// Neutral object context: a single unconditioned component.
    Object { mean: Vec<f64>, cov: SpdMatrix },
}

/// A prompt subject in the world.
#[derive(Debug, Clone)]
pub struct Context {
    pub id: String,
    kind: ContextKind,
}

impl Context {
    pub fn is_object(&self) -> bool {
        matches!(self.kind, ContextKind::Object { .. })
    }

    /// Components of an attributed context, None for objects.
    pub fn components(&self) -> Option<&[Component]> {
        match &self.kind {
            ContextKind::Attributed(c) => Some(c),
            ContextKind::Object { .. } => None,
        }
    }

    /// Prior weights softmax(b) of an attributed context.
    pub fn prior_weights(&self) -> Option<Vec<f64>> {
        self.components().map(|comps| {
            let logs: Vec<f64> = comps.iter().map(|c| c.prior_log).collect();
            softmax(&logs)
        })
    }
}

/// Declarative component input for [`WorldSpec::new`].
#[derive(Debug, Clone)]
pub struct ComponentSpec {
    pub parts: Vec<String>,
    /// Prior ratio (> 0); log is taken internally.
    pub prior: f64,
    pub mean: Vec<f64>,
    pub cov: SpdMatrix,
}

/// Declarative context input for [`WorldSpec::new`].
#[derive(Debug, Clone)]
pub struct ContextSpec {
    pub id: String,
    /// Empty for object contexts.
    pub components: Vec<ComponentSpec>,
    /// Object mean/cov when `components` is empty.
    pub object: Option<(Vec<f64>, SpdMatrix)>,
}

/// An attribute family: the uniform steering set for one bias axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeFamily {
    pub name: String,
    pub members: Vec<String>,
}

/// The ground-truth world: attribute families, contexts, and the coupling
/// strength between condition readouts and component weights.
#[derive(Debug, Clone)]
pub struct WorldSpec {
    dim: usize,
    coupling: f64,
    families: Vec<AttributeFamily>,
    contexts: Vec<Context>,
}

/// Classifier output: the argmax attribute label and the full posterior in
/// the context's component order.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesLabel {
    pub attribute: String,
    pub posterior: Vec<f64>,
}

/// Mixture parameters in data space, possibly diffused.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<SpdMatrix>,
    pub labels: Vec<String>,
}

impl MixtureParams {
    /// Variance-preserving diffusion at cumulative signal level `abar`:
    /// means scale by sqrt(abar), covariances become
    /// `abar * Sigma + (1 - abar) * I`, weights are unchanged.
    pub fn diffuse(&self, abar: f64) -> Result<MixtureParams> {
        if !(abar > 0.0 && abar <= 1.0) {
            return Err(Error::InvalidParameter("abar must lie in (0, 1]".into()));
        }
        if abar == 1.0 {
            return Ok(self.clone());
        }
        let root = sqrt(abar);
        Ok(MixtureParams {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|v| root * v).collect())
                .collect(),
            covs: self.covs.iter().map(|c| c.diffuse(abar)).collect(),
            labels: self.labels.clone(),
        })
    }

    /// Exact mixture log density.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.weights.len());
        for ((w, mean), cov) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let chol = cov.cholesky()?;
            terms.push(libm::log(*w) + chol.log_pdf(x, mean));
        }
        Ok(log_sum_exp(&terms))
    }

    /// Exact gradient of the log density: the responsibility-weighted sum
    /// of per-component Gaussian scores.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.score_at(x, 1.0)
    }

    /// Score of the mixture diffused to signal level `abar`, computed
    /// without materializing the diffused parameters.
    pub fn score_at(&self, x: &[f64], abar: f64) -> Result<Vec<f64>> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("score input"));
        }
        if !(abar > 0.0 && abar <= 1.0) {
            return Err(Error::InvalidParameter("abar must lie in (0, 1]".into()));
        }
        let k = self.weights.len();
        let root = sqrt(abar);
        let dim = x.len();
        let mut log_terms = Vec::with_capacity(k);
        let mut solves = Vec::with_capacity(k);
        let half_norm = -0.5 * dim as f64 * libm::log(2.0 * core::f64::consts::PI);
        for ((w, mean), cov) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let chol = if abar == 1.0 {
                cov.cholesky()?
            } else {
                cov.diffuse(abar).cholesky()?
            };
            // one triangular solve serves both the density and the score
            let diff: Vec<f64> = x.iter().zip(mean).map(|(xi, m)| xi - root * m).collect();
            let sol = chol.solve(&diff);
            let quad: f64 = diff.iter().zip(&sol).map(|(a, b)| a * b).sum();
            log_terms.push(libm::log(*w) + half_norm - 0.5 * (chol.log_det() + quad));
            solves.push(sol);
        }
        let lse = log_sum_exp(&log_terms);
        let mut out = vec![0.0; dim];
        for (lt, sol) in log_terms.iter().zip(&solves) {
            let resp = exp(lt - lse);
            for (o, v) in out.iter_mut().zip(sol) {
                *o -= resp * v;
            }
        }
        Ok(out)
    }

    /// Predicted noise of the diffused mixture: `-sqrt(1 - abar) * score`.
    pub fn eps_at(&self, x: &[f64], abar: f64) -> Result<Vec<f64>> {
        if abar >= 1.0 {
            return Ok(vec![0.0; x.len()]);
        }
        let factor = -sqrt(1.0 - abar);
        Ok(self
            .score_at(x, abar)?
            .into_iter()
            .map(|s| factor * s)
            .collect())
    }

    /// Draw one point and the label of the component that produced it.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<(Vec<f64>, String)> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let chol = self.covs[pick].cholesky()?;
        Ok((
            chol.sample(&self.means[pick], rng),
            self.labels[pick].clone(),
        ))
    }
}

impl WorldSpec {
    /// Assemble a world. Steering axes are resolved against the codec's
    /// attribute basis, so every component part must be a codec attribute.
    pub fn new(
        dim: usize,
        coupling: f64,
        families: Vec<AttributeFamily>,
        specs: Vec<ContextSpec>,
        codec: &Codec,
    ) -> Result<Self> {
        if !(coupling.is_finite() && coupling >= 0.0) {
            return Err(Error::InvalidParameter(
                "coupling must be finite and >= 0".into(),
            ));
        }
        let mut contexts: Vec<Context> = Vec::with_capacity(specs.len());
        for spec in specs {
            if contexts.iter().any(|c| c.id == spec.id) {
                let mut s = String::from("duplicate context `");
                s.push_str(&spec.id);
                s.push('`');
                return Err(Error::InvalidParameter(s));
            }
            let kind = if spec.components.is_empty() {
                let Some((mean, cov)) = spec.object else {
                    let mut s = String::from("context `");
                    s.push_str(&spec.id);
                    s.push_str("` has neither components nor an object shape");
                    return Err(Error::InvalidParameter(s));
                };
                check_dims(&spec.id, dim, &mean, &cov)?;
                ContextKind::Object { mean, cov }
            } else {
                let mut comps = Vec::with_capacity(spec.components.len());
                for cs in spec.components {
                    check_dims(&spec.id, dim, &cs.mean, &cs.cov)?;
                    if cs.prior <= 0.0 || !cs.prior.is_finite() {
                        return Err(Error::InvalidParameter(
                            "component priors must be positive".into(),
                        ));
                    }
                    let mut axis = vec![0.0; codec.dim()];
                    for part in &cs.parts {
                        let u = codec.axis(part)?;
                        for (a, v) in axis.iter_mut().zip(u) {
                            *a += v;
                        }
                    }
                    let n = sqrt(axis.iter().map(|v| v * v).sum::<f64>());
                    if n < 1e-12 {
                        return Err(Error::InvalidParameter(
                            "component has no attribute parts".into(),
                        ));
                    }
                    for a in axis.iter_mut() {
                        *a /= n;
                    }
                    comps.push(Component {
                        label: cs.parts.join("+"),
                        parts: cs.parts,
                        prior_log: libm::log(cs.prior),
                        mean: cs.mean,
                        cov: cs.cov,
                        axis,
                    });
                }
                ContextKind::Attributed(comps)
            };
            contexts.push(Context { id: spec.id, kind });
        }
        Ok(Self {
            dim,
            coupling,
            families,
            contexts,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    /// Replace the coupling strength (used by calibration tests).
    pub fn set_coupling(&mut self, coupling: f64) {
        self.coupling = coupling;
    }

    pub fn families(&self) -> &[AttributeFamily] {
        &self.families
    }

    pub fn family(&self, name: &str) -> Result<&AttributeFamily> {
        self.families
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    pub fn context(&self, id: &str) -> Result<&Context> {
        self.contexts
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::UnknownContext(id.to_string()))
    }

    /// Condition-dependent mixture for a context:
    /// `w_k ∝ exp(b_k + beta * <readout(c), u_k>)`. Object contexts return
    /// their singleton component for any condition.
    pub fn mixture_for(
        &self,
        codec: &Codec,
        c: &CondEmbedding,
        context: &str,
    ) -> Result<MixtureParams> {
        let ctx = self.context(context)?;
        match &ctx.kind {
            ContextKind::Object { mean, cov } => Ok(MixtureParams {
                weights: vec![1.0],
                means: vec![mean.clone()],
                covs: vec![cov.clone()],
                labels: vec![ctx.id.clone()],
            }),
            ContextKind::Attributed(comps) => {
                let readout = codec.readout(c);
                let logits: Vec<f64> = comps
                    .iter()
                    .map(|comp| {
                        let proj: f64 = readout.iter().zip(&comp.axis).map(|(r, u)| r * u).sum();
                        comp.prior_log + self.coupling * proj
                    })
                    .collect();
                Ok(MixtureParams {
                    weights: softmax(&logits),
                    means: comps.iter().map(|c| c.mean.clone()).collect(),
                    covs: comps.iter().map(|c| c.cov.clone()).collect(),
                    labels: comps.iter().map(|c| c.label.clone()).collect(),
                })
            }
        }
    }

    /// Exact score of the diffused conditional mixture at signal level
    /// `abar`, the quantity a trained denoiser would approximate.
    pub fn score(
        &self,
        codec: &Codec,
        z: &[f64],
        abar: f64,
        c: &CondEmbedding,
        context: &str,
    ) -> Result<Vec<f64>> {
        self.mixture_for(codec, c, context)?.score_at(z, abar)
    }

    /// Predicted noise: `-sqrt(1 - abar) * score`. Zero at abar = 1.
    pub fn eps_pred(
        &self,
        codec: &Codec,
        z: &[f64],
        abar: f64,
        c: &CondEmbedding,
        context: &str,
    ) -> Result<Vec<f64>> {
        self.mixture_for(codec, c, context)?.eps_at(z, abar)
    }

    /// Ground-truth ancestral sampler: draw `n` points directly from the
    /// conditional mixture of the prompt, with true component labels.
    pub fn sample_oracle<R: Rng>(
        &self,
        codec: &Codec,
        context: &str,
        qualifier: Option<&str>,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<(Vec<f64>, String)>> {
        let prompt = match qualifier {
            Some(q) => PromptSpec::qualified(context, q),
            None => PromptSpec::context(context),
        };
        let c = codec.encode(&prompt)?;
        let mixture = self.mixture_for(codec, &c, context)?;
        (0..n).map(|_| mixture.sample(rng)).collect()
    }

    /// Uniform-prior Bayes posterior over a context's components. The flat
    /// prior keeps the measurement from inheriting the world's bias.
    pub fn classify(&self, x: &[f64], context: &str) -> Result<BayesLabel> {
        let ctx = self.context(context)?;
        let Some(comps) = ctx.components() else {
            return Err(Error::NoAttributes(ctx.id.clone()));
        };
        let logs: Vec<f64> = comps
            .iter()
            .map(|comp| comp.cov.cholesky().map(|ch| ch.log_pdf(x, &comp.mean)))
            .collect::<Result<_>>()?;
        let posterior = softmax(&logs);
        let mut best = 0;
        for (i, p) in posterior.iter().enumerate() {
            if *p > posterior[best] {
                best = i;
            }
        }
        Ok(BayesLabel {
            attribute: comps[best].label.clone(),
            posterior,
        })
    }

    /// Exact log density of the un-diffused conditional mixture at `x`;
    /// the alignment proxy between a sample and the literal prompt.
    pub fn log_density(
        &self,
        codec: &Codec,
        x: &[f64],
        c: &CondEmbedding,
        context: &str,
    ) -> Result<f64> {
        self.mixture_for(codec, c, context)?.log_density(x)
    }

    /// Structural invariant checks, one (name, pass, detail) row each.
    pub fn validate(&self, codec: &Codec) -> Vec<(String, bool, String)> {
        let mut rows: Vec<(String, bool, String)> = Vec::new();

        let mut weights_ok = true;
        let mut spd_ok = true;
        let mut sep_worst = f64::INFINITY;
        for ctx in &self.contexts {
            match &ctx.kind {
                ContextKind::Object { cov, .. } => {
                    spd_ok &= cov.cholesky().is_ok();
                }
                ContextKind::Attributed(comps) => {
                    let w = ctx.prior_weights().unwrap();
                    let sum: f64 = w.iter().sum();
                    weights_ok &= (sum - 1.0).abs() < 1e-12 && w.iter().all(|v| *v > 0.0);
                    for comp in comps {
                        spd_ok &= comp.cov.cholesky().is_ok();
                        // diffused covariances must stay SPD along the path
                        for &abar in &[0.9, 0.5, 0.1, 1e-4] {
                            spd_ok &= comp.cov.diffuse(abar).cholesky().is_ok();
                        }
                    }
                    for i in 0..comps.len() {
                        for j in (i + 1)..comps.len() {
                            let d = dist(&comps[i].mean, &comps[j].mean);
                            let s = max_sigma(&comps[i].cov).max(max_sigma(&comps[j].cov));
                            sep_worst = sep_worst.min(d / s);
                        }
                    }
                }
            }
        }
        rows.push(("prior_weights_normalized".into(), weights_ok, String::new()));
        rows.push((
            "covariances_spd_along_diffusion".into(),
            spd_ok,
            String::new(),
        ));
        rows.push((
            "component_separation_at_least_4_sigma".into(),
            sep_worst >= 4.0,
            {
                let mut s = String::from("worst = ");
                s.push_str(&format_f64(sep_worst));
                s
            },
        ));

        let mut axes_ok = true;
        for ctx in &self.contexts {
            if let Some(comps) = ctx.components() {
                for comp in comps {
                    let n = sqrt(comp.axis.iter().map(|v| v * v).sum::<f64>());
                    axes_ok &= (n - 1.0).abs() < 1e-9;
                    for part in &comp.parts {
                        axes_ok &= codec.axis(part).is_ok();
                    }
                }
            }
        }
        rows.push((
            "component_axes_unit_and_known".into(),
            axes_ok,
            String::new(),
        ));
        rows
    }
}

fn check_dims(ctx: &str, dim: usize, mean: &[f64], cov: &SpdMatrix) -> Result<()> {
    if mean.len() != dim || cov.dim() != dim {
        let mut s = String::from("context `");
        s.push_str(ctx);
        s.push_str("` has mismatched mean/cov dimensions");
        return Err(Error::InvalidParameter(s));
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn max_sigma(cov: &SpdMatrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..cov.dim() {
        worst = worst.max(sqrt(cov.get(i, i)));
    }
    worst
}

fn format_f64(v: f64) -> String {
    let mut s = String::new();
    core::fmt::write(&mut s, format_args!("{v:.3}")).ok();
    s
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| exp(l - m)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
