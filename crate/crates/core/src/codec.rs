//! Synthetic token-structured text encoder and condition-embedding edits.
//!
//! Prompts are short token sequences laid out as
//! `[context][qualifier?][extras...][EOS][padding...]` over a fixed length
//! `L`. Every token maps to a fixed unit-norm vector derived from a seeded
//! hash, so encoding is deterministic and dependency-free. Two construction
//! rules give the embedding space its useful geometry:
//!
//! * attribute tokens span an orthonormal basis (their "axes"), and every
//!   other token is projected orthogonal to that basis, so a prompt couples
//!   to an attribute only through tokens that deliberately carry it;
//! * the end-of-sequence row blends the EOS marker with a summary of the
//!   prefix tokens, mirroring how contextual encoders concentrate sentence
//!   meaning at the terminal position. This is what lets a direction built
//!   from a one-token prompt carry its attribute into the post-EOS region.
//!
//! Context tokens may declare a small "pull" toward an attribute axis,
//! modelling prototype associations of the subject word itself; pulls are
//! what give guidance-scale sweeps a bias response.
//!
//! On top of encoding, this module implements the embedding edits used by
//! the samplers: attribute directions, EOS-masked weak addition with
//! per-row renormalization, annealed Gaussian condition noise with global
//! moment matching, and the attenuated readout that couples an embedding to
//! the data world.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::seed::{derive_rng, fnv1a64};
use crate::{Error, Result};

/// Reserved end-of-sequence token id.
pub const EOS_TOKEN: &str = "<eos>";
/// Reserved padding token id.
pub const PAD_TOKEN: &str = "<pad>";

/// Structured stand-in for a free-text prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    /// Subject of the prompt (a profession-like or object context token).
    pub context: Option<String>,
    /// Optional attribute token placed in the prefix, e.g. an explicit
    /// "female" in "a photo of a female ceo".
    pub qualifier: Option<String>,
    /// Ordered filler tokens for template variety.
    pub extra_tokens: Vec<String>,
}

impl PromptSpec {
    pub fn empty() -> Self {
        Self {
            context: None,
            qualifier: None,
            extra_tokens: Vec::new(),
        }
    }

    pub fn context(context: &str) -> Self {
        Self {
            context: Some(context.to_string()),
            qualifier: None,
            extra_tokens: Vec::new(),
        }
    }

    pub fn qualified(context: &str, qualifier: &str) -> Self {
        Self {
            context: Some(context.to_string()),
            qualifier: Some(qualifier.to_string()),
            extra_tokens: Vec::new(),
        }
    }

    pub fn with_extras(mut self, extras: &[&str]) -> Self {
        self.extra_tokens = extras.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Prefix tokens in layout order: context, qualifier, extras.
    pub fn prefix_tokens(&self) -> Vec<&str> {
        let mut out = Vec::new();
        if let Some(c) = &self.context {
            out.push(c.as_str());
        }
        if let Some(q) = &self.qualifier {
            out.push(q.as_str());
        }
        out.extend(self.extra_tokens.iter().map(String::as_str));
        out
    }
}

/// A token-structured condition embedding: `L` positions by `dim` values,
/// with the EOS marker at `eos_index` and canonical padding after it.
#[derive(Debug, Clone, PartialEq)]
pub struct CondEmbedding {
    positions: usize,
    dim: usize,
    eos_index: usize,
    data: Vec<f64>,
}

impl CondEmbedding {
    pub fn from_matrix(
        positions: usize,
        dim: usize,
        eos_index: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != positions * dim {
            return Err(Error::ShapeMismatch {
                expected: positions * dim,
                got: data.len(),
            });
        }
        if eos_index >= positions {
            return Err(Error::InvalidParameter("eos_index out of range".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("condition embedding"));
        }
        Ok(Self {
            positions,
            dim,
            eos_index,
            data,
        })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eos_index(&self) -> usize {
        self.eos_index
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        sqrt(self.row(i).iter().map(|v| v * v).sum())
    }
}

/// Sequence-shaped direction `encode(k) - encode("")` for an attribute `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeDirection {
    pub attribute: String,
    positions: usize,
    dim: usize,
    data: Vec<f64>,
}

impl AttributeDirection {
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Frobenius norm of the whole direction.
    pub fn norm(&self) -> f64 {
        sqrt(self.data.iter().map(|v| v * v).sum())
    }
}

/// Indicator mask over positions; 1 from the EOS index onward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EosMask(pub Vec<u8>);

impl EosMask {
    pub fn is_set(&self, i: usize) -> bool {
        self.0[i] == 1
    }
}

/// Where an additive edit applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditMode {
    /// Only positions from the EOS index onward, prefix rows untouched.
    EosMasked,
    /// Every position, including the prompt prefix.
    EveryPosition,
}

/// Annealed condition-noise parameters: scale `s` and the ramp `(tau1, tau2)`
/// over normalized time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CadsParams {
    pub s: f64,
    pub tau1: f64,
    pub tau2: f64,
}

impl CadsParams {
    pub fn new(s: f64, tau1: f64, tau2: f64) -> Result<Self> {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::InvalidParameter(
                "cads scale must be finite and >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&tau1) || !(0.0..=1.0).contains(&tau2) || tau1 >= tau2 {
            return Err(Error::InvalidParameter(
                "cads ramp requires 0 <= tau1 < tau2 <= 1".into(),
            ));
        }
        Ok(Self { s, tau1, tau2 })
    }

    /// Annealing coefficient: 1 up to `tau1`, linear ramp down, 0 from `tau2`.
    /// Both boundaries belong to their flat branch.
    pub fn gamma(&self, t: f64) -> f64 {
        if t <= self.tau1 {
            1.0
        } else if t >= self.tau2 {
            0.0
        } else {
            (self.tau2 - t) / (self.tau2 - self.tau1)
        }
    }
}

/// A context token's deliberate lean toward an attribute axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPull {
    pub token: String,
    pub attribute: String,
    pub weight: f64,
}

/// Codec construction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    /// Sequence length L.
    pub positions: usize,
    /// Embedding dimension d.
    pub dim: usize,
    /// Readout attenuation for positions at and after the EOS marker.
    pub post_eos_weight: f64,
    /// Weight of the prefix summary blended into the EOS row.
    pub summary_weight: f64,
    /// Seed for the token-embedding geometry.
    pub seed: u64,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            positions: 16,
            dim: 32,
            post_eos_weight: 0.25,
            summary_weight: 2.0,
            seed: 0x00C0_DEC5,
        }
    }
}

/// Deterministic synthetic text encoder with a closed vocabulary.
#[derive(Debug, Clone)]
pub struct Codec {
    params: CodecParams,
    vocab: BTreeMap<String, Vec<f64>>,
    /// attribute id -> index into `axes`
    attribute_index: BTreeMap<String, usize>,
    /// orthonormal attribute axes, declaration order
    axes: Vec<Vec<f64>>,
}

impl Codec {
    /// Build a codec over `attributes` (the privileged steering tokens, in a
    /// fixed order), plus arbitrary `other_tokens` (contexts and fillers).
    /// `pulls` lean named non-attribute tokens toward attribute axes.
    pub fn new(
        params: CodecParams,
        attributes: &[String],
        other_tokens: &[String],
        pulls: &[TokenPull],
    ) -> Result<Self> {
        if params.positions < 2 {
            return Err(Error::InvalidParameter(
                "codec needs at least 2 positions".into(),
            ));
        }
        if params.dim < attributes.len() + 1 {
            return Err(Error::InvalidParameter(
                "embedding dim must exceed the attribute count".into(),
            ));
        }
        if !(0.0..=1.0).contains(&params.post_eos_weight) {
            return Err(Error::InvalidParameter(
                "post_eos_weight must be in [0, 1]".into(),
            ));
        }

        // Orthonormal attribute basis, Gram-Schmidt in declaration order.
        let mut axes: Vec<Vec<f64>> = Vec::with_capacity(attributes.len());
        let mut attribute_index = BTreeMap::new();
        for (i, attr) in attributes.iter().enumerate() {
            if attribute_index.contains_key(attr) {
                return Err(Error::InvalidParameter(format_dup(attr)));
            }
            let mut v = raw_unit_vector(params.seed, attr, params.dim);
            for u in &axes {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= proj * y;
                }
            }
            let n = norm(&v);
            if n < 1e-6 {
                return Err(Error::InvalidParameter(
                    "attribute axes are linearly dependent".into(),
                ));
            }
            for x in v.iter_mut() {
                *x /= n;
            }
            axes.push(v);
            attribute_index.insert(attr.clone(), i);
        }

        let mut pull_map: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
        for p in pulls {
            let Some(&idx) = attribute_index.get(&p.attribute) else {
                return Err(Error::UnknownAttribute(p.attribute.clone()));
            };
            pull_map
                .entry(p.token.as_str())
                .or_default()
                .push((idx, p.weight));
        }

        let mut vocab = BTreeMap::new();
        for (attr, &i) in &attribute_index {
            vocab.insert(attr.clone(), axes[i].clone());
        }
        let specials = [EOS_TOKEN.to_string(), PAD_TOKEN.to_string()];
        for token in other_tokens.iter().chain(specials.iter()) {
            if vocab.contains_key(token) {
                if specials.contains(token) {
                    return Err(Error::InvalidParameter(format_dup(token)));
                }
                return Err(Error::InvalidParameter(format_dup(token)));
            }
            let mut v = raw_unit_vector(params.seed, token, params.dim);
            // strip every attribute component, then renormalize
            for u in &axes {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= proj * y;
                }
            }
            let n = norm(&v);
            if n < 1e-6 {
                return Err(Error::InvalidParameter(
                    "token collapsed onto the attribute subspace".into(),
                ));
            }
            for x in v.iter_mut() {
                *x /= n;
            }
            if let Some(ps) = pull_map.get(token.as_str()) {
                let total_sq: f64 = ps.iter().map(|(_, w)| w * w).sum();
                if total_sq >= 1.0 {
                    return Err(Error::InvalidParameter(
                        "token pull weights must satisfy sum of squares < 1".into(),
                    ));
                }
                let keep = sqrt(1.0 - total_sq);
                for x in v.iter_mut() {
                    *x *= keep;
                }
                for &(idx, w) in ps {
                    for (x, y) in v.iter_mut().zip(&axes[idx]) {
                        *x += w * y;
                    }
                }
            }
            vocab.insert(token.clone(), v);
        }

        Ok(Self {
            params,
            vocab,
            attribute_index,
            axes,
        })
    }

    pub fn params(&self) -> &CodecParams {
        &self.params
    }

    pub fn positions(&self) -> usize {
        self.params.positions
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    /// Attribute ids in axis order.
    pub fn attributes(&self) -> Vec<&str> {
        let mut out = vec![""; self.axes.len()];
        for (name, &i) in &self.attribute_index {
            out[i] = name.as_str();
        }
        out
    }

    /// Orthonormal steering axis of an attribute.
    pub fn axis(&self, attribute: &str) -> Result<&[f64]> {
        self.attribute_index
            .get(attribute)
            .map(|&i| self.axes[i].as_slice())
            .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))
    }

    /// Fixed embedding of a vocabulary token.
    pub fn token_embedding(&self, token: &str) -> Result<&[f64]> {
        self.vocab
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    /// Encode a prompt into its condition embedding.
    pub fn encode(&self, prompt: &PromptSpec) -> Result<CondEmbedding> {
        let prefix = prompt.prefix_tokens();
        self.encode_tokens(&prefix)
    }

    fn encode_tokens(&self, prefix: &[&str]) -> Result<CondEmbedding> {
        let l = self.params.positions;
        let d = self.params.dim;
        if prefix.len() > l - 1 {
            return Err(Error::PromptTooLong {
                got: prefix.len(),
                max: l - 1,
                len: l,
            });
        }
        let mut data = vec![0.0; l * d];
        let mut summary = vec![0.0; d];
        for (i, token) in prefix.iter().enumerate() {
            let e = self.token_embedding(token)?;
            data[i * d..(i + 1) * d].copy_from_slice(e);
            for (s, v) in summary.iter_mut().zip(e) {
                *s += v;
            }
        }
        if !prefix.is_empty() {
            let inv = 1.0 / prefix.len() as f64;
            for s in summary.iter_mut() {
                *s *= inv;
            }
        }
        let eos_index = prefix.len();
        // EOS row: marker blended with the prefix summary, unit-normalized.
        let eos = self.token_embedding(EOS_TOKEN)?;
        let g = self.params.summary_weight;
        let mut eos_row: Vec<f64> = eos.iter().zip(&summary).map(|(e, s)| e + g * s).collect();
        let n = norm(&eos_row);
        for x in eos_row.iter_mut() {
            *x /= n;
        }
        data[eos_index * d..(eos_index + 1) * d].copy_from_slice(&eos_row);
        let pad = self.token_embedding(PAD_TOKEN)?;
        for i in (eos_index + 1)..l {
            data[i * d..(i + 1) * d].copy_from_slice(pad);
        }
        CondEmbedding::from_matrix(l, d, eos_index, data)
    }

    /// Direction `encode(k) - encode("")`. The empty attribute gives the
    /// zero direction.
    pub fn attribute_direction(&self, attribute: &str) -> Result<AttributeDirection> {
        let l = self.params.positions;
        let d = self.params.dim;
        if attribute.is_empty() {
            return Ok(AttributeDirection {
                attribute: String::new(),
                positions: l,
                dim: d,
                data: vec![0.0; l * d],
            });
        }
        if !self.attribute_index.contains_key(attribute) {
            return Err(Error::UnknownAttribute(attribute.to_string()));
        }
        let with = self.encode_tokens(&[attribute])?;
        let empty = self.encode_tokens(&[])?;
        let data: Vec<f64> = with
            .entries()
            .iter()
            .zip(empty.entries())
            .map(|(a, b)| a - b)
            .collect();
        Ok(AttributeDirection {
            attribute: attribute.to_string(),
            positions: l,
            dim: d,
            data,
        })
    }

    /// Indicator mask: 1 at every position from the embedding's EOS onward.
    pub fn eos_mask(&self, c: &CondEmbedding) -> EosMask {
        EosMask(
            (0..c.positions())
                .map(|i| u8::from(i >= c.eos_index()))
                .collect(),
        )
    }

    /// Add an attribute direction to `c` and renormalize each edited row to
    /// its original norm. `EosMasked` leaves rows before the EOS untouched.
    pub fn apply_weak(
        &self,
        c: &CondEmbedding,
        direction: &AttributeDirection,
        mode: EditMode,
    ) -> Result<CondEmbedding> {
        self.apply_weak_sum(c, &[direction], mode)
    }

    /// Same as [`Codec::apply_weak`] with several directions summed before
    /// the single renormalization, as used for multi-axis steering.
    pub fn apply_weak_sum(
        &self,
        c: &CondEmbedding,
        directions: &[&AttributeDirection],
        mode: EditMode,
    ) -> Result<CondEmbedding> {
        for a in directions {
            if a.positions() != c.positions() || a.dim() != c.dim() {
                return Err(Error::ShapeMismatch {
                    expected: c.positions() * c.dim(),
                    got: a.positions() * a.dim(),
                });
            }
        }
        let start = match mode {
            EditMode::EosMasked => c.eos_index(),
            EditMode::EveryPosition => 0,
        };
        let mut out = c.clone();
        for i in start..c.positions() {
            let mut delta = vec![0.0; c.dim()];
            let mut any = false;
            for a in directions {
                for (dst, v) in delta.iter_mut().zip(a.row(i)) {
                    *dst += v;
                    any |= *v != 0.0;
                }
            }
            if !any {
                continue; // zero edit: row stays bit-identical
            }
            let target = c.row_norm(i);
            let edited: Vec<f64> = c.row(i).iter().zip(&delta).map(|(x, d)| x + d).collect();
            let edited_norm = sqrt(edited.iter().map(|v| v * v).sum());
            if target < 1e-12 || edited_norm < 1e-12 {
                return Err(Error::DegenerateRow { row: i });
            }
            let scale = target / edited_norm;
            for (dst, v) in out.row_mut(i).iter_mut().zip(&edited) {
                *dst = v * scale;
            }
        }
        Ok(out)
    }

    /// Attenuated row mean: prefix rows weigh 1, rows from the EOS onward
    /// weigh `post_eos_weight`, normalized by the total weight. This is the
    /// channel through which the world reads a condition.
    pub fn readout(&self, c: &CondEmbedding) -> Vec<f64> {
        let lambda = self.params.post_eos_weight;
        let mut out = vec![0.0; c.dim()];
        let mut total = 0.0;
        for i in 0..c.positions() {
            let w = if i < c.eos_index() { 1.0 } else { lambda };
            total += w;
            for (dst, v) in out.iter_mut().zip(c.row(i)) {
                *dst += w * v;
            }
        }
        for v in out.iter_mut() {
            *v /= total;
        }
        out
    }
}

/// Annealed Gaussian perturbation of a condition:
/// `sqrt(gamma) c + s sqrt(1 - gamma) n`, then an affine rescale of all
/// entries jointly so the result matches the scalar mean and standard
/// deviation of `c`. Returns `c` bit-identically whenever the formula
/// reduces to it (gamma = 1, or s = 0 where the rescale undoes the decay),
/// and consumes no randomness in those cases.
pub fn cads_perturb<R: Rng>(
    c: &CondEmbedding,
    t: f64,
    params: &CadsParams,
    rng: &mut R,
) -> CondEmbedding {
    let gamma = params.gamma(t.clamp(0.0, 1.0));
    if gamma >= 1.0 || params.s == 0.0 {
        return c.clone();
    }
    let (mean_c, std_c) = crate::stats::mean_std(c.entries());
    let root_g = sqrt(gamma);
    let noise_scale = params.s * sqrt(1.0 - gamma);
    let mut mixed: Vec<f64> = c
        .entries()
        .iter()
        .map(|&v| root_g * v + noise_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let (mean_y, std_y) = crate::stats::mean_std(&mixed);
    if std_y < 1e-12 {
        return c.clone();
    }
    let scale = std_c / std_y;
    for v in mixed.iter_mut() {
        *v = (*v - mean_y) * scale + mean_c;
    }
    CondEmbedding {
        positions: c.positions(),
        dim: c.dim(),
        eos_index: c.eos_index(),
        data: mixed,
    }
}

fn format_dup(token: &str) -> String {
    let mut s = String::from("duplicate token `");
    s.push_str(token);
    s.push('`');
    s
}

fn raw_unit_vector(seed: u64, token: &str, dim: usize) -> Vec<f64> {
    let mut rng = derive_rng(seed, &[0x70C4, fnv1a64(token.as_bytes())]);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&v);
    for x in v.iter_mut() {
        *x /= n;
    }
    v
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    sqrt(v.iter().map(|x| x * x).sum())
}
