//! TOML experiment configuration: parsing, validation with key-level
//! diagnostics, and construction of the core codec / world / schedule.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use weakguide_core::codec::{Codec, CodecParams, TokenPull};
use weakguide_core::diffusion::DiffusionSchedule;
use weakguide_core::gaussian::SpdMatrix;
use weakguide_core::seed::fnv1a64;
use weakguide_core::world::{AttributeFamily, ComponentSpec, ContextSpec, WorldSpec};

/// Angular spacing between context geometries on the component circle.
const GOLDEN_ANGLE: f64 = 2.399963229728653;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error(transparent)]
    Core(#[from] weakguide_core::Error),
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub master_seed: u64,
    pub codec: CodecSection,
    pub world: WorldSection,
    pub schedule: ScheduleSection,
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    pub positions: usize,
    pub dim: usize,
    pub post_eos_weight: f64,
    pub summary_weight: f64,
    pub seed: u64,
    #[serde(default)]
    pub fillers: Vec<String>,
    #[serde(default)]
    pub pull: Vec<PullSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PullSection {
    pub token: String,
    pub attribute: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub dim: usize,
    pub coupling: f64,
    /// Default component scale and circle radius for auto-placed contexts.
    pub sigma: f64,
    pub radius: f64,
    #[serde(rename = "family")]
    pub families: Vec<FamilySection>,
    #[serde(rename = "context")]
    pub contexts: Vec<ContextSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySection {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSection {
    pub id: String,
    /// Single attribute family backing this context.
    #[serde(default)]
    pub family: Option<String>,
    /// Cross product of several families (composite attributes).
    #[serde(default)]
    pub family_product: Option<Vec<String>>,
    /// Prior ratios keyed by attribute label (`female` or `female+north`).
    #[serde(default)]
    pub priors: Option<BTreeMap<String, f64>>,
    /// Object context: a single unconditioned component at `mean`.
    #[serde(default)]
    pub object: bool,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    /// Explicit component means override circle placement.
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub steps: usize,
    #[serde(default)]
    pub beta_start: Option<f64>,
    #[serde(default)]
    pub beta_end: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
    ScaledLinear,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Chains per cell.
    pub n: usize,
    /// Default guidance scale for guided schemes.
    pub alpha: f64,
    /// Worker threads; 0 means one per core.
    #[serde(default)]
    pub workers: usize,
    pub mode_test: ModeTestSection,
    pub sweep_cfg: SweepCfgSection,
    pub sweep_cads: SweepCadsSection,
    pub sweep_swap: SweepSwapSection,
    pub debias: DebiasSection,
    pub compliance: ComplianceSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeTestSection {
    pub context: String,
    pub minor: String,
    pub t_star_frac: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCfgSection {
    pub context: String,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCadsSection {
    pub context: String,
    pub s_grid: Vec<f64>,
    pub tau1_grid: Vec<f64>,
    pub tau2: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSwapSection {
    pub context: String,
    pub attribute: String,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebiasSection {
    pub contexts: Vec<String>,
    pub family: String,
    pub tau: f64,
    pub multi_context: String,
    pub multi_families: Vec<String>,
    pub object_contexts: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplianceSection {
    pub contexts: Vec<String>,
    pub family: String,
    pub tau: f64,
}

/// A fully built laboratory: core objects plus identity hashes for the run
/// log.
#[derive(Debug)]
pub struct Lab {
    pub config: Config,
    pub codec: Codec,
    pub world: WorldSpec,
    pub schedule: DiffusionSchedule,
    pub codec_hash: u64,
    pub world_hash: u64,
    pub schedule_hash: u64,
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(toml::from_str(&text)?)
    }

    /// Validate and build the core objects.
    pub fn build(self) -> Result<Lab, ConfigError> {
        if self.experiment.n == 0 {
            return Err(invalid("experiment.n", "must be at least 1"));
        }

        // ---- families & attribute basis --------------------------------
        let mut attributes: Vec<String> = Vec::new();
        for fam in &self.world.families {
            if fam.members.is_empty() {
                return Err(invalid("world.family.members", "family has no members"));
            }
            for m in &fam.members {
                if attributes.contains(m) {
                    return Err(invalid(
                        "world.family.members",
                        format!("attribute `{m}` declared twice"),
                    ));
                }
                attributes.push(m.clone());
            }
        }
        if attributes.is_empty() {
            return Err(invalid("world.family", "at least one family is required"));
        }

        // ---- codec ------------------------------------------------------
        let mut tokens: Vec<String> = self.world.contexts.iter().map(|c| c.id.clone()).collect();
        tokens.extend(self.codec.fillers.iter().cloned());
        let pulls: Vec<TokenPull> = self
            .codec
            .pull
            .iter()
            .map(|p| TokenPull {
                token: p.token.clone(),
                attribute: p.attribute.clone(),
                weight: p.weight,
            })
            .collect();
        let params = CodecParams {
            positions: self.codec.positions,
            dim: self.codec.dim,
            post_eos_weight: self.codec.post_eos_weight,
            summary_weight: self.codec.summary_weight,
            seed: self.codec.seed,
        };
        let codec = Codec::new(params, &attributes, &tokens, &pulls)?;

        // ---- world ------------------------------------------------------
        let families: Vec<AttributeFamily> = self
            .world
            .families
            .iter()
            .map(|f| AttributeFamily {
                name: f.name.clone(),
                members: f.members.clone(),
            })
            .collect();
        let mut specs = Vec::new();
        for (index, ctx) in self.world.contexts.iter().enumerate() {
            let key = format!("world.context.{}", ctx.id);
            let sigma = ctx.sigma.unwrap_or(self.world.sigma);
            if ctx.object {
                let Some(mean) = ctx.mean.clone() else {
                    return Err(invalid(&key, "object contexts need a `mean`"));
                };
                specs.push(ContextSpec {
                    id: ctx.id.clone(),
                    components: Vec::new(),
                    object: Some((mean, SpdMatrix::isotropic(self.world.dim, sigma))),
                });
                continue;
            }
            // attribute labels in family order
            let labels: Vec<Vec<String>> = if let Some(product) = &ctx.family_product {
                let mut acc: Vec<Vec<String>> = vec![Vec::new()];
                for fam_name in product {
                    let fam = families
                        .iter()
                        .find(|f| &f.name == fam_name)
                        .ok_or_else(|| invalid(&key, format!("unknown family `{fam_name}`")))?;
                    let mut next = Vec::new();
                    for prefix in &acc {
                        for member in &fam.members {
                            let mut parts = prefix.clone();
                            parts.push(member.clone());
                            next.push(parts);
                        }
                    }
                    acc = next;
                }
                acc
            } else if let Some(fam_name) = &ctx.family {
                let fam = families
                    .iter()
                    .find(|f| &f.name == fam_name)
                    .ok_or_else(|| invalid(&key, format!("unknown family `{fam_name}`")))?;
                fam.members.iter().map(|m| vec![m.clone()]).collect()
            } else {
                return Err(invalid(
                    &key,
                    "attributed contexts need `family` or `family_product`",
                ));
            };
            let Some(priors) = &ctx.priors else {
                return Err(invalid(&key, "attributed contexts need `priors`"));
            };
            if priors.len() != labels.len() {
                return Err(invalid(
                    &key,
                    format!(
                        "expected {} prior entries, found {}",
                        labels.len(),
                        priors.len()
                    ),
                ));
            }
            let means: Vec<Vec<f64>> = if let Some(explicit) = &ctx.means {
                if explicit.len() != labels.len() {
                    return Err(invalid(&key, "means list does not match attribute count"));
                }
                explicit.clone()
            } else {
                if self.world.dim != 2 {
                    return Err(invalid(
                        &key,
                        "circle placement needs dim = 2 or explicit means",
                    ));
                }
                let base = GOLDEN_ANGLE * index as f64;
                let k = labels.len();
                (0..k)
                    .map(|i| {
                        let a = base + core::f64::consts::TAU * i as f64 / k as f64;
                        vec![self.world.radius * a.cos(), self.world.radius * a.sin()]
                    })
                    .collect()
            };
            let mut components = Vec::new();
            for (parts, mean) in labels.iter().zip(means) {
                let label = parts.join("+");
                let prior = *priors.get(&label).ok_or_else(|| {
                    invalid(&key, format!("priors is missing attribute `{label}`"))
                })?;
                components.push(ComponentSpec {
                    parts: parts.clone(),
                    prior,
                    mean,
                    cov: SpdMatrix::isotropic(self.world.dim, sigma),
                });
            }
            specs.push(ContextSpec {
                id: ctx.id.clone(),
                components,
                object: None,
            });
        }
        let world = WorldSpec::new(self.world.dim, self.world.coupling, families, specs, &codec)?;

        // ---- schedule ----------------------------------------------------
        let schedule = match self.schedule.kind {
            ScheduleKind::Cosine => DiffusionSchedule::cosine(self.schedule.steps)?,
            ScheduleKind::Linear => match (self.schedule.beta_start, self.schedule.beta_end) {
                (Some(a), Some(b)) => DiffusionSchedule::linear_with(self.schedule.steps, a, b)?,
                (None, None) => DiffusionSchedule::linear(self.schedule.steps)?,
                _ => {
                    return Err(invalid(
                        "schedule.beta_start",
                        "linear schedules need both beta endpoints or neither",
                    ))
                }
            },
            ScheduleKind::ScaledLinear => {
                let (Some(a), Some(b)) = (self.schedule.beta_start, self.schedule.beta_end) else {
                    return Err(invalid(
                        "schedule.beta_start",
                        "scaled_linear schedules need both beta endpoints",
                    ));
                };
                DiffusionSchedule::scaled_linear(self.schedule.steps, a, b)?
            }
        };

        // ---- experiment references --------------------------------------
        let exp = &self.experiment;
        let check_ctx = |key: &str, id: &str| -> Result<(), ConfigError> {
            world
                .context(id)
                .map(|_| ())
                .map_err(|_| invalid(key, format!("unknown context `{id}`")))
        };
        check_ctx("experiment.mode_test.context", &exp.mode_test.context)?;
        check_ctx("experiment.sweep_cfg.context", &exp.sweep_cfg.context)?;
        check_ctx("experiment.sweep_cads.context", &exp.sweep_cads.context)?;
        check_ctx("experiment.sweep_swap.context", &exp.sweep_swap.context)?;
        check_ctx("experiment.debias.multi_context", &exp.debias.multi_context)?;
        for id in &exp.debias.contexts {
            check_ctx("experiment.debias.contexts", id)?;
        }
        for id in &exp.debias.object_contexts {
            check_ctx("experiment.debias.object_contexts", id)?;
            if !world.context(id).unwrap().is_object() {
                return Err(invalid(
                    "experiment.debias.object_contexts",
                    format!("context `{id}` is not an object context"),
                ));
            }
        }
        for id in &exp.compliance.contexts {
            check_ctx("experiment.compliance.contexts", id)?;
        }
        if codec.axis(&exp.mode_test.minor).is_err() {
            return Err(invalid(
                "experiment.mode_test.minor",
                format!("unknown attribute `{}`", exp.mode_test.minor),
            ));
        }
        if !(0.0..=1.0).contains(&exp.mode_test.t_star_frac) {
            return Err(invalid(
                "experiment.mode_test.t_star_frac",
                "must be in [0, 1]",
            ));
        }
        if exp.sweep_cfg.grid.is_empty() || exp.sweep_swap.grid.is_empty() {
            return Err(invalid(
                "experiment.sweep_cfg.grid",
                "grids must be non-empty",
            ));
        }
        if exp.sweep_cads.s_grid.is_empty() || exp.sweep_cads.tau1_grid.is_empty() {
            return Err(invalid(
                "experiment.sweep_cads.s_grid",
                "grids must be non-empty",
            ));
        }
        world
            .family(&exp.debias.family)
            .map_err(|_| invalid("experiment.debias.family", "unknown family"))?;
        world
            .family(&exp.compliance.family)
            .map_err(|_| invalid("experiment.compliance.family", "unknown family"))?;
        for f in &exp.debias.multi_families {
            world
                .family(f)
                .map_err(|_| invalid("experiment.debias.multi_families", "unknown family"))?;
        }

        let codec_hash = hash_codec(&self.codec, &attributes);
        let world_hash = hash_world(&world);
        let schedule_hash = hash_schedule(&schedule);
        Ok(Lab {
            config: self,
            codec,
            world,
            schedule,
            codec_hash,
            world_hash,
            schedule_hash,
        })
    }
}

fn hash_codec(c: &CodecSection, attributes: &[String]) -> u64 {
    let mut s = String::new();
    let _ = write!(
        s,
        "{}|{}|{:x}|{:x}|{}",
        c.positions,
        c.dim,
        c.post_eos_weight.to_bits(),
        c.summary_weight.to_bits(),
        c.seed
    );
    for a in attributes {
        s.push('|');
        s.push_str(a);
    }
    for p in &c.pull {
        let _ = write!(s, "|{}:{}:{:x}", p.token, p.attribute, p.weight.to_bits());
    }
    fnv1a64(s.as_bytes())
}

fn hash_world(w: &WorldSpec) -> u64 {
    let mut s = String::new();
    let _ = write!(s, "{}|{:x}", w.dim(), w.coupling().to_bits());
    for ctx in w.contexts() {
        s.push('|');
        s.push_str(&ctx.id);
        if let Some(comps) = ctx.components() {
            for comp in comps {
                let _ = write!(s, ";{}:{:x}", comp.label, comp.prior_log.to_bits());
                for v in &comp.mean {
                    let _ = write!(s, ",{:x}", v.to_bits());
                }
            }
        }
    }
    fnv1a64(s.as_bytes())
}

fn hash_schedule(sched: &DiffusionSchedule) -> u64 {
    let mut s = String::new();
    for t in 1..=sched.steps() {
        let _ = write!(s, "{:x},", sched.beta(t).unwrap().to_bits());
    }
    fnv1a64(s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_path() -> std::path::PathBuf {
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
    }

    #[test]
    fn default_config_builds() {
        let lab = Config::from_path(&default_path()).unwrap().build().unwrap();
        assert_eq!(lab.schedule.steps(), 200);
        assert_eq!(lab.world.contexts().len(), 12);
        assert!(lab.world_hash != 0 && lab.schedule_hash != 0);
    }

    #[test]
    fn default_config_matches_the_builtin_presets() {
        use weakguide_core::presets;
        let lab = Config::from_path(&default_path()).unwrap().build().unwrap();
        let codec = presets::default_codec();
        let world = presets::default_world(&codec);
        let schedule = presets::default_schedule();
        assert_eq!(lab.schedule, schedule);
        assert_eq!(hash_world(&lab.world), hash_world(&world));
        // token geometry agrees bit-for-bit
        let p = weakguide_core::codec::PromptSpec::qualified("ceo", "female");
        assert_eq!(lab.codec.encode(&p).unwrap(), codec.encode(&p).unwrap());
    }

    #[test]
    fn unknown_context_is_reported_with_its_key() {
        let text = std::fs::read_to_string(default_path()).unwrap();
        let text = text.replace(
            "context = \"ceo\"\nminor = \"female\"",
            "context = \"astronaut\"\nminor = \"female\"",
        );
        let cfg: Config = toml::from_str(&text).unwrap();
        let err = cfg.build().unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("experiment.mode_test.context") && msg.contains("astronaut"),
            "unhelpful message: {msg}"
        );
    }

    #[test]
    fn misspelled_keys_are_rejected_at_parse_time() {
        let text = std::fs::read_to_string(default_path()).unwrap();
        let text = text.replace("master_seed", "mester_seed");
        let err = toml::from_str::<Config>(&text).unwrap_err();
        assert!(err.to_string().contains("mester_seed"));
    }

    #[test]
    fn missing_prior_entry_names_the_context() {
        let text = std::fs::read_to_string(default_path()).unwrap();
        let text = text.replace(
            "priors = { female = 0.03, male = 0.97 }",
            "priors = { female = 0.03, malez = 0.97 }",
        );
        let cfg: Config = toml::from_str(&text).unwrap();
        let err = cfg.build().unwrap_err().to_string();
        assert!(err.contains("world.context.ceo"), "message: {err}");
    }
}
