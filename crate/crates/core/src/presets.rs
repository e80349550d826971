//! The bundled default laboratory: codec geometry, world constants, and
//! noise schedule. The shipped `configs/default.toml` mirrors these values;
//! the harness cross-checks the two so they cannot drift apart.
//!
//! World constants: data lives in R^2, components sit on a circle of radius
//! 3 with isotropic sigma = 0.5 (pairwise separation is at least 4 sigma
//! everywhere), and per-context prior ratios copy the skew measured on a
//! production text-to-image model for the same professions, so experiment
//! analogs are qualitatively comparable. The coupling strength is
//! calibrated so that an explicit qualifier token wins against the worst
//! prior while an EOS-masked weak edit produces a large but not total
//! shift.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use libm::{cos, sin};

use crate::codec::{Codec, CodecParams, TokenPull};
use crate::diffusion::DiffusionSchedule;
use crate::gaussian::SpdMatrix;
use crate::world::{AttributeFamily, ComponentSpec, ContextSpec, WorldSpec};

/// Data-space dimension of the default world.
pub const DEFAULT_DIM: usize = 2;
/// Component standard deviation.
pub const DEFAULT_SIGMA: f64 = 0.5;
/// Radius of the circle the component means sit on.
pub const DEFAULT_RADIUS: f64 = 3.0;
/// Readout-to-weight coupling strength.
pub const DEFAULT_COUPLING: f64 = 120.0;
/// Prototype pull of the sweep context toward its majority attribute.
pub const DEFAULT_TEACHER_PULL: f64 = 0.005;
/// Default guidance scale for guided runs.
pub const DEFAULT_ALPHA: f64 = 6.0;
/// Default exclusive window for weak steering.
pub const DEFAULT_TAU: f64 = 0.9;

/// Golden-angle increment used to spread context geometries around the
/// circle so no two contexts share component locations.
const GOLDEN_ANGLE: f64 = 2.399963229728653;

/// (context, minor attribute, minor ratio) for the eight biased contexts.
/// The majority attribute is the other member of the gender family.
pub const BIASED_CONTEXTS: [(&str, &str, f64); 8] = [
    ("ceo", "female", 0.030),
    ("doctor", "female", 0.081),
    ("pilot", "female", 0.150),
    ("technician", "female", 0.007),
    ("fashion_designer", "male", 0.078),
    ("librarian", "male", 0.194),
    ("teacher", "male", 0.222),
    ("nurse", "male", 0.007),
];

/// Object contexts: subject, mean.
pub const OBJECT_CONTEXTS: [(&str, [f64; 2]); 3] = [
    ("car", [2.2, -1.4]),
    ("bridge", [-2.6, 1.1]),
    ("teapot", [0.8, 2.9]),
];

/// The two-family context used for simultaneous multi-axis steering.
pub const MULTI_AXIS_CONTEXT: &str = "executive";

pub fn default_codec_params() -> CodecParams {
    CodecParams::default()
}

/// Codec over the default vocabulary: four attribute tokens spanning two
/// families, the context tokens, and a handful of fillers.
pub fn default_codec() -> Codec {
    let attributes: Vec<String> = ["female", "male", "north", "south"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut tokens: Vec<String> = BIASED_CONTEXTS
        .iter()
        .map(|(c, _, _)| c.to_string())
        .collect();
    tokens.push(MULTI_AXIS_CONTEXT.to_string());
    tokens.extend(OBJECT_CONTEXTS.iter().map(|(c, _)| c.to_string()));
    tokens.extend(
        ["a", "an", "photo", "of", "portrait"]
            .iter()
            .map(|s| s.to_string()),
    );
    // the sweep context leans slightly toward its majority attribute, the
    // hook that makes guidance-scale sweeps move the attribute ratio
    let pulls = vec![TokenPull {
        token: "teacher".to_string(),
        attribute: "female".to_string(),
        weight: DEFAULT_TEACHER_PULL,
    }];
    Codec::new(default_codec_params(), &attributes, &tokens, &pulls)
        .expect("default codec must build")
}

/// The default world over the default codec.
pub fn default_world(codec: &Codec) -> WorldSpec {
    let families = vec![
        AttributeFamily {
            name: "gender".to_string(),
            members: vec!["female".to_string(), "male".to_string()],
        },
        AttributeFamily {
            name: "origin".to_string(),
            members: vec!["north".to_string(), "south".to_string()],
        },
    ];

    let mut specs = Vec::new();
    let mut context_index = 0usize;
    let mut next_angle = move || {
        let a = GOLDEN_ANGLE * context_index as f64;
        context_index += 1;
        a
    };

    for (id, minor, minor_ratio) in BIASED_CONTEXTS {
        let angle = next_angle();
        let (female, male) = if minor == "female" {
            (minor_ratio, 1.0 - minor_ratio)
        } else {
            (1.0 - minor_ratio, minor_ratio)
        };
        specs.push(ContextSpec {
            id: id.to_string(),
            components: vec![
                binary_component("female", female, angle),
                binary_component("male", male, angle + core::f64::consts::PI),
            ],
            object: None,
        });
    }

    // two-family product context: gender marginal 0.10 female, origin
    // marginal 0.25 north, independent
    {
        let angle = next_angle();
        let mut components = Vec::new();
        let table = [
            (vec!["female", "north"], 0.10 * 0.25),
            (vec!["female", "south"], 0.10 * 0.75),
            (vec!["male", "north"], 0.90 * 0.25),
            (vec!["male", "south"], 0.90 * 0.75),
        ];
        for (k, (parts, prior)) in table.iter().enumerate() {
            let a = angle + core::f64::consts::FRAC_PI_2 * k as f64;
            components.push(ComponentSpec {
                parts: parts.iter().map(|s| s.to_string()).collect(),
                prior: *prior,
                mean: circle_point(a),
                cov: SpdMatrix::isotropic(DEFAULT_DIM, DEFAULT_SIGMA),
            });
        }
        specs.push(ContextSpec {
            id: MULTI_AXIS_CONTEXT.to_string(),
            components,
            object: None,
        });
    }

    for (id, mean) in OBJECT_CONTEXTS {
        specs.push(ContextSpec {
            id: id.to_string(),
            components: Vec::new(),
            object: Some((
                mean.to_vec(),
                SpdMatrix::isotropic(DEFAULT_DIM, DEFAULT_SIGMA),
            )),
        });
    }

    WorldSpec::new(DEFAULT_DIM, DEFAULT_COUPLING, families, specs, codec)
        .expect("default world must build")
}

/// Default variance-preserving schedule: a 200-step squared-cosine curve.
/// The cosine shape keeps low-noise steps gentle, and the step count gives
/// the first-order ancestral sampler enough resolution that its within-mode
/// dispersion and mode-allocation errors stay below what the acceptance
/// statistics can detect. Higher-order integrators reach similar accuracy
/// in far fewer steps, but those are out of scope here.
pub fn default_schedule() -> DiffusionSchedule {
    DiffusionSchedule::cosine(200).expect("default schedule must build")
}

fn binary_component(part: &str, prior: f64, angle: f64) -> ComponentSpec {
    ComponentSpec {
        parts: vec![part.to_string()],
        prior,
        mean: circle_point(angle),
        cov: SpdMatrix::isotropic(DEFAULT_DIM, DEFAULT_SIGMA),
    }
}

fn circle_point(angle: f64) -> Vec<f64> {
    vec![DEFAULT_RADIUS * cos(angle), DEFAULT_RADIUS * sin(angle)]
}
