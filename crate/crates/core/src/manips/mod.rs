//! The manipulation catalog: ten parametric degradations plus the identity,
//! forming 22 classes, and the eight families whose two parameters have a
//! known aesthetic ordering.

mod jpeg;
mod ops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use jpeg::{jpeg_simulate, quant_tables, BASE_CHROMA_TABLE, BASE_LUMA_TABLE};
pub use ops::{apply, gaussian_kernel};

/// Version tag embedded in manifests and checkpoints. Bump whenever the
/// order or content of [`catalog`] changes.
pub const CATALOG_VERSION: &str = "ssae-catalog/22.1";

/// Number of pretext classes.
pub const NUM_CLASSES: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpFamily {
    None,
    JpegCompression,
    GaussianNoise,
    Rotation,
    Downsampling,
    Quantization,
    Pixelation,
    Exposure,
    GaussianBlur,
    PatchShuffle,
    Mixup,
}

impl OpFamily {
    pub const ALL: [OpFamily; 11] = [
        OpFamily::None,
        OpFamily::JpegCompression,
        OpFamily::GaussianNoise,
        OpFamily::Rotation,
        OpFamily::Downsampling,
        OpFamily::Quantization,
        OpFamily::Pixelation,
        OpFamily::Exposure,
        OpFamily::GaussianBlur,
        OpFamily::PatchShuffle,
        OpFamily::Mixup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpFamily::None => "none",
            OpFamily::JpegCompression => "jpeg",
            OpFamily::GaussianNoise => "noise",
            OpFamily::Rotation => "rotation",
            OpFamily::Downsampling => "downsample",
            OpFamily::Quantization => "quantize",
            OpFamily::Pixelation => "pixelate",
            OpFamily::Exposure => "exposure",
            OpFamily::GaussianBlur => "blur",
            OpFamily::PatchShuffle => "shuffle",
            OpFamily::Mixup => "mixup",
        }
    }

    /// Attribute group; `None` for the identity.
    pub fn group(self) -> Option<AttributeGroup> {
        use AttributeGroup::*;
        Some(match self {
            OpFamily::None => return None,
            OpFamily::JpegCompression | OpFamily::GaussianNoise => MuchNoise,
            OpFamily::Rotation => CameraShake,
            OpFamily::Downsampling | OpFamily::Quantization | OpFamily::Pixelation => SoftGrainy,
            OpFamily::Exposure => PoorLighting,
            OpFamily::GaussianBlur => Fuzzy,
            OpFamily::PatchShuffle | OpFamily::Mixup => Distracting,
        })
    }

    pub fn needs_partner(self) -> bool {
        self == OpFamily::Mixup
    }
}

impl fmt::Display for OpFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpFamily::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| invalid!("unknown operation family '{s}'"))
    }
}

/// Perceptual attribute a family degrades; the unit of ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttributeGroup {
    #[serde(rename = "Much noise")]
    MuchNoise,
    #[serde(rename = "Camera shake")]
    CameraShake,
    #[serde(rename = "Soft / Grainy")]
    SoftGrainy,
    #[serde(rename = "Poor lighting")]
    PoorLighting,
    #[serde(rename = "Fuzzy")]
    Fuzzy,
    #[serde(rename = "Distracting")]
    Distracting,
}

impl AttributeGroup {
    pub const ALL: [AttributeGroup; 6] = [
        AttributeGroup::MuchNoise,
        AttributeGroup::CameraShake,
        AttributeGroup::SoftGrainy,
        AttributeGroup::PoorLighting,
        AttributeGroup::Fuzzy,
        AttributeGroup::Distracting,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AttributeGroup::MuchNoise => "Much noise",
            AttributeGroup::CameraShake => "Camera shake",
            AttributeGroup::SoftGrainy => "Soft / Grainy",
            AttributeGroup::PoorLighting => "Poor lighting",
            AttributeGroup::Fuzzy => "Fuzzy",
            AttributeGroup::Distracting => "Distracting",
        }
    }
}

impl fmt::Display for AttributeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AttributeGroup {
    type Err = Error;

    /// Case-insensitive; whitespace around the slash is ignored.
    fn from_str(s: &str) -> Result<Self> {
        let norm = |x: &str| -> String {
            x.chars()
                .filter(|c| !c.is_whitespace())
                .flat_map(char::to_lowercase)
                .collect()
        };
        let key = norm(s);
        AttributeGroup::ALL
            .into_iter()
            .find(|g| norm(g.label()) == key)
            .ok_or_else(|| invalid!("unknown attribute group '{s}'"))
    }
}

/// An operation family with one parameter value.
///
/// Parameter meaning per family: JPEG quality (1–100), noise variance on
/// the unit scale, rotation degrees, downsampling factor, quantization
/// levels, pixelation block size, exposure gain, blur sigma in pixels,
/// shuffled-cell fraction, mixup blend weight of the partner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Manipulation {
    pub family: OpFamily,
    pub param: f64,
}

impl Manipulation {
    pub const IDENTITY: Manipulation = Manipulation {
        family: OpFamily::None,
        param: 0.0,
    };

    pub fn new(family: OpFamily, param: f64) -> Self {
        Manipulation { family, param }
    }
}

impl fmt::Display for Manipulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.family == OpFamily::None {
            f.write_str("none")
        } else {
            write!(f, "{}({})", self.family, self.param)
        }
    }
}

/// A catalog entry: a manipulation and its pretext class index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManipulationSpec {
    pub manipulation: Manipulation,
    pub class_index: usize,
}

impl ManipulationSpec {
    pub fn family(&self) -> OpFamily {
        self.manipulation.family
    }

    pub fn param(&self) -> f64 {
        self.manipulation.param
    }

    /// Catalog entry for a class index.
    pub fn from_class(class_index: usize) -> Result<ManipulationSpec> {
        catalog()
            .get(class_index)
            .copied()
            .ok_or_else(|| invalid!("class index {class_index} outside [0, {NUM_CLASSES})"))
    }

    /// Catalog entry matching `(family, param)` exactly.
    pub fn lookup(family: OpFamily, param: f64) -> Option<ManipulationSpec> {
        catalog()
            .iter()
            .find(|s| s.family() == family && (family == OpFamily::None || s.param() == param))
            .copied()
    }

    pub fn ordered_pair(&self) -> Option<OrderedPair> {
        ordered_pairs()
            .into_iter()
            .find(|p| p.family == self.family())
    }
}

impl fmt::Display for ManipulationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} {}", self.class_index, self.manipulation)
    }
}

// Catalog order defines the class indices and is part of the checkpoint
// contract. For families with an ordered pair the mild parameter comes first.
const CATALOG: [(OpFamily, f64); NUM_CLASSES] = [
    (OpFamily::None, 0.0),
    (OpFamily::JpegCompression, 60.0),
    (OpFamily::JpegCompression, 10.0),
    (OpFamily::GaussianNoise, 0.2),
    (OpFamily::GaussianNoise, 0.8),
    (OpFamily::Rotation, 90.0),
    (OpFamily::Rotation, 180.0),
    (OpFamily::Rotation, 270.0),
    (OpFamily::Downsampling, 4.0),
    (OpFamily::Downsampling, 6.0),
    (OpFamily::Quantization, 64.0),
    (OpFamily::Quantization, 8.0),
    (OpFamily::Pixelation, 4.0),
    (OpFamily::Pixelation, 8.0),
    (OpFamily::Exposure, 0.5),
    (OpFamily::Exposure, 3.0),
    (OpFamily::GaussianBlur, 0.2),
    (OpFamily::GaussianBlur, 0.8),
    (OpFamily::PatchShuffle, 0.1),
    (OpFamily::PatchShuffle, 0.5),
    (OpFamily::Mixup, 0.1),
    (OpFamily::Mixup, 0.4),
];

/// All 22 pretext classes, identity first.
pub fn catalog() -> Vec<ManipulationSpec> {
    CATALOG
        .iter()
        .enumerate()
        .map(|(class_index, &(family, param))| ManipulationSpec {
            manipulation: Manipulation::new(family, param),
            class_index,
        })
        .collect()
}

/// Catalog entries whose family is not in `excluded`, identity excluded.
pub fn degrading_specs(excluded: &[AttributeGroup]) -> Vec<ManipulationSpec> {
    catalog()
        .into_iter()
        .filter(|s| match s.family().group() {
            None => false,
            Some(g) => !excluded.contains(&g),
        })
        .collect()
}

/// Two parameters of one family, `mild` producing the aesthetically better
/// output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderedPair {
    pub family: OpFamily,
    pub mild: ManipulationSpec,
    pub severe: ManipulationSpec,
}

/// The eight ordered pairs; rotation and exposure have no aesthetic order.
pub fn ordered_pairs() -> Vec<OrderedPair> {
    let cat = catalog();
    OpFamily::ALL
        .into_iter()
        .filter(|f| {
            !matches!(
                f,
                OpFamily::None | OpFamily::Rotation | OpFamily::Exposure
            )
        })
        .map(|family| {
            let members: Vec<_> = cat.iter().filter(|s| s.family() == family).collect();
            OrderedPair {
                family,
                mild: *members[0],
                severe: *members[1],
            }
        })
        .collect()
}
