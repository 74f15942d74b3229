//! Procedural miniature road-damage benchmark: rendered grayscale images,
//! pixel-exact defect masks, class labels, and templated captions.

mod caption;
mod dataset;
mod render;
mod sample;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use caption::{generate_caption, parse_caption, ParsedCaption, VOCABULARY};
pub use dataset::{
    class_counts, generate_dataset, load_dataset, write_dataset, Dataset, DatasetManifest,
    FileChecksum, Split,
};
pub use render::{render_background, render_sample};
pub use sample::{sample_spec, sample_spec_in_class};

use crate::image::{Image, Mask};

/// Metres per pixel: a 40-pixel crack reads as 2 meters.
pub const METERS_PER_PIXEL: f64 = 0.05;

/// Minimum post-overlay intensity change that counts as a visible defect pixel.
pub const DEFECT_CONTRAST_FLOOR: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DamageClass {
    Longitudinal,
    Transverse,
    Alligator,
    Pothole,
    PatchRepair,
    EdgeCrack,
    CenterlineCrack,
    Discoloration,
    Mixed,
    Irregular,
}

impl DamageClass {
    pub const ALL: [DamageClass; 10] = [
        DamageClass::Longitudinal,
        DamageClass::Transverse,
        DamageClass::Alligator,
        DamageClass::Pothole,
        DamageClass::PatchRepair,
        DamageClass::EdgeCrack,
        DamageClass::CenterlineCrack,
        DamageClass::Discoloration,
        DamageClass::Mixed,
        DamageClass::Irregular,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Phrase used in captions and class prompts.
    pub fn name(self) -> &'static str {
        match self {
            DamageClass::Longitudinal => "longitudinal crack",
            DamageClass::Transverse => "transverse crack",
            DamageClass::Alligator => "alligator cracking",
            DamageClass::Pothole => "pothole",
            DamageClass::PatchRepair => "patch repair",
            DamageClass::EdgeCrack => "edge crack",
            DamageClass::CenterlineCrack => "centerline crack",
            DamageClass::Discoloration => "discoloration",
            DamageClass::Mixed => "mixed damage",
            DamageClass::Irregular => "irregular defect",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }

    /// Default dataset weight: rare classes at half weight.
    pub fn default_weight(self) -> f64 {
        match self {
            DamageClass::Mixed | DamageClass::Irregular => 0.5,
            _ => 1.0,
        }
    }

    pub fn default_names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

impl fmt::Display for DamageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.word() == w)
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                Self::from_word(s).ok_or_else(|| format!("unknown {}: {s}", stringify!($name)))
            }
        }
    };
}

word_enum!(Severity {
    Hairline => "hairline",
    Moderate => "moderate",
    Severe => "severe",
});

word_enum!(PositionTag {
    Center => "center",
    Edge => "edge",
    Shoulder => "shoulder",
    Centerline => "centerline",
});

word_enum!(Environment {
    Bright => "bright",
    Wet => "wet",
    Foggy => "foggy",
    Dark => "dark",
});

impl Severity {
    /// Stroke width in pixels for crack-like defects.
    pub fn stroke_width(self) -> f64 {
        match self {
            Severity::Hairline => 1.5,
            Severity::Moderate => 2.5,
            Severity::Severe => 3.5,
        }
    }

    /// Fraction of the background intensity removed by the defect.
    pub fn depth(self) -> f32 {
        match self {
            Severity::Hairline => 0.45,
            Severity::Moderate => 0.6,
            Severity::Severe => 0.75,
        }
    }
}

impl PositionTag {
    /// Tag for a defect whose mask centroid sits at column fraction `u`.
    pub fn from_column_fraction(u: f64) -> Self {
        let off = (u - 0.5).abs();
        if off <= 0.06 {
            PositionTag::Centerline
        } else if off >= 0.35 {
            PositionTag::Edge
        } else if off >= 0.2 {
            PositionTag::Shoulder
        } else {
            PositionTag::Center
        }
    }
}

/// Class-specific defect geometry in pixel units. Pixel `(px, py)` covers
/// the unit square with centre `(px + 0.5, py + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Polyline {
        points: Vec<[f64; 2]>,
        width: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        w: f64,
        h: f64,
    },
    Lattice {
        x0: f64,
        y0: f64,
        size: f64,
        spacing: f64,
        width: f64,
    },
    Composite {
        parts: Vec<DefectSpec>,
    },
}

/// Everything needed to render one defect and caption it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub class: DamageClass,
    pub geometry: Geometry,
    pub severity: Severity,
    pub position: PositionTag,
    pub environment: Environment,
    /// Caption dimension in metres, rounded to 0.5 m.
    pub length_m: f64,
}

/// One benchmark record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub label: usize,
    pub caption: String,
    pub spec: DefectSpec,
}

/// Rounds a metric length to the caption resolution (0.5 m, at least 0.5).
pub fn round_dimension(m: f64) -> f64 {
    ((m * 2.0).round() / 2.0).max(0.5)
}

/// Caption formatting of a rounded dimension: `2`, `1.5`.
pub fn format_dimension(m: f64) -> String {
    if (m - m.round()).abs() < 1e-9 {
        format!("{}", m.round() as i64)
    } else {
        format!("{m:.1}")
    }
}
