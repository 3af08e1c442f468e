use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Asl,
    T1,
    Pet,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Asl => "asl",
            Modality::T1 => "t1",
            Modality::Pet => "pet",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "asl" => Ok(Modality::Asl),
            "t1" => Ok(Modality::T1),
            "pet" => Ok(Modality::Pet),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

/// One 2D single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub modality: Modality,
    pub subject_id: u64,
}

impl Slice {
    pub fn new(pixels: Vec<f32>, height: usize, width: usize, modality: Modality, subject_id: u64) -> Self {
        assert_eq!(pixels.len(), height * width, "slice pixel count");
        Self {
            pixels,
            height,
            width,
            modality,
            subject_id,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}
