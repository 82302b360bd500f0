//! Ground-truth annotations and the (distance, visibility) strata.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StratumError {
    #[error("distance must be one of 10, 30, 50, 70, 90 m, got {0}")]
    InvalidDistance(u32),
    #[error("visibility must be a multiple of 10 in 10..=100, got {0}")]
    InvalidVisibility(u32),
}

/// Flight altitude label of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Distance {
    D10,
    D30,
    D50,
    D70,
    D90,
}

impl Distance {
    pub const ALL: [Distance; 5] = [
        Distance::D10,
        Distance::D30,
        Distance::D50,
        Distance::D70,
        Distance::D90,
    ];

    pub fn meters(self) -> u32 {
        match self {
            Distance::D10 => 10,
            Distance::D30 => 30,
            Distance::D50 => 50,
            Distance::D70 => 70,
            Distance::D90 => 90,
        }
    }
}

impl TryFrom<u32> for Distance {
    type Error = StratumError;

    fn try_from(m: u32) -> Result<Self, Self::Error> {
        match m {
            10 => Ok(Distance::D10),
            30 => Ok(Distance::D30),
            50 => Ok(Distance::D50),
            70 => Ok(Distance::D70),
            90 => Ok(Distance::D90),
            other => Err(StratumError::InvalidDistance(other)),
        }
    }
}

impl From<Distance> for u32 {
    fn from(d: Distance) -> u32 {
        d.meters()
    }
}

/// Visibility label in percent, the inverse of occlusion: 10, 20, ..., 100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Visibility(u8);

impl Visibility {
    pub fn new(pct: u32) -> Result<Self, StratumError> {
        if (10..=100).contains(&pct) && pct.is_multiple_of(10) {
            Ok(Self(pct as u8))
        } else {
            Err(StratumError::InvalidVisibility(pct))
        }
    }

    pub fn pct(self) -> u32 {
        u32::from(self.0)
    }

    pub fn all() -> impl Iterator<Item = Visibility> {
        (1..=10).map(|k| Visibility(k * 10))
    }
}

impl TryFrom<u32> for Visibility {
    type Error = StratumError;

    fn try_from(pct: u32) -> Result<Self, Self::Error> {
        Visibility::new(pct)
    }
}

impl From<Visibility> for u32 {
    fn from(v: Visibility) -> u32 {
        v.pct()
    }
}

/// One (distance, visibility) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StratumKey {
    pub distance_m: Distance,
    pub visibility_pct: Visibility,
}

impl StratumKey {
    pub fn new(distance_m: Distance, visibility_pct: Visibility) -> Self {
        Self {
            distance_m,
            visibility_pct,
        }
    }

    pub fn from_raw(distance_m: u32, visibility_pct: u32) -> Result<Self, StratumError> {
        Ok(Self::new(
            Distance::try_from(distance_m)?,
            Visibility::new(visibility_pct)?,
        ))
    }

    /// All 50 strata, distance-major.
    pub fn all() -> impl Iterator<Item = StratumKey> {
        Distance::ALL
            .into_iter()
            .flat_map(|d| Visibility::all().map(move |v| StratumKey::new(d, v)))
    }
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}m/{}%",
            self.distance_m.meters(),
            self.visibility_pct.pct()
        )
    }
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("actor_id must be in 1..=100, got {0}")]
    InvalidActor(u32),
    #[error("gt_box of {image_id} exceeds the {width}x{height} image")]
    BoxOutOfImage {
        image_id: String,
        width: u32,
        height: u32,
    },
    #[error("image dimensions must be positive")]
    EmptyImage,
    #[error("duplicate image_id {0}")]
    DuplicateImage(String),
}

/// Ground-truth person box with its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub actor_id: u32,
    pub distance_m: Distance,
    pub visibility_pct: Visibility,
    pub gt_box: BBox,
    pub image_width_px: u32,
    pub image_height_px: u32,
}

impl Annotation {
    pub fn stratum(&self) -> StratumKey {
        StratumKey::new(self.distance_m, self.visibility_pct)
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        if !(1..=100).contains(&self.actor_id) {
            return Err(AnnotationError::InvalidActor(self.actor_id));
        }
        if self.image_width_px == 0 || self.image_height_px == 0 {
            return Err(AnnotationError::EmptyImage);
        }
        if !self
            .gt_box
            .within(f64::from(self.image_width_px), f64::from(self.image_height_px))
        {
            return Err(AnnotationError::BoxOutOfImage {
                image_id: self.image_id.clone(),
                width: self.image_width_px,
                height: self.image_height_px,
            });
        }
        Ok(())
    }
}

/// Reads and validates an annotation JSON-lines file.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>, AnnotationError> {
    let anns: Vec<Annotation> = jsonl::read_strict(path)?;
    for a in &anns {
        a.validate()?;
    }
    Ok(anns)
}

pub fn write_annotations(path: &Path, anns: &[Annotation]) -> Result<(), JsonlError> {
    jsonl::write_all(path, anns)
}

/// Index by image id, rejecting duplicates.
pub fn index_annotations(
    anns: &[Annotation],
) -> Result<HashMap<String, Annotation>, AnnotationError> {
    let mut map = HashMap::with_capacity(anns.len());
    for a in anns {
        if map.insert(a.image_id.clone(), a.clone()).is_some() {
            return Err(AnnotationError::DuplicateImage(a.image_id.clone()));
        }
    }
    Ok(map)
}
