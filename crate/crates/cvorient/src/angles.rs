//! Orientation coordinates: south-aligned shifts in degrees, the continuous
//! absolute angle-error coordinate, and conversions between fractional
//! feature bins and degrees.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CvoError, Result};

/// An orientation expressed as the clockwise shift, in degrees, of an image's
/// first column relative to geographic south. Always normalized to [0, 360).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SouthAlignedAngle {
    degrees: f64,
}

impl SouthAlignedAngle {
    /// Creates an angle, normalizing any finite input into [0, 360) with a
    /// floored modulo (so negative inputs wrap upward).
    ///
    /// # Panics
    /// Panics if `degrees` is not finite.
    pub fn new(degrees: f64) -> Self {
        assert!(degrees.is_finite(), "angle must be finite, got {degrees}");
        let mut normalized = degrees.rem_euclid(360.0);
        // rem_euclid can round up to exactly 360 for tiny negative inputs.
        if normalized >= 360.0 {
            normalized -= 360.0;
        }
        Self {
            degrees: normalized,
        }
    }

    /// The normalized value in [0, 360).
    pub fn degrees(self) -> f64 {
        self.degrees
    }
}

impl Serialize for SouthAlignedAngle {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.degrees)
    }
}

impl<'de> Deserialize<'de> for SouthAlignedAngle {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let degrees = f64::deserialize(deserializer)?;
        if !degrees.is_finite() {
            return Err(D::Error::custom("angle must be finite"));
        }
        Ok(SouthAlignedAngle::new(degrees))
    }
}

/// An absolute angular difference in degrees, always in [0, 180].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AngleError {
    degrees: f64,
}

impl AngleError {
    /// The error magnitude in [0, 180].
    pub fn degrees(self) -> f64 {
        self.degrees
    }
}

/// Absolute angular difference between two orientations along the shorter
/// arc: `180 − ||a − b| − 180|`, continuous everywhere including across the
/// 0/360 seam, with an exact 180° difference returning 180.
pub fn angle_diff(a: SouthAlignedAngle, b: SouthAlignedAngle) -> AngleError {
    let raw = (a.degrees() - b.degrees()).abs();
    AngleError {
        degrees: 180.0 - (raw - 180.0).abs(),
    }
}

/// Converts a fractional feature-bin shift to degrees: `(w / width) · 360`,
/// normalized to [0, 360).
pub fn bins_to_degrees(w: f64, width: usize) -> Result<SouthAlignedAngle> {
    if width == 0 {
        return Err(CvoError::InvalidFeatureWidth);
    }
    if !w.is_finite() {
        return Err(CvoError::InvalidValues(format!(
            "bin shift must be finite, got {w}"
        )));
    }
    Ok(SouthAlignedAngle::new(w / width as f64 * 360.0))
}

/// Converts an orientation to fractional feature bins: `θ / 360 · width`,
/// in [0, width).
pub fn degrees_to_bins(theta: SouthAlignedAngle, width: usize) -> Result<f64> {
    if width == 0 {
        return Err(CvoError::InvalidFeatureWidth);
    }
    Ok(theta.degrees() / 360.0 * width as f64)
}
