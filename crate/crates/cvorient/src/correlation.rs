//! The orientation estimator: circular cross-correlation of street features
//! against satellite features, sub-pixel refinement by feature interpolation
//! (FI) or spectral curve smoothing (CS), and alignment of satellite features
//! to an estimated shift.

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::angles::{bins_to_degrees, SouthAlignedAngle};
use crate::error::{CvoError, Result};
use crate::features::{frobenius_norm, interpolate_width, FeatureMap};

/// Which sub-pixel refinement produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinementMethod {
    /// Feature interpolation: upsample both maps, then correlate.
    Fi,
    /// Curve smoothing: correlate at coarse width, then upsample the curve
    /// by spectral zero-padding.
    Cs,
}

impl fmt::Display for RefinementMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefinementMethod::Fi => "fi",
            RefinementMethod::Cs => "cs",
        })
    }
}

impl FromStr for RefinementMethod {
    type Err = CvoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fi" | "FI" => Ok(RefinementMethod::Fi),
            "cs" | "CS" => Ok(RefinementMethod::Cs),
            other => Err(CvoError::InvalidConfig(format!(
                "unknown refinement method {other:?}, expected \"fi\" or \"cs\""
            ))),
        }
    }
}

/// Correlation scores over candidate circular shifts; index `w` holds the
/// score of shifting the satellite map left by `w` bins. The length equals
/// the satellite feature width the curve was computed over.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationCurve {
    values: Vec<f64>,
}

impl CorrelationCurve {
    /// Wraps raw scores, validating that they are non-empty and finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CvoError::InvalidDimensions(
                "correlation curve must be non-empty".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CvoError::InvalidValues(
                "correlation scores must be finite".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// An estimated orientation shift: the fractional bin position of the
/// correlation peak, its degree equivalent, the peak score, and how it was
/// obtained.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrientationEstimate {
    /// Peak position in fractional satellite-width bins, a multiple of
    /// `1/scale` in [0, W).
    pub w_est: f64,
    /// `w_est` converted to degrees over the satellite feature width.
    pub theta_est: SouthAlignedAngle,
    /// Correlation score at the peak.
    pub peak_score: f64,
    /// Refinement that produced the estimate.
    pub method: RefinementMethod,
    /// Width-scaling factor used for refinement.
    pub scale: usize,
}

/// Index of the largest value, ties broken to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Circular cross-correlation of a street map against a satellite map:
///
/// ```text
/// curve[w] = Σ_m ⟨F_g[·, m, ·], F_s[·, (m + w) mod W_s, ·]⟩
/// ```
///
/// summing over height and channels. The street width may be smaller than
/// the satellite width (limited field of view), in which case the query
/// slides over the full satellite circle. The curve has length `W_s`.
pub fn cross_correlate(f_g: &FeatureMap, f_s: &FeatureMap) -> Result<CorrelationCurve> {
    if f_g.height() != f_s.height() || f_g.channels() != f_s.channels() {
        return Err(CvoError::ShapeMismatch {
            left: f_g.shape(),
            right: f_s.shape(),
        });
    }
    let (height, w_g, channels) = f_g.shape();
    let w_s = f_s.width();
    if w_g > w_s {
        return Err(CvoError::InvalidDimensions(format!(
            "street feature width {w_g} exceeds satellite feature width {w_s}"
        )));
    }
    let g = f_g.values();
    let s = f_s.values();
    let mut curve = Vec::with_capacity(w_s);
    for w in 0..w_s {
        let mut acc = 0.0;
        for y in 0..height {
            let g_row = &g[y * w_g * channels..(y + 1) * w_g * channels];
            let s_row = &s[y * w_s * channels..(y + 1) * w_s * channels];
            for m in 0..w_g {
                let mut col = m + w;
                if col >= w_s {
                    col -= w_s;
                }
                let a = &g_row[m * channels..m * channels + channels];
                let b = &s_row[col * channels..col * channels + channels];
                for c in 0..channels {
                    acc += a[c] * b[c];
                }
            }
        }
        curve.push(acc);
    }
    CorrelationCurve::new(curve)
}

/// Estimates the orientation shift by feature interpolation: both maps are
/// upsampled `scale`-fold along the circular width axis, correlated, and the
/// peak position is returned in coarse-bin units (`w_est = argmax / scale`),
/// giving a resolving unit of `360/(scale·W_s)` degrees.
pub fn estimate_fi(f_g: &FeatureMap, f_s: &FeatureMap, scale: usize) -> Result<OrientationEstimate> {
    if scale == 0 {
        return Err(CvoError::InvalidScale);
    }
    let fine_g = interpolate_width(f_g, scale)?;
    let fine_s = interpolate_width(f_s, scale)?;
    let curve = cross_correlate(&fine_g, &fine_s)?;
    let peak = argmax(curve.values());
    let w_est = peak as f64 / scale as f64;
    Ok(OrientationEstimate {
        w_est,
        theta_est: bins_to_degrees(w_est, f_s.width())?,
        peak_score: curve.values()[peak],
        method: RefinementMethod::Fi,
        scale,
    })
}

/// Estimates the orientation shift by curve smoothing: the coarse correlation
/// curve is computed at satellite width, upsampled `scale`-fold by spectral
/// zero-padding, and the peak of the smoothed curve is returned in coarse-bin
/// units. Limited fields of view are handled by the sliding correlation
/// before smoothing.
pub fn estimate_cs(f_g: &FeatureMap, f_s: &FeatureMap, scale: usize) -> Result<OrientationEstimate> {
    if scale == 0 {
        return Err(CvoError::InvalidScale);
    }
    let coarse = cross_correlate(f_g, f_s)?;
    let smoothed = spectral_zero_pad(&coarse, scale)?;
    let peak = argmax(smoothed.values());
    let w_est = peak as f64 / scale as f64;
    Ok(OrientationEstimate {
        w_est,
        theta_est: bins_to_degrees(w_est, f_s.width())?,
        peak_score: smoothed.values()[peak],
        method: RefinementMethod::Cs,
        scale,
    })
}

/// Band-limited upsampling of a circular curve by a factor of `scale`: the
/// curve's discrete spectrum is split at the Nyquist frequency and zeros are
/// inserted in the middle so the padded spectrum stays conjugate-symmetric
/// (for even lengths the Nyquist bin is halved and mirrored), then the
/// inverse transform is scaled by `scale` and its real part returned. Output
/// positions `scale·k` reproduce the input samples.
pub fn spectral_zero_pad(curve: &CorrelationCurve, scale: usize) -> Result<CorrelationCurve> {
    if scale == 0 {
        return Err(CvoError::InvalidScale);
    }
    let width = curve.len();
    if width < 2 {
        return Err(CvoError::InvalidDimensions(
            "spectral zero-padding needs a curve of length at least 2".into(),
        ));
    }
    if scale == 1 {
        return Ok(curve.clone());
    }
    let fine_width = width * scale;

    let mut planner = FftPlanner::new();
    let mut spectrum: Vec<Complex64> = curve
        .values()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    planner.plan_fft_forward(width).process(&mut spectrum);

    let padded = pad_spectrum(&spectrum, fine_width);
    let mut fine = padded;
    planner.plan_fft_inverse(fine_width).process(&mut fine);

    // Unnormalized inverse over length scale·W, then multiply by scale:
    // the net scaling is 1/W, which preserves coarse sample amplitudes.
    let values = fine.iter().map(|v| v.re / width as f64).collect();
    CorrelationCurve::new(values)
}

/// Inserts zeros in the middle of an unnormalized spectrum so it describes
/// the same band-limited signal at `fine_width` samples. Conjugate symmetry
/// is preserved; an even-length input has its Nyquist coefficient split in
/// half across the two symmetric positions.
pub(crate) fn pad_spectrum(spectrum: &[Complex64], fine_width: usize) -> Vec<Complex64> {
    let width = spectrum.len();
    debug_assert!(fine_width >= width);
    if fine_width == width {
        return spectrum.to_vec();
    }
    let mut padded = vec![Complex64::new(0.0, 0.0); fine_width];
    let half = width / 2;
    if width % 2 == 0 {
        padded[..half].copy_from_slice(&spectrum[..half]);
        padded[half] = 0.5 * spectrum[half];
        padded[fine_width - half] = 0.5 * spectrum[half];
        for k in half + 1..width {
            padded[fine_width - width + k] = spectrum[k];
        }
    } else {
        padded[..=half].copy_from_slice(&spectrum[..=half]);
        for k in half + 1..width {
            padded[fine_width - width + k] = spectrum[k];
        }
    }
    padded
}

/// Circularly shifts satellite features by `w_est` bins so they align with
/// the street view that produced the estimate (`out[m] = F_s[(m + w_est) mod
/// W]`, fractional shifts linearly interpolated), then crops to the first
/// `fov/360 · W` bins, rounded to the nearest whole bin count.
pub fn align_and_crop(f_s: &FeatureMap, w_est: f64, fov_degrees: f64) -> Result<FeatureMap> {
    let (height, width, channels) = f_s.shape();
    if !w_est.is_finite() || w_est < 0.0 || w_est >= width as f64 {
        return Err(CvoError::InvalidValues(format!(
            "alignment shift {w_est} outside [0, {width})"
        )));
    }
    if !fov_degrees.is_finite() || fov_degrees <= 0.0 || fov_degrees > 360.0 {
        return Err(CvoError::InvalidFov {
            fov: fov_degrees,
            reason: "field of view must lie in (0, 360]".into(),
        });
    }
    let crop = (fov_degrees / 360.0 * width as f64).round().max(1.0) as usize;
    if crop < 2 {
        return Err(CvoError::InvalidFov {
            fov: fov_degrees,
            reason: format!("crops to {crop} of {width} feature bins, need at least 2"),
        });
    }

    let base = w_est.floor() as usize;
    let frac = w_est - w_est.floor();
    let mut values = Vec::with_capacity(height * crop * channels);
    if frac == 0.0 {
        for y in 0..height {
            for m in 0..crop {
                let col = (m + base) % width;
                for c in 0..channels {
                    values.push(f_s.get(y, col, c));
                }
            }
        }
    } else {
        for y in 0..height {
            for m in 0..crop {
                let col = (m + base) % width;
                let next = (col + 1) % width;
                for c in 0..channels {
                    let a = f_s.get(y, col, c);
                    values.push(a + frac * (f_s.get(y, next, c) - a));
                }
            }
        }
    }
    FeatureMap::new(height, crop, channels, values)
}

/// Cosine similarity between two equal-shape feature maps, in [−1, 1].
pub fn similarity(f_g: &FeatureMap, f_s_aligned: &FeatureMap) -> Result<f64> {
    if f_g.shape() != f_s_aligned.shape() {
        return Err(CvoError::ShapeMismatch {
            left: f_g.shape(),
            right: f_s_aligned.shape(),
        });
    }
    let norm_g = frobenius_norm(f_g);
    let norm_s = frobenius_norm(f_s_aligned);
    if norm_g == 0.0 || norm_s == 0.0 {
        return Err(CvoError::DegenerateFeatures);
    }
    let dot: f64 = f_g
        .values()
        .iter()
        .zip(f_s_aligned.values())
        .map(|(a, b)| a * b)
        .sum();
    Ok((dot / (norm_g * norm_s)).clamp(-1.0, 1.0))
}
