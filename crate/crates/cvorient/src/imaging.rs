//! Image-space pre-processing: the polar transformation that warps a square
//! overhead image into panorama geometry, and the shift-and-crop augmentation
//! that creates orientation misalignment with exactly known sub-bin ground
//! truth.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::angles::{bins_to_degrees, SouthAlignedAngle};
use crate::error::{CvoError, Result};

/// A dense H×W×C image with samples in [0, 1], stored row-major as
/// (y, x, channel). Samples are held in single precision; all arithmetic on
/// them happens in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    samples: Vec<f32>,
}

impl RasterImage {
    /// Creates an image from row-major samples, validating dimensions, the
    /// sample count, and that every sample is finite and in [0, 1].
    pub fn new(height: usize, width: usize, channels: usize, samples: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(CvoError::InvalidDimensions(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| {
                CvoError::InvalidDimensions(format!(
                    "image dimensions {height}x{width}x{channels} overflow"
                ))
            })?;
        if samples.len() != expected {
            return Err(CvoError::InvalidDimensions(format!(
                "expected {expected} samples for {height}x{width}x{channels}, got {}",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CvoError::InvalidValues(
                "image samples must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            samples,
        })
    }

    /// Builds an image by evaluating `f(y, x, channel)` at every sample.
    /// The closure must return values in [0, 1].
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    samples.push(f(y, x, c) as f32);
                }
            }
        }
        Self::new(height, width, channels, samples)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Raw row-major samples.
    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    /// The sample at (y, x, channel), in double precision.
    ///
    /// # Panics
    /// Panics if the coordinates are out of bounds.
    pub fn sample(&self, y: usize, x: usize, channel: usize) -> f64 {
        assert!(y < self.height && x < self.width && channel < self.channels);
        self.samples[(y * self.width + x) * self.channels + channel] as f64
    }

    /// Loads an 8-bit grayscale or RGB PNG, mapping bytes to [0, 1].
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::open(path).map_err(|err| match err {
            image::ImageError::IoError(io) => CvoError::at_path(path, io),
            other => CvoError::Format(format!("{}: {other}", path.display())),
        })?;
        let width = decoded.width() as usize;
        let height = decoded.height() as usize;
        let (bytes, channels) = match decoded {
            image::DynamicImage::ImageLuma8(buf) => (buf.into_raw(), 1),
            image::DynamicImage::ImageRgb8(buf) => (buf.into_raw(), 3),
            other => {
                return Err(CvoError::Format(format!(
                    "{}: unsupported color type {:?}, expected 8-bit grayscale or RGB",
                    path.display(),
                    other.color()
                )))
            }
        };
        let samples = bytes.into_iter().map(|b| f32::from(b) / 255.0).collect();
        Self::new(height, width, channels, samples)
    }

    /// Saves the image as an 8-bit PNG; requires 1 or 3 channels. Samples are
    /// scaled by 255 and rounded to the nearest byte.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .samples
            .iter()
            .map(|&v| (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let width = self.width as u32;
        let height = self.height as u32;
        let result = match self.channels {
            1 => image::GrayImage::from_raw(width, height, bytes)
                .expect("sample count matches dimensions")
                .save_with_format(path, image::ImageFormat::Png),
            3 => image::RgbImage::from_raw(width, height, bytes)
                .expect("sample count matches dimensions")
                .save_with_format(path, image::ImageFormat::Png),
            c => {
                return Err(CvoError::InvalidDimensions(format!(
                    "PNG output supports 1 or 3 channels, got {c}"
                )))
            }
        };
        result.map_err(|err| match err {
            image::ImageError::IoError(io) => CvoError::at_path(path, io),
            other => CvoError::Format(format!("{}: {other}", path.display())),
        })
    }
}

/// The output of [`shift_and_crop`]: the augmented image plus its ground
/// truth in feature bins and degrees.
#[derive(Debug, Clone)]
pub struct ShiftResult {
    /// The shifted, FOV-cropped image.
    pub image: RasterImage,
    /// The applied roll in input pixels.
    pub x_shift: usize,
    /// Ground-truth orientation shift in fractional feature bins,
    /// in [0, feature width).
    pub w_gt: f64,
    /// `w_gt` converted to degrees.
    pub theta_gt: SouthAlignedAngle,
}

/// The raw polar-transform source coordinate (x_s, y_s) in an S×S overhead
/// image for panorama pixel (x_g, y_g), before clamping:
///
/// ```text
/// x_s = S/2 − (S/2)·((H_g − y_g)/H_g)·sin(2π·x_g/W_g)
/// y_s = S/2 + (S/2)·((H_g − y_g)/H_g)·cos(2π·x_g/W_g)
/// ```
///
/// Column 0 therefore looks due south of the overhead center, and the bottom
/// panorama row collapses onto the center itself.
pub fn polar_source(
    side: usize,
    pano_height: usize,
    pano_width: usize,
    x_g: f64,
    y_g: f64,
) -> (f64, f64) {
    let half = side as f64 / 2.0;
    let radius = half * ((pano_height as f64 - y_g) / pano_height as f64);
    let phi = 2.0 * std::f64::consts::PI * x_g / pano_width as f64;
    (half - radius * phi.sin(), half + radius * phi.cos())
}

/// Warps a square overhead image into an `pano_height`×`pano_width` panorama
/// strip: horizontal position becomes azimuth (south-aligned, clockwise) and
/// vertical position becomes radial distance from the overhead center. Source
/// coordinates are sampled bilinearly and clamped to the image bounds.
pub fn polar_transform(
    sat: &RasterImage,
    pano_height: usize,
    pano_width: usize,
) -> Result<RasterImage> {
    if sat.height() != sat.width() {
        return Err(CvoError::NonSquareOverhead {
            height: sat.height(),
            width: sat.width(),
        });
    }
    if pano_height == 0 || pano_width == 0 {
        return Err(CvoError::InvalidDimensions(format!(
            "panorama dimensions must be positive, got {pano_height}x{pano_width}"
        )));
    }
    let side = sat.height();
    let channels = sat.channels();
    let max_coord = (side - 1) as f64;
    let half = side as f64 / 2.0;

    let mut trig = Vec::with_capacity(pano_width);
    for x_g in 0..pano_width {
        let phi = 2.0 * std::f64::consts::PI * x_g as f64 / pano_width as f64;
        trig.push((phi.sin(), phi.cos()));
    }

    let mut samples = Vec::with_capacity(pano_height * pano_width * channels);
    for y_g in 0..pano_height {
        let radius = half * ((pano_height - y_g) as f64 / pano_height as f64);
        for &(sin_phi, cos_phi) in &trig {
            let x_s = (half - radius * sin_phi).clamp(0.0, max_coord);
            let y_s = (half + radius * cos_phi).clamp(0.0, max_coord);
            let x0 = x_s.floor() as usize;
            let y0 = y_s.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let y1 = (y0 + 1).min(side - 1);
            let tx = x_s - x0 as f64;
            let ty = y_s - y0 as f64;
            for c in 0..channels {
                let v00 = sat.sample(y0, x0, c);
                let v01 = sat.sample(y0, x1, c);
                let v10 = sat.sample(y1, x0, c);
                let v11 = sat.sample(y1, x1, c);
                let top = v00 + tx * (v01 - v00);
                let bottom = v10 + tx * (v11 - v10);
                samples.push((top + ty * (bottom - top)).clamp(0.0, 1.0) as f32);
            }
        }
    }
    RasterImage::new(pano_height, pano_width, channels, samples)
}

/// Validates a field of view and returns the whole number of columns it cuts
/// from an image of the given width.
pub(crate) fn fov_columns(fov_degrees: f64, width: usize) -> Result<usize> {
    if !fov_degrees.is_finite() || fov_degrees <= 0.0 || fov_degrees > 360.0 {
        return Err(CvoError::InvalidFov {
            fov: fov_degrees,
            reason: "field of view must lie in (0, 360]".into(),
        });
    }
    let exact = fov_degrees * width as f64 / 360.0;
    let rounded = exact.round();
    if (exact - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(CvoError::InvalidFov {
            fov: fov_degrees,
            reason: format!("cuts {exact} columns from width {width}, expected a whole count ≥ 1"),
        });
    }
    Ok(rounded as usize)
}

/// Rolls the image right by `x_shift` columns (so column `x` of the output
/// reads column `(x + W − x_shift) mod W` of the input), then crops to the
/// first `fov/360 · W` columns. Returns the augmented image together with its
/// ground-truth shift `w_gt = ((W − x_shift)/W · feature_width) mod
/// feature_width` in fractional feature bins.
pub fn shift_and_crop(
    street: &RasterImage,
    x_shift: usize,
    fov_degrees: f64,
    feature_width: usize,
) -> Result<ShiftResult> {
    let width = street.width();
    if x_shift >= width {
        return Err(CvoError::ShiftOutOfRange {
            shift: x_shift,
            width,
        });
    }
    if feature_width == 0 {
        return Err(CvoError::InvalidFeatureWidth);
    }
    let crop = fov_columns(fov_degrees, width)?;

    let channels = street.channels();
    let src = street.samples();
    let mut samples = Vec::with_capacity(street.height() * crop * channels);
    for y in 0..street.height() {
        let row = y * width * channels;
        for x in 0..crop {
            let src_x = (x + width - x_shift) % width;
            let offset = row + src_x * channels;
            samples.extend_from_slice(&src[offset..offset + channels]);
        }
    }
    let image = RasterImage::new(street.height(), crop, channels, samples)?;

    let w_gt =
        ((width - x_shift) as f64 / width as f64 * feature_width as f64) % feature_width as f64;
    let theta_gt = bins_to_degrees(w_gt, feature_width)?;
    Ok(ShiftResult {
        image,
        x_shift,
        w_gt,
        theta_gt,
    })
}

/// Draws `x_shift` uniformly from {0, …, W−1} with a deterministic generator
/// seeded by `seed`, then delegates to [`shift_and_crop`].
pub fn random_shift(
    street: &RasterImage,
    seed: u64,
    fov_degrees: f64,
    feature_width: usize,
) -> Result<ShiftResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_shift = rng.random_range(0..street.width());
    shift_and_crop(street, x_shift, fov_degrees, feature_width)
}
