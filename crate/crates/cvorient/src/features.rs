//! Feature maps with a circular width axis: a deterministic shift-equivariant
//! extractor built from block statistics, width-axis linear interpolation,
//! normalization helpers, and the FMAP1 binary interchange format.

use std::path::Path;

use crate::error::{CvoError, Result};
use crate::imaging::RasterImage;

/// Output height of [`extract_features`].
pub const FEATURE_HEIGHT: usize = 4;
/// Output channel count of [`extract_features`].
pub const FEATURE_CHANNELS: usize = 16;
/// Horizontal pixels per feature bin: the extractor's width stride.
pub const WIDTH_STRIDE: usize = 8;

const FMAP_MAGIC: &[u8; 5] = b"FMAP1";
const FMAP_HEADER_LEN: usize = FMAP_MAGIC.len() + 3 * 4;

/// A dense H×W×C grid of finite real values whose width axis is circular
/// (column W wraps back to column 0). Stored row-major as (h, w, c).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    /// Creates a map from row-major values, validating dimensions (width must
    /// be at least 2 for the circular axis to be meaningful), the value
    /// count, and finiteness.
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width < 2 || channels == 0 {
            return Err(CvoError::InvalidDimensions(format!(
                "feature map dimensions must be H≥1, W≥2, C≥1, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| {
                CvoError::InvalidDimensions(format!(
                    "feature map dimensions {height}x{width}x{channels} overflow"
                ))
            })?;
        if values.len() != expected {
            return Err(CvoError::InvalidDimensions(format!(
                "expected {expected} values for {height}x{width}x{channels}, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CvoError::InvalidValues(
                "feature map values must be finite".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    /// Builds a map by evaluating `f(h, w, channel)` at every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    values.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, values)
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

    /// (height, width, channels).
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Raw row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The value at (h, w, channel).
    ///
    /// # Panics
    /// Panics if the coordinates are out of bounds.
    pub fn get(&self, h: usize, w: usize, channel: usize) -> f64 {
        assert!(h < self.height && w < self.width && channel < self.channels);
        self.values[(h * self.width + w) * self.channels + channel]
    }

    /// Serializes the map into FMAP1 bytes: the magic `FMAP1`, three 32-bit
    /// little-endian dims (H, W, C), then H·W·C little-endian 32-bit floats
    /// in row-major (h, w, c) order. Values are stored in single precision,
    /// so maps produced by [`extract_features`] or [`read_fmap`] round-trip
    /// bit-exactly.
    pub fn to_fmap_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(FMAP_HEADER_LEN + 4 * self.values.len());
        bytes.extend_from_slice(FMAP_MAGIC);
        for dim in [self.height, self.width, self.channels] {
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in &self.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        bytes
    }

    /// Parses FMAP1 bytes produced by [`Self::to_fmap_bytes`].
    pub fn from_fmap_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FMAP_HEADER_LEN {
            return Err(CvoError::Format(format!(
                "FMAP1 header needs {FMAP_HEADER_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        if &bytes[..FMAP_MAGIC.len()] != FMAP_MAGIC {
            return Err(CvoError::Format("bad magic, expected FMAP1".into()));
        }
        let mut dims = [0usize; 3];
        for (i, dim) in dims.iter_mut().enumerate() {
            let start = FMAP_MAGIC.len() + 4 * i;
            let raw: [u8; 4] = bytes[start..start + 4].try_into().expect("4-byte slice");
            *dim = u32::from_le_bytes(raw) as usize;
        }
        let [height, width, channels] = dims;
        let count = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| CvoError::Format("dimension product overflows".into()))?;
        let expected_len = FMAP_HEADER_LEN + 4 * count;
        if bytes.len() < expected_len {
            return Err(CvoError::Format(format!(
                "truncated payload: {height}x{width}x{channels} needs {expected_len} bytes, got {}",
                bytes.len()
            )));
        }
        if bytes.len() > expected_len {
            return Err(CvoError::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected_len
            )));
        }
        let values: Vec<f64> = bytes[FMAP_HEADER_LEN..]
            .chunks_exact(4)
            .map(|chunk| {
                let raw: [u8; 4] = chunk.try_into().expect("4-byte chunk");
                f64::from(f32::from_le_bytes(raw))
            })
            .collect();
        Self::new(height, width, channels, values)
            .map_err(|err| CvoError::Format(format!("invalid FMAP1 contents: {err}")))
    }
}

/// Rounds to the nearest single-precision value; the extractor emits these so
/// its output survives FMAP1 serialization bit-exactly.
fn quantize(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Reduces an image to a `[4, W/8, 16]` feature map of per-block statistics.
///
/// The image is tiled into non-overlapping blocks of H/4 rows by 8 columns;
/// each block yields 16 channels: three per-channel means (image channels
/// cycled), the luminance mean, an 8-bin magnitude-weighted gradient
/// orientation histogram (soft-assigned, horizontal gradients circular on
/// the width axis), the luminance standard deviation, the mean absolute
/// horizontal and vertical gradients, and the root-mean-square gradient
/// magnitude. The computation is exactly equivariant to horizontal circular
/// shifts by whole strides: shifting the image by 8·k pixels circularly
/// shifts the output by k bins, bit for bit.
pub fn extract_features(img: &RasterImage) -> Result<FeatureMap> {
    let (height, width, channels) = (img.height(), img.width(), img.channels());
    if height % 32 != 0 {
        return Err(CvoError::InvalidDimensions(format!(
            "image height must be divisible by 32, got {height}"
        )));
    }
    if width % WIDTH_STRIDE != 0 || width / WIDTH_STRIDE < 2 {
        return Err(CvoError::InvalidDimensions(format!(
            "image width must be a multiple of {WIDTH_STRIDE} with at least 2 bins, got {width}"
        )));
    }
    let out_width = width / WIDTH_STRIDE;
    let block_height = height / FEATURE_HEIGHT;

    // Per-pixel luminance and its gradients. Horizontal gradients use central
    // differences with circular wrap; vertical gradients use central
    // differences in the interior and one-sided differences at the rims.
    let mut lum = vec![0.0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut sum = 0.0;
            for c in 0..channels {
                sum += img.sample(y, x, c);
            }
            lum[y * width + x] = sum / channels as f64;
        }
    }
    let mut gx = vec![0.0f64; height * width];
    let mut gy = vec![0.0f64; height * width];
    for y in 0..height {
        let row = y * width;
        for x in 0..width {
            let left = lum[row + (x + width - 1) % width];
            let right = lum[row + (x + 1) % width];
            gx[row + x] = (right - left) / 2.0;
            gy[row + x] = if y == 0 {
                lum[width + x] - lum[x]
            } else if y == height - 1 {
                lum[row + x] - lum[row - width + x]
            } else {
                (lum[row + width + x] - lum[row - width + x]) / 2.0
            };
        }
    }

    let block_count = (block_height * WIDTH_STRIDE) as f64;
    let mut values = Vec::with_capacity(FEATURE_HEIGHT * out_width * FEATURE_CHANNELS);
    for by in 0..FEATURE_HEIGHT {
        for bx in 0..out_width {
            let mut channel_sum = vec![0.0f64; channels];
            let mut lum_sum = 0.0;
            let mut lum_sq_sum = 0.0;
            let mut hist = [0.0f64; 8];
            let mut abs_gx_sum = 0.0;
            let mut abs_gy_sum = 0.0;
            let mut mag_sq_sum = 0.0;
            for y in by * block_height..(by + 1) * block_height {
                for x in bx * WIDTH_STRIDE..(bx + 1) * WIDTH_STRIDE {
                    for (c, sum) in channel_sum.iter_mut().enumerate() {
                        *sum += img.sample(y, x, c);
                    }
                    let l = lum[y * width + x];
                    lum_sum += l;
                    lum_sq_sum += l * l;
                    let (dx, dy) = (gx[y * width + x], gy[y * width + x]);
                    let mag = (dx * dx + dy * dy).sqrt();
                    mag_sq_sum += dx * dx + dy * dy;
                    abs_gx_sum += dx.abs();
                    abs_gy_sum += dy.abs();
                    // Soft-assign the orientation to two adjacent bins so the
                    // histogram varies smoothly with the image content.
                    let turn = (dy.atan2(dx) + std::f64::consts::PI)
                        / (2.0 * std::f64::consts::PI)
                        * 8.0;
                    let low = turn.floor();
                    let frac = turn - low;
                    let bin = low as usize % 8;
                    hist[bin] += mag * (1.0 - frac);
                    hist[(bin + 1) % 8] += mag * frac;
                }
            }
            let lum_mean = lum_sum / block_count;
            for k in 0..3 {
                values.push(quantize(channel_sum[k % channels] / block_count));
            }
            values.push(quantize(lum_mean));
            for h in hist {
                values.push(quantize(h / block_count));
            }
            let variance = (lum_sq_sum / block_count - lum_mean * lum_mean).max(0.0);
            values.push(quantize(variance.sqrt()));
            values.push(quantize(abs_gx_sum / block_count));
            values.push(quantize(abs_gy_sum / block_count));
            values.push(quantize((mag_sq_sum / block_count).sqrt()));
        }
    }
    FeatureMap::new(FEATURE_HEIGHT, out_width, FEATURE_CHANNELS, values)
}

/// Upsamples the circular width axis by an integer factor using circular
/// linear interpolation. Output positions `scale·k` reproduce input position
/// `k` exactly; positions in between blend the two surrounding columns.
pub fn interpolate_width(map: &FeatureMap, scale: usize) -> Result<FeatureMap> {
    if scale == 0 {
        return Err(CvoError::InvalidScale);
    }
    if scale == 1 {
        return Ok(map.clone());
    }
    let (height, width, channels) = map.shape();
    let out_width = width * scale;
    let mut values = Vec::with_capacity(height * out_width * channels);
    for y in 0..height {
        for j in 0..out_width {
            let k = j / scale;
            let r = j % scale;
            if r == 0 {
                for c in 0..channels {
                    values.push(map.get(y, k, c));
                }
            } else {
                let t = r as f64 / scale as f64;
                let k_next = (k + 1) % width;
                for c in 0..channels {
                    let a = map.get(y, k, c);
                    values.push(a + t * (map.get(y, k_next, c) - a));
                }
            }
        }
    }
    FeatureMap::new(height, out_width, channels, values)
}

/// The Frobenius norm: the square root of the sum of squared values.
pub fn frobenius_norm(map: &FeatureMap) -> f64 {
    map.values().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales the map to unit Frobenius norm.
pub fn l2_normalize(map: &FeatureMap) -> Result<FeatureMap> {
    let norm = frobenius_norm(map);
    if norm == 0.0 {
        return Err(CvoError::DegenerateFeatures);
    }
    if !norm.is_finite() {
        return Err(CvoError::InvalidValues(
            "feature norm overflowed to infinity".into(),
        ));
    }
    let (height, width, channels) = map.shape();
    let values = map.values().iter().map(|v| v / norm).collect();
    FeatureMap::new(height, width, channels, values)
}

/// Writes a feature map to `path` in the FMAP1 format.
pub fn write_fmap(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, map.to_fmap_bytes()).map_err(|err| CvoError::at_path(path, err))
}

/// Reads a feature map from an FMAP1 file.
pub fn read_fmap(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|err| CvoError::at_path(path, err))?;
    FeatureMap::from_fmap_bytes(&bytes)
}
