//! Procedural cross-view scenes with exactly known ground truth: band-limited
//! random overhead textures, their polar-transformed panoramas, and randomly
//! shifted query views. Stands in for real paired datasets so orientation
//! errors can be measured at sub-degree precision.

use rand::Rng;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::angles::SouthAlignedAngle;
use crate::error::{CvoError, Result};
use crate::features::WIDTH_STRIDE;
use crate::imaging::{polar_transform, random_shift, RasterImage};
use crate::retrieval::RetrievalScene;

/// One generated scene: the overhead image, its untouched panorama, and the
/// shifted query view with the exact ground truth that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub id: u64,
    /// The per-scene seed drawn from the master stream.
    pub seed: u64,
    /// Square overhead texture, single channel in [0, 1].
    pub overhead: RasterImage,
    /// `polar_transform(overhead)`, before any shift.
    pub panorama: RasterImage,
    /// The panorama rolled by `x_shift` pixels (full field of view).
    pub query: RasterImage,
    /// Applied roll in panorama pixels.
    pub x_shift: usize,
    /// Ground truth in fractional satellite feature bins.
    pub w_gt: f64,
    pub theta_gt: SouthAlignedAngle,
}

impl SyntheticScene {
    /// Repackages the scene for the retrieval engine under a dataset tag.
    pub fn to_retrieval_scene(&self, tag: &str) -> RetrievalScene {
        RetrievalScene {
            id: self.id,
            overhead: self.overhead.clone(),
            query: self.query.clone(),
            w_gt: self.w_gt,
            theta_gt: self.theta_gt,
            tag: tag.to_string(),
        }
    }
}

const WAVE_COUNT: usize = 40;
/// Highest spatial frequency, in cycles per image side.
const MAX_CYCLES: f64 = 4.0;

/// A band-limited random field: the normalized sum of [`WAVE_COUNT`] random
/// low-frequency plane waves, mapped into [0, 1] around mid-gray. Smooth
/// enough to survive polar resampling, rich enough that two draws are
/// distinguishable almost everywhere.
fn overhead_texture(side: usize, seed: u64) -> Result<RasterImage> {
    let tau = std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: f64,
    }
    let waves: Vec<Wave> = (0..WAVE_COUNT)
        .map(|_| Wave {
            fx: rng.random_range(-MAX_CYCLES..MAX_CYCLES),
            fy: rng.random_range(-MAX_CYCLES..MAX_CYCLES),
            phase: rng.random_range(0.0..tau),
            amp: rng.random_range(0.2..1.0),
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.amp).sum();

    let mut acc = vec![0.0f64; side * side];
    let inv_side = 1.0 / side as f64;
    for wave in &waves {
        // March each row with the angle-addition recurrence instead of a sin
        // call per pixel; the accumulated rounding over one row is far below
        // the texture's amplitude scale.
        let (sin_dx, cos_dx) = (tau * wave.fx * inv_side).sin_cos();
        for y in 0..side {
            let start = tau * wave.fy * (y as f64 * inv_side) + wave.phase;
            let (mut sin_phi, mut cos_phi) = start.sin_cos();
            for cell in &mut acc[y * side..(y + 1) * side] {
                *cell += wave.amp * sin_phi;
                let next = sin_phi * cos_dx + cos_phi * sin_dx;
                cos_phi = cos_phi * cos_dx - sin_phi * sin_dx;
                sin_phi = next;
            }
        }
    }
    let samples: Vec<f32> = acc
        .iter()
        .map(|&s| (0.5 + 0.5 * s / norm).clamp(0.0, 1.0) as f32)
        .collect();
    RasterImage::new(side, side, 1, samples)
}

/// Generates `n` deterministic scenes: `side`×`side` overheads, panoramas of
/// the given shape, and full-FOV queries rolled by a uniform random pixel
/// shift. Panorama dimensions must satisfy the feature extractor's
/// preconditions so downstream stages cannot fail on shape.
pub fn generate_scenes(
    seed: u64,
    n: usize,
    side: usize,
    pano_height: usize,
    pano_width: usize,
) -> Result<Vec<SyntheticScene>> {
    if n == 0 {
        return Err(CvoError::InvalidConfig(
            "scene count must be at least 1".into(),
        ));
    }
    if side < 2 {
        return Err(CvoError::InvalidDimensions(format!(
            "overhead side must be at least 2, got {side}"
        )));
    }
    if pano_height % 32 != 0 || pano_height == 0 {
        return Err(CvoError::InvalidDimensions(format!(
            "panorama height must be a positive multiple of 32, got {pano_height}"
        )));
    }
    if pano_width % WIDTH_STRIDE != 0 || pano_width / WIDTH_STRIDE < 2 {
        return Err(CvoError::InvalidDimensions(format!(
            "panorama width must be a multiple of {WIDTH_STRIDE} with at least 2 feature bins, got {pano_width}"
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u64)
        .map(|id| {
            let scene_seed = master.next_u64();
            build_scene(id, scene_seed, side, pano_height, pano_width)
                .map_err(|e| e.for_scene(id))
        })
        .collect()
}

fn build_scene(
    id: u64,
    seed: u64,
    side: usize,
    pano_height: usize,
    pano_width: usize,
) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture_seed = rng.next_u64();
    let shift_seed = rng.next_u64();

    let overhead = overhead_texture(side, texture_seed)?;
    let panorama = polar_transform(&overhead, pano_height, pano_width)?;
    let shifted = random_shift(&panorama, shift_seed, 360.0, pano_width / WIDTH_STRIDE)?;
    Ok(SyntheticScene {
        id,
        seed,
        overhead,
        panorama,
        query: shifted.image,
        x_shift: shifted.x_shift,
        w_gt: shifted.w_gt,
        theta_gt: shifted.theta_gt,
    })
}
