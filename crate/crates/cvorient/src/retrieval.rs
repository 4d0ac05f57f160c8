//! The batch retrieval engine: ranks every overhead candidate against each
//! query panorama by cosine similarity of orientation-aligned features, in
//! known- or unknown-orientation mode, and emits one evaluation record per
//! query. Correlation sweeps run through cached row FFTs so large pools stay
//! tractable; the scores are the same sums the direct operations compute.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::num::NonZeroU32;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::angles::{bins_to_degrees, SouthAlignedAngle};
use crate::correlation::{align_and_crop, argmax, pad_spectrum, similarity, RefinementMethod};
use crate::error::{CvoError, Result};
use crate::evaluation::EvaluationRecord;
use crate::features::{extract_features, interpolate_width, FeatureMap, WIDTH_STRIDE};
use crate::imaging::{polar_transform, shift_and_crop, RasterImage};

/// Whether query orientations are given or must be estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationMode {
    /// Ground-truth alignment is applied; candidates are only cropped.
    Known,
    /// The orientation of every (query, candidate) pair is estimated.
    Unknown,
}

impl fmt::Display for OrientationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrientationMode::Known => "known",
            OrientationMode::Unknown => "unknown",
        })
    }
}

impl FromStr for OrientationMode {
    type Err = CvoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known" => Ok(OrientationMode::Known),
            "unknown" => Ok(OrientationMode::Unknown),
            other => Err(CvoError::InvalidConfig(format!(
                "unknown orientation mode {other:?}, expected \"known\" or \"unknown\""
            ))),
        }
    }
}

/// Settings of one retrieval run. Loadable from a TOML file holding a flat
/// `[retrieval]` table whose keys mirror the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Sub-pixel refinement used for orientation estimation.
    pub method: RefinementMethod,
    /// Width-scaling factor for refinement.
    pub scale: usize,
    /// Query field of view in degrees.
    pub fov_degrees: f64,
    pub orientation: OrientationMode,
    /// Number of scenes a loader should place in the candidate pool.
    pub pool_size: usize,
    pub seed: u64,
    /// Worker threads for the query sweep.
    pub jobs: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            method: RefinementMethod::Fi,
            scale: 10,
            fov_degrees: 360.0,
            orientation: OrientationMode::Unknown,
            pool_size: 32,
            seed: 0,
            jobs: 1,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(CvoError::InvalidScale);
        }
        if !self.fov_degrees.is_finite() || self.fov_degrees <= 0.0 || self.fov_degrees > 360.0 {
            return Err(CvoError::InvalidFov {
                fov: self.fov_degrees,
                reason: "field of view must lie in (0, 360]".into(),
            });
        }
        if self.pool_size == 0 {
            return Err(CvoError::InvalidConfig(
                "pool_size must be at least 1".into(),
            ));
        }
        if self.jobs == 0 {
            return Err(CvoError::InvalidConfig("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses a TOML document with a `[retrieval]` table; missing keys take
    /// their defaults, unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Document {
            retrieval: RetrievalConfig,
        }
        let doc: Document = toml::from_str(text)
            .map_err(|e| CvoError::InvalidConfig(format!("config parse error: {e}")))?;
        doc.retrieval.validate()?;
        Ok(doc.retrieval)
    }
}

/// One scene as the engine consumes it: a square overhead candidate, the
/// matching full-FOV query panorama, and the ground truth in satellite
/// feature bins, under a dataset tag.
#[derive(Debug, Clone)]
pub struct RetrievalScene {
    pub id: u64,
    pub overhead: RasterImage,
    pub query: RasterImage,
    pub w_gt: f64,
    pub theta_gt: SouthAlignedAngle,
    pub tag: String,
}

/// A candidate prepared for the sweep: its coarse features for alignment and
/// similarity, plus cached row spectra for correlation (unknown mode only).
struct Candidate {
    id: u64,
    features: FeatureMap,
    spectra: Vec<Complex64>,
}

/// Per-row FFTs of a feature map, each row zero-padded to `len`: one row per
/// (height, channel) pair, flattened in that order.
fn row_spectra(map: &FeatureMap, len: usize, fft: &Arc<dyn Fft<f64>>) -> Vec<Complex64> {
    let (height, width, channels) = map.shape();
    debug_assert!(width <= len);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = vec![Complex64::new(0.0, 0.0); height * channels * len];
    for y in 0..height {
        for c in 0..channels {
            let row = &mut out[(y * channels + c) * len..(y * channels + c + 1) * len];
            for (x, cell) in row.iter_mut().enumerate().take(width) {
                *cell = Complex64::new(map.get(y, x, c), 0.0);
            }
            fft.process_with_scratch(row, &mut scratch);
        }
    }
    out
}

/// Runs the full pool sweep and returns one record per query, ordered by
/// query position. Given the same scenes and config, the output is identical
/// regardless of `jobs`.
pub fn run_retrieval(
    scenes: &[RetrievalScene],
    config: &RetrievalConfig,
) -> Result<Vec<EvaluationRecord>> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(CvoError::InvalidConfig(
            "retrieval needs at least one scene".into(),
        ));
    }
    let mut ids = BTreeSet::new();
    for scene in scenes {
        if !ids.insert(scene.id) {
            return Err(CvoError::InvalidConfig(format!(
                "duplicate scene id {}",
                scene.id
            )));
        }
    }
    let query_shape = shape_of(&scenes[0].query);
    let overhead_shape = shape_of(&scenes[0].overhead);
    for scene in scenes {
        if shape_of(&scene.query) != query_shape || shape_of(&scene.overhead) != overhead_shape
        {
            return Err(CvoError::InvalidDimensions(format!(
                "scene {} does not match the pool's image shapes",
                scene.id
            )));
        }
    }
    let (pano_height, pano_width, _) = query_shape;
    if pano_width % WIDTH_STRIDE != 0 || pano_width / WIDTH_STRIDE < 2 {
        return Err(CvoError::InvalidDimensions(format!(
            "query width must be a multiple of {WIDTH_STRIDE} with at least 2 feature bins, got {pano_width}"
        )));
    }
    let feature_width = pano_width / WIDTH_STRIDE;
    for scene in scenes {
        if !scene.w_gt.is_finite() || scene.w_gt < 0.0 || scene.w_gt >= feature_width as f64 {
            return Err(CvoError::InvalidValues(format!(
                "scene {}: w_gt = {} outside [0, {feature_width})",
                scene.id, scene.w_gt
            )));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| CvoError::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| sweep(scenes, config, pano_height, pano_width, feature_width))
}

fn shape_of(img: &RasterImage) -> (usize, usize, usize) {
    (img.height(), img.width(), img.channels())
}

fn sweep(
    scenes: &[RetrievalScene],
    config: &RetrievalConfig,
    pano_height: usize,
    pano_width: usize,
    feature_width: usize,
) -> Result<Vec<EvaluationRecord>> {
    use rayon::prelude::*;

    let estimate = config.orientation == OrientationMode::Unknown;
    // Correlation runs at fine width for FI (both maps upsampled) and at
    // coarse width for CS (the curve's spectrum is zero-padded instead).
    let forward_len = match config.method {
        RefinementMethod::Fi => feature_width * config.scale,
        RefinementMethod::Cs => feature_width,
    };
    let inverse_len = feature_width * config.scale;
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(forward_len);
    let inverse = planner.plan_fft_inverse(inverse_len);

    let candidates: Vec<Candidate> = scenes
        .par_iter()
        .map(|scene| -> Result<Candidate> {
            let build = || -> Result<Candidate> {
                let polar = polar_transform(&scene.overhead, pano_height, pano_width)?;
                let features = extract_features(&polar)?;
                let spectra = if estimate {
                    let source = match config.method {
                        RefinementMethod::Fi => interpolate_width(&features, config.scale)?,
                        RefinementMethod::Cs => features.clone(),
                    };
                    row_spectra(&source, forward_len, &forward)
                } else {
                    Vec::new()
                };
                Ok(Candidate {
                    id: scene.id,
                    features,
                    spectra,
                })
            };
            build().map_err(|e| e.for_scene(scene.id))
        })
        .collect::<Vec<Result<Candidate>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let tags: BTreeMap<u64, &str> = scenes.iter().map(|s| (s.id, s.tag.as_str())).collect();

    scenes
        .par_iter()
        .map(|scene| -> Result<EvaluationRecord> {
            let run = || -> Result<EvaluationRecord> {
                let cropped =
                    shift_and_crop(&scene.query, 0, config.fov_degrees, feature_width)?;
                let query_features = extract_features(&cropped.image)?;

                // (similarity, candidate id, alignment shift) per candidate.
                let mut entries: Vec<(f64, u64, f64)> = Vec::with_capacity(candidates.len());
                if estimate {
                    let source = match config.method {
                        RefinementMethod::Fi => interpolate_width(&query_features, config.scale)?,
                        RefinementMethod::Cs => query_features.clone(),
                    };
                    let query_spectra = row_spectra(&source, forward_len, &forward);
                    let rows = query_spectra.len() / forward_len;
                    let mut scratch =
                        vec![Complex64::new(0.0, 0.0); inverse.get_inplace_scratch_len()];
                    let mut cross = vec![Complex64::new(0.0, 0.0); forward_len];
                    for candidate in &candidates {
                        cross.fill(Complex64::new(0.0, 0.0));
                        for r in 0..rows {
                            let q = &query_spectra[r * forward_len..(r + 1) * forward_len];
                            let c = &candidate.spectra[r * forward_len..(r + 1) * forward_len];
                            for (acc, (a, b)) in cross.iter_mut().zip(q.iter().zip(c)) {
                                *acc += a.conj() * b;
                            }
                        }
                        let mut curve = match config.method {
                            RefinementMethod::Fi => cross.clone(),
                            RefinementMethod::Cs => pad_spectrum(&cross, inverse_len),
                        };
                        inverse.process_with_scratch(&mut curve, &mut scratch);
                        let scores: Vec<f64> = curve.iter().map(|v| v.re).collect();
                        let w_est = argmax(&scores) as f64 / config.scale as f64;
                        let aligned =
                            align_and_crop(&candidate.features, w_est, config.fov_degrees)?;
                        let sim = similarity(&query_features, &aligned)?;
                        entries.push((sim, candidate.id, w_est));
                    }
                } else {
                    for candidate in &candidates {
                        let aligned =
                            align_and_crop(&candidate.features, scene.w_gt, config.fov_degrees)?;
                        let sim = similarity(&query_features, &aligned)?;
                        entries.push((sim, candidate.id, scene.w_gt));
                    }
                }

                entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let position = entries
                    .iter()
                    .position(|e| e.1 == scene.id)
                    .expect("every query's own scene is in the pool");
                let rank = u32::try_from(position + 1).map_err(|_| {
                    CvoError::InvalidConfig("candidate pool exceeds u32 ranks".into())
                })?;
                let true_entry = entries[position];
                let (theta_est, theta_est_top1) = if estimate {
                    (
                        bins_to_degrees(true_entry.2, feature_width)?,
                        Some(bins_to_degrees(entries[0].2, feature_width)?),
                    )
                } else {
                    (scene.theta_gt, None)
                };
                Ok(EvaluationRecord {
                    id: scene.id,
                    theta_gt: scene.theta_gt,
                    theta_est,
                    rank_of_true_match: NonZeroU32::new(rank).expect("rank is positive"),
                    tag: scene.tag.clone(),
                    top1_tag: tags[&entries[0].1].to_string(),
                    theta_est_top1,
                })
            };
            run().map_err(|e| e.for_scene(scene.id))
        })
        .collect::<Vec<Result<EvaluationRecord>>>()
        .into_iter()
        .collect()
}
