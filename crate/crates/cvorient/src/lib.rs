//! Fine-grained camera-orientation estimation for panoramic street imagery.
//!
//! The crate matches a ground-level panorama against overhead (satellite)
//! views: the overhead image is warped into panorama geometry with a polar
//! transform, both sides are reduced to feature maps whose width axis is
//! circular, and the relative orientation is recovered as the argmax of a
//! circular cross-correlation. Two sub-pixel refinements sharpen the coarse
//! peak: feature interpolation (upsample both maps, then correlate) and
//! curve smoothing (band-limited upsampling of the coarse correlation curve
//! via spectral zero-padding).
//!
//! On top of the estimator sit the matching losses (weighted soft-margin
//! triplet loss with cosine distance plus an orientation-error term), a
//! retrieval evaluation suite (1° error histogram, mean/median error, r@x°,
//! recall@k, per-dataset hit rates, all/matched/matched-to-all modes), a
//! deterministic synthetic scene generator with exactly known ground truth,
//! and a batch retrieval engine that ranks candidate pools in known- or
//! unknown-orientation modes.
//!
//! # Quick start
//! ```
//! use cvorient::{
//!     cross_correlate, estimate_fi, extract_features, polar_transform, shift_and_crop,
//!     RefinementMethod,
//! };
//!
//! # fn run() -> cvorient::Result<()> {
//! # let overhead = cvorient::synth::generate_scenes(7, 1, 64, 32, 64)?
//! #     .pop().unwrap().overhead;
//! // Warp a square overhead image into panorama geometry and fake a query
//! // whose orientation offset is known exactly.
//! let panorama = polar_transform(&overhead, 32, 64)?;
//! let shifted = shift_and_crop(&panorama, 24, 360.0, 8)?;
//!
//! let satellite = extract_features(&panorama)?;
//! let street = extract_features(&shifted.image)?;
//! let estimate = estimate_fi(&street, &satellite, 10)?;
//! assert_eq!(estimate.method, RefinementMethod::Fi);
//! assert!((estimate.w_est - shifted.w_gt).abs() < 0.1);
//! # Ok(())
//! # }
//! # run().unwrap();
//! ```

pub mod angles;
pub mod correlation;
mod error;
pub mod evaluation;
pub mod features;
pub mod imaging;
pub mod losses;
pub mod retrieval;
pub mod synth;

pub use angles::{angle_diff, bins_to_degrees, degrees_to_bins, AngleError, SouthAlignedAngle};
pub use correlation::{
    align_and_crop, cross_correlate, estimate_cs, estimate_fi, similarity, spectral_zero_pad,
    CorrelationCurve, OrientationEstimate, RefinementMethod,
};
pub use error::{CvoError, Result};
pub use evaluation::{
    build_report, emit_report, error_histogram, evaluate_mode, histogram_csv, hit_rate,
    mean_angle_error, median_angle_error, rate_below, recall_at_k, report_json, EvalMode,
    ErrorHistogram, EvaluationRecord, ModeMetrics, Report, ReportMetrics,
};
pub use features::{
    extract_features, frobenius_norm, interpolate_width, l2_normalize, read_fmap, write_fmap,
    FeatureMap, FEATURE_CHANNELS, FEATURE_HEIGHT, WIDTH_STRIDE,
};
pub use imaging::{
    polar_source, polar_transform, random_shift, shift_and_crop, RasterImage, ShiftResult,
};
pub use losses::{
    angle_loss, batch_triplets, combined_loss, cosine_distance, cosine_distance_grad, toy_fit,
    triplet_loss, triplet_loss_grad, BatchLosses, ChannelAffine, CosineGrads, LossConfig,
    PairAlignment, ToyFit, TripletBatch, TripletGrads,
};
pub use retrieval::{run_retrieval, OrientationMode, RetrievalConfig, RetrievalScene};
pub use synth::{generate_scenes, SyntheticScene};
