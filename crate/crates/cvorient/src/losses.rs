//! The matching objectives as pure scalar functions: orientation angle loss,
//! weighted soft-margin triplet loss over cosine distances, the combined
//! objective, batch-all triplet enumeration, analytic gradients, and a toy
//! optimizer that fits a per-channel affine map to street features.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::correlation::{align_and_crop, similarity};
use crate::error::{CvoError, Result};
use crate::features::FeatureMap;

/// Loss hyperparameters: the soft-margin sharpness `alpha` and the angle-loss
/// weight `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl LossConfig {
    /// Validates `alpha > 0` and `beta ≥ 0`.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(CvoError::InvalidConfig(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        if !beta.is_finite() || beta < 0.0 {
            return Err(CvoError::InvalidConfig(format!(
                "beta must be nonnegative, got {beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 0.3,
        }
    }
}

/// Numerically stable `ln(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Orientation-error loss in [0, 1]: the circular bin distance between
/// estimate and ground truth as a fraction of the maximum half-width error,
/// `(W/2 − ||w_gt − w_est| − W/2|) / (W/2)`. Inputs are reduced modulo `W`.
pub fn angle_loss(w_gt: f64, w_est: f64, width: usize) -> Result<f64> {
    if width == 0 {
        return Err(CvoError::InvalidFeatureWidth);
    }
    if !w_gt.is_finite() || !w_est.is_finite() {
        return Err(CvoError::InvalidValues(
            "bin shifts must be finite".into(),
        ));
    }
    let w = width as f64;
    let raw = (w_gt.rem_euclid(w) - w_est.rem_euclid(w)).abs();
    let half = w / 2.0;
    Ok((half - (raw - half).abs()) / half)
}

/// Cosine distance `2(1 − cos)` between equal-shape feature maps, in [0, 4].
pub fn cosine_distance(f1: &FeatureMap, f2: &FeatureMap) -> Result<f64> {
    Ok(2.0 * (1.0 - similarity(f1, f2)?))
}

/// Cosine-distance stats shared by the analytic gradient formulas:
/// `∂D/∂a_i = −2·(b_i/(‖a‖‖b‖) − cos·a_i/‖a‖²)` and symmetrically for `b`.
#[derive(Debug, Clone, Copy)]
struct PairStats {
    dist: f64,
    inv_norms: f64,
    cos_over_na2: f64,
    cos_over_nb2: f64,
}

fn pair_stats(a: &[f64], b: &[f64]) -> PairStats {
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    let norms = (na2 * nb2).sqrt();
    let cos = dot / norms;
    PairStats {
        dist: 2.0 * (1.0 - cos),
        inv_norms: 1.0 / norms,
        cos_over_na2: cos / na2,
        cos_over_nb2: cos / nb2,
    }
}

/// The value and analytic gradients of [`cosine_distance`].
#[derive(Debug, Clone)]
pub struct CosineGrads {
    pub value: f64,
    /// ∂D/∂(first argument), row-major.
    pub left: Vec<f64>,
    /// ∂D/∂(second argument), row-major.
    pub right: Vec<f64>,
}

/// Cosine distance together with its gradients w.r.t. every entry of both
/// maps.
pub fn cosine_distance_grad(f1: &FeatureMap, f2: &FeatureMap) -> Result<CosineGrads> {
    // Validation (shape equality, nonzero norms) and the reported value are
    // shared with the plain path so the two never drift apart.
    let value = cosine_distance(f1, f2)?;
    let a = f1.values();
    let b = f2.values();
    let stats = pair_stats(a, b);
    let left = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| -2.0 * (y * stats.inv_norms - stats.cos_over_na2 * x))
        .collect();
    let right = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| -2.0 * (x * stats.inv_norms - stats.cos_over_nb2 * y))
        .collect();
    Ok(CosineGrads { value, left, right })
}

/// Weighted soft-margin triplet loss
/// `ln(1 + exp(α·(D(A,P) − D(A,N))))`, evaluated in softplus form so extreme
/// margins (α = 10 with distances spanning [0, 4]) neither overflow nor
/// collapse to zero.
pub fn triplet_loss(
    anchor: &FeatureMap,
    positive: &FeatureMap,
    negative: &FeatureMap,
    alpha: f64,
) -> Result<f64> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(CvoError::InvalidConfig(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let d_ap = cosine_distance(anchor, positive)?;
    let d_an = cosine_distance(anchor, negative)?;
    Ok(softplus(alpha * (d_ap - d_an)))
}

/// The value and analytic gradients of [`triplet_loss`].
#[derive(Debug, Clone)]
pub struct TripletGrads {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Triplet loss together with its gradients w.r.t. every entry of the three
/// maps: `∂L/∂θ = σ(α·Δ)·α·(∂D_AP/∂θ − ∂D_AN/∂θ)` with `Δ = D_AP − D_AN`.
pub fn triplet_loss_grad(
    anchor: &FeatureMap,
    positive: &FeatureMap,
    negative: &FeatureMap,
    alpha: f64,
) -> Result<TripletGrads> {
    let loss = triplet_loss(anchor, positive, negative, alpha)?;
    let a = anchor.values();
    let ap = pair_stats(a, positive.values());
    let an = pair_stats(a, negative.values());
    let margin = alpha * (ap.dist - an.dist);
    let weight = sigmoid(margin) * alpha;

    let p = positive.values();
    let n = negative.values();
    let mut anchor_grad = Vec::with_capacity(a.len());
    let mut positive_grad = Vec::with_capacity(a.len());
    let mut negative_grad = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let d_ap_da = -2.0 * (p[i] * ap.inv_norms - ap.cos_over_na2 * a[i]);
        let d_an_da = -2.0 * (n[i] * an.inv_norms - an.cos_over_na2 * a[i]);
        anchor_grad.push(weight * (d_ap_da - d_an_da));
        let d_ap_dp = -2.0 * (a[i] * ap.inv_norms - ap.cos_over_nb2 * p[i]);
        positive_grad.push(weight * d_ap_dp);
        let d_an_dn = -2.0 * (a[i] * an.inv_norms - an.cos_over_nb2 * n[i]);
        negative_grad.push(weight * -d_an_dn);
    }
    Ok(TripletGrads {
        loss,
        anchor: anchor_grad,
        positive: positive_grad,
        negative: negative_grad,
    })
}

/// The combined objective: the sum of the triplet terms plus `beta` times the
/// sum of the per-pair angle terms.
///
/// # Panics
/// Panics if `beta` is negative or non-finite.
pub fn combined_loss(triplet_terms: &[f64], angle_terms: &[f64], beta: f64) -> f64 {
    assert!(
        beta.is_finite() && beta >= 0.0,
        "beta must be nonnegative, got {beta}"
    );
    triplet_terms.iter().sum::<f64>() + beta * angle_terms.iter().sum::<f64>()
}

/// The ground-truth and estimated alignment of one street/satellite pair, in
/// satellite feature bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairAlignment {
    pub w_gt: f64,
    pub w_est: f64,
}

/// An index-paired mini-batch of street and satellite feature maps with the
/// alignment each pair's satellite map is shifted by before the losses are
/// evaluated.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    streets: Vec<FeatureMap>,
    satellites: Vec<FeatureMap>,
    alignments: Vec<PairAlignment>,
    fov_degrees: f64,
}

impl TripletBatch {
    /// Validates that there are at least two consistently shaped pairs and
    /// that aligning a satellite map at the given field of view produces
    /// exactly the street shape.
    pub fn new(
        streets: Vec<FeatureMap>,
        satellites: Vec<FeatureMap>,
        alignments: Vec<PairAlignment>,
        fov_degrees: f64,
    ) -> Result<Self> {
        let size = streets.len();
        if size < 2 {
            return Err(CvoError::InvalidConfig(format!(
                "triplet batch needs at least 2 pairs, got {size}"
            )));
        }
        if satellites.len() != size || alignments.len() != size {
            return Err(CvoError::InvalidConfig(format!(
                "mismatched batch lengths: {size} streets, {} satellites, {} alignments",
                satellites.len(),
                alignments.len()
            )));
        }
        let street_shape = streets[0].shape();
        if streets.iter().any(|m| m.shape() != street_shape) {
            return Err(CvoError::InvalidConfig(
                "street maps must share one shape".into(),
            ));
        }
        let sat_shape = satellites[0].shape();
        if satellites.iter().any(|m| m.shape() != sat_shape) {
            return Err(CvoError::InvalidConfig(
                "satellite maps must share one shape".into(),
            ));
        }
        // The alignment path must reproduce the street shape exactly; probe it
        // once with the first pair.
        let probe = align_and_crop(&satellites[0], alignments[0].w_est, fov_degrees)?;
        if probe.shape() != street_shape {
            return Err(CvoError::ShapeMismatch {
                left: street_shape,
                right: probe.shape(),
            });
        }
        let sat_width = sat_shape.1 as f64;
        for (i, alignment) in alignments.iter().enumerate() {
            for (name, value) in [("w_gt", alignment.w_gt), ("w_est", alignment.w_est)] {
                if !value.is_finite() || value < 0.0 || value >= sat_width {
                    return Err(CvoError::InvalidValues(format!(
                        "pair {i}: {name} = {value} outside [0, {sat_width})"
                    )));
                }
            }
        }
        Ok(Self {
            streets,
            satellites,
            alignments,
            fov_degrees,
        })
    }

    /// Number of pairs B.
    pub fn len(&self) -> usize {
        self.streets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streets.is_empty()
    }

    pub fn streets(&self) -> &[FeatureMap] {
        &self.streets
    }

    pub fn satellites(&self) -> &[FeatureMap] {
        &self.satellites
    }

    pub fn alignments(&self) -> &[PairAlignment] {
        &self.alignments
    }

    pub fn fov_degrees(&self) -> f64 {
        self.fov_degrees
    }

    /// The satellite maps after alignment and FOV cropping.
    fn aligned_satellites(&self) -> Result<Vec<FeatureMap>> {
        self.satellites
            .iter()
            .zip(&self.alignments)
            .map(|(sat, alignment)| align_and_crop(sat, alignment.w_est, self.fov_degrees))
            .collect()
    }
}

/// All per-triplet and per-pair losses of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLosses {
    /// 2B(B−1) triplet losses: first every street anchor against each
    /// non-matching aligned satellite, then every aligned-satellite anchor
    /// against each non-matching street, in (anchor, negative) index order.
    pub triplet: Vec<f64>,
    /// B angle losses, one per matched pair.
    pub angle: Vec<f64>,
}

impl BatchLosses {
    pub fn mean_triplet(&self) -> f64 {
        self.triplet.iter().sum::<f64>() / self.triplet.len() as f64
    }

    pub fn mean_angle(&self) -> f64 {
        self.angle.iter().sum::<f64>() / self.angle.len() as f64
    }
}

/// Enumerates the batch-all triplets in both matching directions
/// (street→satellite and satellite→street): each anchor pairs with its
/// matched positive and all B−1 other candidates as negatives, yielding
/// exactly 2B(B−1) triplet losses plus B angle losses.
pub fn batch_triplets(batch: &TripletBatch, config: &LossConfig) -> Result<BatchLosses> {
    let aligned = batch.aligned_satellites()?;
    let streets = batch.streets();
    let size = batch.len();
    let mut triplet = Vec::with_capacity(2 * size * (size - 1));
    for (i, anchor) in streets.iter().enumerate() {
        for (j, negative) in aligned.iter().enumerate() {
            if i != j {
                triplet.push(triplet_loss(anchor, &aligned[i], negative, config.alpha)?);
            }
        }
    }
    for (i, anchor) in aligned.iter().enumerate() {
        for (j, negative) in streets.iter().enumerate() {
            if i != j {
                triplet.push(triplet_loss(anchor, &streets[i], negative, config.alpha)?);
            }
        }
    }
    let sat_width = batch.satellites()[0].width();
    let angle = batch
        .alignments()
        .iter()
        .map(|alignment| angle_loss(alignment.w_gt, alignment.w_est, sat_width))
        .collect::<Result<Vec<f64>>>()?;
    Ok(BatchLosses { triplet, angle })
}

/// A per-channel scale-and-bias transform over feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ChannelAffine {
    /// The identity transform over `channels` channels.
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            bias: vec![0.0; channels],
        }
    }

    /// A deterministic random initialization: scales in [0.5, 1.5), biases in
    /// [−0.2, 0.2).
    pub fn random(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            scale: (0..channels).map(|_| rng.random_range(0.5..1.5)).collect(),
            bias: (0..channels).map(|_| rng.random_range(-0.2..0.2)).collect(),
        }
    }

    /// Applies the transform channel-wise: `v′ = scale[c]·v + bias[c]`.
    pub fn apply(&self, map: &FeatureMap) -> Result<FeatureMap> {
        let (height, width, channels) = map.shape();
        if self.scale.len() != channels || self.bias.len() != channels {
            return Err(CvoError::InvalidConfig(format!(
                "affine transform over {} channels applied to a {channels}-channel map",
                self.scale.len()
            )));
        }
        FeatureMap::from_fn(height, width, channels, |y, x, c| {
            self.scale[c] * map.get(y, x, c) + self.bias[c]
        })
    }
}

/// The outcome of [`toy_fit`].
#[derive(Debug, Clone)]
pub struct ToyFit {
    /// Fitted per-channel transform of the street features.
    pub params: ChannelAffine,
    /// Mean combined loss before every step and after the last one
    /// (`steps + 1` entries). The angle term is a constant metric.
    pub trace: Vec<f64>,
    /// The constant mean angle loss of the batch.
    pub mean_angle_loss: f64,
}

/// Objective value and parameter gradients at one optimizer state.
struct ToyEval {
    objective: f64,
    grad_scale: Vec<f64>,
    grad_bias: Vec<f64>,
}

/// Fits a per-channel scale-and-bias on the street features by plain gradient
/// descent on the mean batch triplet loss. The angle loss is reported in the
/// trace (weighted by `config.beta`) but not differentiated: the estimate
/// behind it comes from an argmax peak pick with no useful gradient. Returns
/// the fitted transform and the loss trace; a non-finite loss aborts with the
/// step it appeared at.
pub fn toy_fit(
    batch: &TripletBatch,
    init: &ChannelAffine,
    steps: usize,
    learning_rate: f64,
    config: &LossConfig,
) -> Result<ToyFit> {
    if steps == 0 {
        return Err(CvoError::InvalidConfig("steps must be at least 1".into()));
    }
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(CvoError::InvalidConfig(format!(
            "learning rate must be nonnegative, got {learning_rate}"
        )));
    }
    let channels = batch.streets()[0].channels();
    if init.scale.len() != channels || init.bias.len() != channels {
        return Err(CvoError::InvalidConfig(format!(
            "initialization over {} channels for a {channels}-channel batch",
            init.scale.len()
        )));
    }

    let aligned = batch.aligned_satellites()?;
    let aligned: Vec<&[f64]> = aligned.iter().map(|m| m.values()).collect();
    let streets: Vec<&[f64]> = batch.streets().iter().map(|m| m.values()).collect();
    let losses = batch_triplets_angle_only(batch)?;
    let mean_angle_loss = losses.iter().sum::<f64>() / losses.len() as f64;

    let mut params = init.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let eval = toy_evaluate(&streets, &aligned, &params, channels, config.alpha);
        if !eval.objective.is_finite() {
            return Err(CvoError::Divergence { step });
        }
        trace.push(eval.objective + config.beta * mean_angle_loss);
        if step == steps {
            break;
        }
        for c in 0..channels {
            params.scale[c] -= learning_rate * eval.grad_scale[c];
            params.bias[c] -= learning_rate * eval.grad_bias[c];
        }
    }
    Ok(ToyFit {
        params,
        trace,
        mean_angle_loss,
    })
}

fn batch_triplets_angle_only(batch: &TripletBatch) -> Result<Vec<f64>> {
    let sat_width = batch.satellites()[0].width();
    batch
        .alignments()
        .iter()
        .map(|alignment| angle_loss(alignment.w_gt, alignment.w_est, sat_width))
        .collect()
}

/// Mean triplet loss and its gradients w.r.t. the affine parameters, with the
/// transform applied to street features only. Runs on raw value slices so a
/// diverging parameter state surfaces as a non-finite objective instead of a
/// construction error.
fn toy_evaluate(
    streets: &[&[f64]],
    aligned: &[&[f64]],
    params: &ChannelAffine,
    channels: usize,
    alpha: f64,
) -> ToyEval {
    let size = streets.len();
    let cells = streets[0].len();
    let transformed: Vec<Vec<f64>> = streets
        .iter()
        .map(|street| {
            street
                .iter()
                .enumerate()
                .map(|(idx, &v)| params.scale[idx % channels] * v + params.bias[idx % channels])
                .collect()
        })
        .collect();

    let mut objective = 0.0;
    let mut street_grads = vec![vec![0.0f64; cells]; size];
    let count = (2 * size * (size - 1)) as f64;

    // Street anchors against aligned satellites: only the anchor depends on
    // the parameters.
    for i in 0..size {
        let anchor = &transformed[i];
        let ap = pair_stats(anchor, aligned[i]);
        for j in 0..size {
            if i == j {
                continue;
            }
            let an = pair_stats(anchor, aligned[j]);
            let margin = alpha * (ap.dist - an.dist);
            objective += softplus(margin);
            let weight = sigmoid(margin) * alpha / count;
            let grad = &mut street_grads[i];
            for (idx, g) in grad.iter_mut().enumerate() {
                let d_ap_da =
                    -2.0 * (aligned[i][idx] * ap.inv_norms - ap.cos_over_na2 * anchor[idx]);
                let d_an_da =
                    -2.0 * (aligned[j][idx] * an.inv_norms - an.cos_over_na2 * anchor[idx]);
                *g += weight * (d_ap_da - d_an_da);
            }
        }
    }
    // Aligned-satellite anchors against streets: the positive and the
    // negative both depend on the parameters.
    for i in 0..size {
        let anchor = aligned[i];
        let ap = pair_stats(anchor, &transformed[i]);
        for j in 0..size {
            if i == j {
                continue;
            }
            let an = pair_stats(anchor, &transformed[j]);
            let margin = alpha * (ap.dist - an.dist);
            objective += softplus(margin);
            let weight = sigmoid(margin) * alpha / count;
            for idx in 0..cells {
                let d_ap_dp =
                    -2.0 * (anchor[idx] * ap.inv_norms - ap.cos_over_nb2 * transformed[i][idx]);
                street_grads[i][idx] += weight * d_ap_dp;
                let d_an_dn =
                    -2.0 * (anchor[idx] * an.inv_norms - an.cos_over_nb2 * transformed[j][idx]);
                street_grads[j][idx] -= weight * d_an_dn;
            }
        }
    }

    // Chain through v′ = scale[c]·v + bias[c].
    let mut grad_scale = vec![0.0f64; channels];
    let mut grad_bias = vec![0.0f64; channels];
    for (street, grads) in streets.iter().zip(&street_grads) {
        for (idx, (&v, &g)) in street.iter().zip(grads).enumerate() {
            grad_scale[idx % channels] += g * v;
            grad_bias[idx % channels] += g;
        }
    }
    ToyEval {
        objective: objective / count,
        grad_scale,
        grad_bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::angles::{angle_diff, bins_to_degrees};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = std::f64::consts::LN_2;
    /// ln(1 + exp(-40)), the loss of a perfectly separated triplet at alpha = 10.
    const FLOOR_40: f64 = 4.248354255291589e-18;

    /// A 1x2x1 map holding the unit vector at `theta` radians, so cosine
    /// distances between two such maps are exactly 2(1 - cos(dtheta)).
    fn unit_pair(theta: f64) -> FeatureMap {
        FeatureMap::new(1, 2, 1, vec![theta.cos(), theta.sin()]).unwrap()
    }

    fn random_map(height: usize, width: usize, channels: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(height, width, channels, |_, _, _| {
            rng.random_range(-1.0..1.0)
        })
        .unwrap()
    }

    fn roll_right(map: &FeatureMap, shift: usize) -> FeatureMap {
        let (h, w, c) = map.shape();
        FeatureMap::from_fn(h, w, c, |y, x, ch| map.get(y, (x + w - shift % w) % w, ch)).unwrap()
    }

    #[test]
    fn angle_loss_matches_worked_examples() {
        assert_eq!(angle_loss(0.0, 0.0, 64).unwrap(), 0.0);
        assert_eq!(angle_loss(0.0, 32.0, 64).unwrap(), 1.0);
        assert_eq!(angle_loss(0.0, 48.0, 64).unwrap(), 0.5);
        assert_eq!(angle_loss(48.0, 0.0, 64).unwrap(), 0.5);
        assert_eq!(angle_loss(2.0, 62.0, 64).unwrap(), 0.125);
    }

    #[test]
    fn angle_loss_reduces_inputs_modulo_width() {
        assert_eq!(angle_loss(0.25, 64.25, 64).unwrap(), 0.0);
        assert_eq!(angle_loss(-16.0, 16.0, 64).unwrap(), 1.0);
    }

    #[test]
    fn angle_loss_is_the_normalized_angular_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let w_gt = rng.random_range(0.0..64.0);
            let w_est = rng.random_range(0.0..64.0);
            let loss = angle_loss(w_gt, w_est, 64).unwrap();
            assert!((0.0..=1.0).contains(&loss));
            let theta_gt = bins_to_degrees(w_gt, 64).unwrap();
            let theta_est = bins_to_degrees(w_est, 64).unwrap();
            let expected = angle_diff(theta_gt, theta_est).degrees() / 180.0;
            assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn angle_loss_rejects_bad_inputs() {
        assert!(matches!(
            angle_loss(0.0, 0.0, 0),
            Err(CvoError::InvalidFeatureWidth)
        ));
        assert!(angle_loss(f64::NAN, 0.0, 64).is_err());
    }

    #[test]
    fn cosine_distance_spans_zero_to_four() {
        let a = random_map(2, 4, 2, 1);
        let neg = FeatureMap::from_fn(2, 4, 2, |y, x, c| -a.get(y, x, c)).unwrap();
        let self_distance = cosine_distance(&a, &a).unwrap();
        assert!((0.0..1e-12).contains(&self_distance));
        assert_abs_diff_eq!(cosine_distance(&a, &neg).unwrap(), 4.0, epsilon = 1e-12);
        let e1 = unit_pair(0.0);
        let e2 = unit_pair(std::f64::consts::FRAC_PI_2);
        assert_abs_diff_eq!(cosine_distance(&e1, &e2).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn cosine_distance_rejects_degenerate_inputs() {
        let a = random_map(2, 4, 2, 1);
        let b = random_map(2, 5, 2, 1);
        assert!(matches!(
            cosine_distance(&a, &b),
            Err(CvoError::ShapeMismatch { .. })
        ));
        let zero = FeatureMap::new(2, 4, 2, vec![0.0; 16]).unwrap();
        assert!(matches!(
            cosine_distance(&a, &zero),
            Err(CvoError::DegenerateFeatures)
        ));
    }

    #[test]
    fn equidistant_triplet_costs_ln_two() {
        let anchor = unit_pair(0.0);
        let positive = unit_pair(1.0);
        let negative = unit_pair(-1.0);
        assert_abs_diff_eq!(
            triplet_loss(&anchor, &positive, &negative, 10.0).unwrap(),
            LN_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn separated_triplet_reaches_the_softplus_floor() {
        let anchor = random_map(2, 4, 2, 3);
        let negative = FeatureMap::from_fn(2, 4, 2, |y, x, c| -anchor.get(y, x, c)).unwrap();
        let loss = triplet_loss(&anchor, &anchor, &negative, 10.0).unwrap();
        assert_relative_eq!(loss, FLOOR_40, max_relative = 1e-12);

        // The mirrored margin must not overflow either.
        let inverted = triplet_loss(&anchor, &negative, &anchor, 10.0).unwrap();
        assert_relative_eq!(inverted, 40.0 + FLOOR_40, max_relative = 1e-12);
    }

    #[test]
    fn loss_decreases_as_the_negative_moves_away() {
        let anchor = unit_pair(0.0);
        let positive = unit_pair(0.7);
        let mut last = f64::INFINITY;
        for step in 1..=6 {
            let negative = unit_pair(0.5 * step as f64);
            let loss = triplet_loss(&anchor, &positive, &negative, 10.0).unwrap();
            assert!(loss < last, "loss should fall as the negative recedes");
            last = loss;
        }
    }

    #[test]
    fn triplet_loss_validates_alpha() {
        let a = unit_pair(0.0);
        assert!(triplet_loss(&a, &a, &a, 0.0).is_err());
        assert!(triplet_loss(&a, &a, &a, -3.0).is_err());
        assert!(triplet_loss(&a, &a, &a, f64::NAN).is_err());
    }

    fn fd_relative_check(analytic: f64, fd: f64) {
        let denom = (analytic.abs() + fd.abs()).max(1e-6);
        assert!(
            ((analytic - fd) / denom).abs() <= 1e-4,
            "gradient mismatch: analytic {analytic}, finite difference {fd}"
        );
    }

    #[test]
    fn cosine_gradients_match_central_differences() {
        let h = 1e-5;
        for seed in 0..10 {
            let a = random_map(2, 3, 2, 100 + seed);
            let b = random_map(2, 3, 2, 200 + seed);
            let grads = cosine_distance_grad(&a, &b).unwrap();
            assert_abs_diff_eq!(
                grads.value,
                cosine_distance(&a, &b).unwrap(),
                epsilon = 1e-15
            );
            for idx in 0..a.values().len() {
                let mut plus = a.values().to_vec();
                let mut minus = a.values().to_vec();
                plus[idx] += h;
                minus[idx] -= h;
                let plus = FeatureMap::new(2, 3, 2, plus).unwrap();
                let minus = FeatureMap::new(2, 3, 2, minus).unwrap();
                let fd = (cosine_distance(&plus, &b).unwrap()
                    - cosine_distance(&minus, &b).unwrap())
                    / (2.0 * h);
                fd_relative_check(grads.left[idx], fd);

                let mut plus = b.values().to_vec();
                let mut minus = b.values().to_vec();
                plus[idx] += h;
                minus[idx] -= h;
                let plus = FeatureMap::new(2, 3, 2, plus).unwrap();
                let minus = FeatureMap::new(2, 3, 2, minus).unwrap();
                let fd = (cosine_distance(&a, &plus).unwrap()
                    - cosine_distance(&a, &minus).unwrap())
                    / (2.0 * h);
                fd_relative_check(grads.right[idx], fd);
            }
        }
    }

    #[test]
    fn triplet_gradients_match_central_differences() {
        let h = 1e-5;
        let alpha = 10.0;
        let shape = (2usize, 3usize, 2usize);
        for seed in 0..30 {
            let anchor = random_map(shape.0, shape.1, shape.2, 300 + seed);
            let positive = random_map(shape.0, shape.1, shape.2, 400 + seed);
            let negative = random_map(shape.0, shape.1, shape.2, 500 + seed);
            let grads = triplet_loss_grad(&anchor, &positive, &negative, alpha).unwrap();
            assert_abs_diff_eq!(
                grads.loss,
                triplet_loss(&anchor, &positive, &negative, alpha).unwrap(),
                epsilon = 1e-15
            );
            let rebuild = |m: &FeatureMap, idx: usize, delta: f64| {
                let mut values = m.values().to_vec();
                values[idx] += delta;
                FeatureMap::new(shape.0, shape.1, shape.2, values).unwrap()
            };
            for idx in 0..anchor.values().len() {
                let fd = (triplet_loss(&rebuild(&anchor, idx, h), &positive, &negative, alpha)
                    .unwrap()
                    - triplet_loss(&rebuild(&anchor, idx, -h), &positive, &negative, alpha)
                        .unwrap())
                    / (2.0 * h);
                fd_relative_check(grads.anchor[idx], fd);
                let fd = (triplet_loss(&anchor, &rebuild(&positive, idx, h), &negative, alpha)
                    .unwrap()
                    - triplet_loss(&anchor, &rebuild(&positive, idx, -h), &negative, alpha)
                        .unwrap())
                    / (2.0 * h);
                fd_relative_check(grads.positive[idx], fd);
                let fd = (triplet_loss(&anchor, &positive, &rebuild(&negative, idx, h), alpha)
                    .unwrap()
                    - triplet_loss(&anchor, &positive, &rebuild(&negative, idx, -h), alpha)
                        .unwrap())
                    / (2.0 * h);
                fd_relative_check(grads.negative[idx], fd);
            }
        }
    }

    #[test]
    fn combined_loss_weights_the_angle_terms() {
        assert_abs_diff_eq!(combined_loss(&[0.7], &[0.5], 0.3), 0.85, epsilon = 1e-15);
        assert_eq!(combined_loss(&[0.7, 0.3], &[0.9], 0.0), 1.0);
        assert_eq!(combined_loss(&[], &[], 0.3), 0.0);
    }

    #[test]
    #[should_panic(expected = "beta must be nonnegative")]
    fn combined_loss_rejects_negative_beta() {
        combined_loss(&[0.1], &[0.1], -0.5);
    }

    fn simple_batch(size: usize, fov_degrees: f64) -> TripletBatch {
        let streets: Vec<FeatureMap> = (0..size).map(|i| random_map(2, 4, 2, i as u64)).collect();
        let satellites: Vec<FeatureMap> = streets.clone();
        let alignments = vec![
            PairAlignment {
                w_gt: 0.0,
                w_est: 0.0,
            };
            size
        ];
        TripletBatch::new(streets, satellites, alignments, fov_degrees).unwrap()
    }

    #[test]
    fn batch_enumerates_two_b_b_minus_one_triplets() {
        let config = LossConfig::default();
        for size in [2usize, 3, 5] {
            let losses = batch_triplets(&simple_batch(size, 360.0), &config).unwrap();
            assert_eq!(losses.triplet.len(), 2 * size * (size - 1));
            assert_eq!(losses.angle.len(), size);
        }
    }

    #[test]
    fn perfectly_separated_batch_sits_on_the_floor() {
        let street = random_map(2, 4, 2, 9);
        let opposite = FeatureMap::from_fn(2, 4, 2, |y, x, c| -street.get(y, x, c)).unwrap();
        let alignments = vec![
            PairAlignment {
                w_gt: 0.0,
                w_est: 0.0,
            };
            2
        ];
        let batch = TripletBatch::new(
            vec![street.clone(), opposite.clone()],
            vec![street, opposite],
            alignments,
            360.0,
        )
        .unwrap();
        let losses = batch_triplets(&batch, &LossConfig::default()).unwrap();
        assert_eq!(losses.triplet.len(), 4);
        for loss in &losses.triplet {
            assert_relative_eq!(*loss, FLOOR_40, max_relative = 1e-9);
        }
        assert_eq!(losses.angle, vec![0.0, 0.0]);
        assert_abs_diff_eq!(losses.mean_triplet(), FLOOR_40, epsilon = 1e-20);
        assert_eq!(losses.mean_angle(), 0.0);
    }

    #[test]
    fn batch_loss_sum_is_order_invariant() {
        let config = LossConfig::default();
        let streets: Vec<FeatureMap> = (0..4).map(|i| random_map(2, 4, 2, 40 + i)).collect();
        let satellites: Vec<FeatureMap> = (0..4).map(|i| random_map(2, 4, 2, 50 + i)).collect();
        let alignments: Vec<PairAlignment> = (0..4)
            .map(|i| PairAlignment {
                w_gt: i as f64,
                w_est: (i as f64 + 0.5) % 4.0,
            })
            .collect();
        let forward = TripletBatch::new(
            streets.clone(),
            satellites.clone(),
            alignments.clone(),
            360.0,
        )
        .unwrap();
        let order = [2usize, 0, 3, 1];
        let reordered = TripletBatch::new(
            order.iter().map(|&i| streets[i].clone()).collect(),
            order.iter().map(|&i| satellites[i].clone()).collect(),
            order.iter().map(|&i| alignments[i]).collect(),
            360.0,
        )
        .unwrap();
        let a = batch_triplets(&forward, &config).unwrap();
        let b = batch_triplets(&reordered, &config).unwrap();
        assert_abs_diff_eq!(
            a.triplet.iter().sum::<f64>(),
            b.triplet.iter().sum::<f64>(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            a.angle.iter().sum::<f64>(),
            b.angle.iter().sum::<f64>(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn correct_alignment_beats_a_wrong_one() {
        // Satellites are rolled copies of the streets; aligning at the true
        // shift brings every positive to distance zero.
        let config = LossConfig::default();
        let streets: Vec<FeatureMap> = (0..3).map(|i| random_map(2, 8, 2, 60 + i)).collect();
        let shift = 3usize;
        let satellites: Vec<FeatureMap> = streets.iter().map(|s| roll_right(s, shift)).collect();
        let aligned = |w_est: f64| {
            let alignments = vec![
                PairAlignment {
                    w_gt: shift as f64,
                    w_est,
                };
                3
            ];
            let batch = TripletBatch::new(
                streets.clone(),
                satellites.clone(),
                alignments,
                360.0,
            )
            .unwrap();
            batch_triplets(&batch, &config)
                .unwrap()
                .triplet
                .iter()
                .sum::<f64>()
        };
        assert!(aligned(shift as f64) < aligned(0.0));
    }

    #[test]
    fn batch_construction_rejects_inconsistent_inputs() {
        let a = random_map(2, 4, 2, 1);
        let b = random_map(2, 4, 2, 2);
        let pair = PairAlignment {
            w_gt: 0.0,
            w_est: 0.0,
        };
        assert!(TripletBatch::new(vec![a.clone()], vec![b.clone()], vec![pair], 360.0).is_err());
        assert!(TripletBatch::new(
            vec![a.clone(), b.clone()],
            vec![a.clone()],
            vec![pair, pair],
            360.0
        )
        .is_err());
        let tall = random_map(4, 4, 2, 3);
        assert!(TripletBatch::new(
            vec![a.clone(), tall],
            vec![a.clone(), b.clone()],
            vec![pair, pair],
            360.0
        )
        .is_err());
        // Half-FOV alignment halves the satellite width, which no longer
        // matches the street maps.
        assert!(matches!(
            TripletBatch::new(
                vec![a.clone(), b.clone()],
                vec![a.clone(), b.clone()],
                vec![pair, pair],
                180.0
            ),
            Err(CvoError::ShapeMismatch { .. })
        ));
        let out_of_range = PairAlignment {
            w_gt: 0.0,
            w_est: 4.0,
        };
        assert!(TripletBatch::new(
            vec![a.clone(), b.clone()],
            vec![a.clone(), b.clone()],
            vec![pair, out_of_range],
            360.0
        )
        .is_err());
    }

    #[test]
    fn half_fov_batch_pairs_cropped_streets() {
        // 360-degree satellites against half-width street maps: alignment
        // crops the satellites down to the street width.
        let satellites: Vec<FeatureMap> = (0..2).map(|i| random_map(2, 8, 2, 70 + i)).collect();
        let streets: Vec<FeatureMap> = satellites
            .iter()
            .map(|s| FeatureMap::from_fn(2, 4, 2, |y, x, c| s.get(y, x, c)).unwrap())
            .collect();
        let alignments = vec![
            PairAlignment {
                w_gt: 0.0,
                w_est: 0.0,
            };
            2
        ];
        let batch = TripletBatch::new(streets.clone(), satellites.clone(), alignments, 180.0)
            .unwrap();
        let losses = batch_triplets(&batch, &LossConfig::default()).unwrap();
        assert_eq!(losses.triplet.len(), 4);
        // w_est = 0 with a matching crop means every positive coincides with
        // its anchor, so each loss sits strictly below the equidistant ln 2
        // mark.
        for (street, satellite) in streets.iter().zip(&satellites) {
            let aligned = align_and_crop(satellite, 0.0, 180.0).unwrap();
            assert!(cosine_distance(street, &aligned).unwrap() < 1e-12);
        }
        assert!(losses.triplet.iter().all(|&l| l < LN_2));
    }

    #[test]
    fn identity_affine_is_a_no_op() {
        let map = random_map(2, 4, 3, 5);
        let out = ChannelAffine::identity(3).apply(&map).unwrap();
        assert_eq!(out.values(), map.values());
    }

    #[test]
    fn random_affine_is_seed_deterministic() {
        let a = ChannelAffine::random(4, 9);
        let b = ChannelAffine::random(4, 9);
        let c = ChannelAffine::random(4, 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.scale.iter().all(|s| (0.5..1.5).contains(s)));
        assert!(a.bias.iter().all(|b| (-0.2..0.2).contains(b)));
    }

    #[test]
    fn affine_apply_checks_channel_count() {
        let map = random_map(2, 4, 3, 5);
        assert!(ChannelAffine::identity(2).apply(&map).is_err());
    }

    #[test]
    fn zero_learning_rate_freezes_the_trace() {
        let batch = simple_batch(3, 360.0);
        let init = ChannelAffine::random(2, 21);
        let fit = toy_fit(&batch, &init, 8, 0.0, &LossConfig::default()).unwrap();
        assert_eq!(fit.trace.len(), 9);
        for value in &fit.trace[1..] {
            assert_eq!(*value, fit.trace[0]);
        }
        assert_eq!(fit.params, init);
    }

    #[test]
    fn toy_fit_descends_on_a_separable_batch() {
        let batch = simple_batch(3, 360.0);
        // Any init with positive scales leaves this batch essentially solved
        // (the objective sits on the softplus floor), so corrupt one channel
        // with a sign flip: positive pairs then look no better than negatives
        // and the fit has to repair the transform.
        let init = ChannelAffine {
            scale: vec![-1.0, 1.0],
            bias: vec![0.1, -0.1],
        };
        let config = LossConfig::default();
        let fit = toy_fit(&batch, &init, 120, 0.4, &config).unwrap();
        assert_eq!(fit.trace.len(), 121);
        let first = fit.trace[0];
        let last = *fit.trace.last().unwrap();
        assert!(
            last < 0.8 * first,
            "expected a clear descent, got {first} -> {last}"
        );
        // The angle metric never moves: it has no gradient path.
        assert_abs_diff_eq!(fit.mean_angle_loss, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn toy_fit_reports_divergence_with_its_step() {
        let batch = simple_batch(3, 360.0);
        // The cosine objective is scale-invariant, so a merely large step
        // cannot blow it up; divergence means parameter overflow. Start from
        // the corrupted transform (whose gradients are O(1) rather than
        // floor-level) and take a maximal step: the update overflows the
        // parameters to ±inf and the next evaluation goes non-finite.
        let init = ChannelAffine {
            scale: vec![-1.0, 1.0],
            bias: vec![0.1, -0.1],
        };
        match toy_fit(&batch, &init, 50, f64::MAX, &LossConfig::default()) {
            Err(CvoError::Divergence { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn toy_fit_validates_its_arguments() {
        let batch = simple_batch(2, 360.0);
        let init = ChannelAffine::identity(2);
        assert!(toy_fit(&batch, &init, 0, 0.1, &LossConfig::default()).is_err());
        assert!(toy_fit(&batch, &init, 5, -0.1, &LossConfig::default()).is_err());
        assert!(toy_fit(&batch, &init, 5, f64::NAN, &LossConfig::default()).is_err());
        let wrong = ChannelAffine::identity(3);
        assert!(toy_fit(&batch, &wrong, 5, 0.1, &LossConfig::default()).is_err());
    }

    #[test]
    fn loss_config_validates_its_ranges() {
        assert!(LossConfig::new(10.0, 0.3).is_ok());
        assert!(LossConfig::new(10.0, 0.0).is_ok());
        assert!(LossConfig::new(0.0, 0.3).is_err());
        assert!(LossConfig::new(10.0, -0.1).is_err());
        assert!(LossConfig::new(f64::INFINITY, 0.3).is_err());
        let config = LossConfig::default();
        assert_eq!(config.alpha, 10.0);
        assert_eq!(config.beta, 0.3);
    }
}
