//! Per-stage supervision distributions and the training losses.
//!
//! Every stage is supervised with a Gaussian-shaped similarity target over
//! its k cells, `S(m, i) = exp(-(m*n + i - d_gt)^2)`, normalized per stage
//! and matched against the stage's softmax with cross-entropy. The final
//! disparity additionally receives a masked mean-absolute-error term.

use ndarray::{Array3, ArrayD, IxDyn};

use crate::aggregation::StageScoreVolume;
use crate::domain::{Config, DisparityMap, Error, Resolution, Result, ValidMask};
use crate::tensor::Scalar;

/// `(k, h, w)` target similarity scores for one stage, before the per-stage
/// normalization applied inside the loss.
#[derive(Debug, Clone)]
pub struct StageLabelVolume {
    pub values: Array3<f32>,
    pub stage: usize,
}

/// Nearest-pixel spatial downsampling of ground truth and mask; disparity
/// values stay in full-resolution units.
pub fn downsample_gt(gt: &DisparityMap, mask: &ValidMask, n: usize) -> (DisparityMap, ValidMask) {
    let (h, w) = gt.values.dim();
    let (lh, lw) = (h / n, w / n);
    let mut values = ndarray::Array2::<f32>::zeros((lh, lw));
    let mut flags = ndarray::Array2::<bool>::from_elem((lh, lw), false);
    for y in 0..lh {
        for x in 0..lw {
            values[[y, x]] = gt.values[[y * n, x * n]];
            flags[[y, x]] = mask.flags[[y * n, x * n]];
        }
    }
    (DisparityMap::low(values), ValidMask { flags })
}

/// Builds the n per-stage label volumes for a low-resolution ground truth.
/// Invalid pixels carry zeros and are excluded by the mask downstream.
pub fn stage_labels(
    gt_low: &DisparityMap,
    mask_low: &ValidMask,
    cfg: &Config,
) -> Result<Vec<StageLabelVolume>> {
    if gt_low.resolution != Resolution::Low {
        return Err(Error::State("stage labels expect low-resolution ground truth".into()));
    }
    let (h, w) = gt_low.values.dim();
    if mask_low.flags.dim() != (h, w) {
        return Err(Error::Shape("mask shape mismatch".into()));
    }
    let (n, k) = (cfg.n, cfg.k());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut values = Array3::<f32>::zeros((k, h, w));
        for y in 0..h {
            for x in 0..w {
                if !mask_low.flags[[y, x]] {
                    continue;
                }
                let d = gt_low.values[[y, x]];
                if !(0.0..(cfg.d_max as f32)).contains(&d) {
                    return Err(Error::Range(format!(
                        "ground-truth disparity {d} outside [0, {})",
                        cfg.d_max
                    )));
                }
                for m in 0..k {
                    let cand = (m * n + i) as f32;
                    values[[m, y, x]] = (-(cand - d).powi(2)).exp();
                }
            }
        }
        out.push(StageLabelVolume { values, stage: i });
    }
    Ok(out)
}

/// Mean (over valid pixels) of the summed per-stage cross-entropies between
/// the softmax of each stage's scores and its normalized label
/// distribution.
pub fn stage_loss(
    scores: &[StageScoreVolume],
    labels: &[StageLabelVolume],
    mask_low: &ValidMask,
) -> Result<f32> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score volumes vs {} label volumes",
            scores.len(),
            labels.len()
        )));
    }
    let (k, h, w) = scores[0].values.dim();
    for (s, l) in scores.iter().zip(labels) {
        if s.values.dim() != (k, h, w) || l.values.dim() != (k, h, w) {
            return Err(Error::Shape("stage volume shape mismatch".into()));
        }
    }
    if mask_low.flags.dim() != (h, w) {
        return Err(Error::Shape("mask shape mismatch".into()));
    }
    let valid = mask_low.count();
    if valid == 0 {
        return Err(Error::Mask("no valid pixels".into()));
    }
    let mut acc = 0.0f64;
    for (s, l) in scores.iter().zip(labels) {
        for y in 0..h {
            for x in 0..w {
                if !mask_low.flags[[y, x]] {
                    continue;
                }
                // softmax of the k scores at this pixel
                let mut mx = f64::NEG_INFINITY;
                for m in 0..k {
                    mx = mx.max(s.values[[m, y, x]] as f64);
                }
                let mut z = 0.0f64;
                for m in 0..k {
                    z += ((s.values[[m, y, x]] as f64) - mx).exp();
                }
                let log_z = mx + z.ln();
                // normalized label distribution
                let mut lsum = 0.0f64;
                for m in 0..k {
                    lsum += l.values[[m, y, x]] as f64;
                }
                for m in 0..k {
                    let p = l.values[[m, y, x]] as f64 / lsum;
                    if p > 0.0 {
                        acc -= p * ((s.values[[m, y, x]] as f64) - log_z);
                    }
                }
            }
        }
    }
    Ok((acc / valid as f64) as f32)
}

/// Mean absolute disparity error over valid pixels.
pub fn l1_loss(d_pred: &DisparityMap, d_gt: &DisparityMap, mask: &ValidMask) -> Result<f32> {
    if d_pred.values.dim() != d_gt.values.dim() || d_pred.values.dim() != mask.flags.dim() {
        return Err(Error::Shape("disparity/mask shape mismatch".into()));
    }
    let valid = mask.count();
    if valid == 0 {
        return Err(Error::Mask("no valid pixels".into()));
    }
    let mut acc = 0.0f64;
    for ((p, g), m) in d_pred.values.iter().zip(d_gt.values.iter()).zip(mask.flags.iter()) {
        if *m {
            acc += (*p - *g).abs() as f64;
        }
    }
    Ok((acc / valid as f64) as f32)
}

/// Unit-weight sum of the two loss terms.
pub fn total_loss(l_stage: f32, l_1: f32) -> Result<f32> {
    if !l_stage.is_finite() || !l_1.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss terms: {l_stage}, {l_1}")));
    }
    Ok(l_stage + l_1)
}

// ---------------------------------------------------------------------------
// Batched constants for the training tape
// ---------------------------------------------------------------------------

/// Nearest-pixel downsampling of a `(B, H, W)` ground-truth batch.
pub fn downsample_gt_batch(
    gt: &Array3<f32>,
    mask: &Array3<bool>,
    n: usize,
) -> (Array3<f32>, Array3<bool>) {
    let (b, h, w) = gt.dim();
    let (lh, lw) = (h / n, w / n);
    let mut lg = Array3::<f32>::zeros((b, lh, lw));
    let mut lm = Array3::<bool>::from_elem((b, lh, lw), false);
    for bi in 0..b {
        for y in 0..lh {
            for x in 0..lw {
                lg[[bi, y, x]] = gt[[bi, y * n, x * n]];
                lm[[bi, y, x]] = mask[[bi, y * n, x * n]];
            }
        }
    }
    (lg, lm)
}

/// Per-stage constant tensors `C_i` such that the stage cross-entropy term
/// is `sum_i dot(log_softmax(P_i), C_i)`: the normalized labels, negated,
/// masked, and divided by the batch's valid-pixel count.
pub fn stage_ce_constants<F: Scalar>(
    gt_low: &Array3<f32>,
    mask_low: &Array3<bool>,
    cfg: &Config,
) -> Result<Vec<ArrayD<F>>> {
    let (b, h, w) = gt_low.dim();
    let (n, k) = (cfg.n, cfg.k());
    let valid = mask_low.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::Mask("no valid pixels in batch".into()));
    }
    let inv = 1.0 / valid as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = ArrayD::<F>::zeros(IxDyn(&[b, k, h, w]));
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    if !mask_low[[bi, y, x]] {
                        continue;
                    }
                    let d = gt_low[[bi, y, x]] as f64;
                    if !(0.0..cfg.d_max as f64).contains(&d) {
                        return Err(Error::Range(format!(
                            "ground-truth disparity {d} outside [0, {})",
                            cfg.d_max
                        )));
                    }
                    let mut lsum = 0.0f64;
                    let mut lane = vec![0.0f64; k];
                    for m in 0..k {
                        let cand = (m * n + i) as f64;
                        lane[m] = (-(cand - d).powi(2)).exp();
                        lsum += lane[m];
                    }
                    for m in 0..k {
                        c[[bi, m, y, x]] = F::c(-(lane[m] / lsum) * inv);
                    }
                }
            }
        }
        out.push(c);
    }
    Ok(out)
}

/// Target and weight tensors for the masked mean-absolute-error term:
/// weights are `1/|valid|` at valid pixels, zero elsewhere.
pub fn l1_constants<F: Scalar>(
    gt: &Array3<f32>,
    mask: &Array3<bool>,
) -> Result<(ArrayD<F>, ArrayD<F>)> {
    let (b, h, w) = gt.dim();
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::Mask("no valid pixels in batch".into()));
    }
    let inv = F::c(1.0 / valid as f64);
    let mut target = ArrayD::<F>::zeros(IxDyn(&[b, h, w]));
    let mut weights = ArrayD::<F>::zeros(IxDyn(&[b, h, w]));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if mask[[bi, y, x]] {
                    target[[bi, y, x]] = F::c(gt[[bi, y, x]] as f64);
                    weights[[bi, y, x]] = inv;
                }
            }
        }
    }
    Ok((target, weights))
}
