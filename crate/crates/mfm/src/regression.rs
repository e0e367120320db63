//! Disparity readout from the normalized cost volume: differentiable
//! soft-argmax for training, three-point parabolic vertex fitting for
//! inference.

use ndarray::{Array2, Axis};

use crate::domain::{DisparityMap, Error, FullCostVolume, Result};
use crate::tensor::val_soft_argmax1;

/// Expectation of the disparity index under the similarity distribution.
pub fn soft_argmax(v: &FullCostVolume) -> Result<DisparityMap> {
    if !v.normalized {
        return Err(Error::State("soft_argmax requires a normalized volume".into()));
    }
    let b = v.scores.clone().insert_axis(Axis(0)).into_dyn();
    let d = val_soft_argmax1(&b).index_axis_move(Axis(0), 0);
    Ok(DisparityMap::full(d.into_dimensionality().expect("rank-2")))
}

/// Sub-pixel disparity from the score peak and its two neighbors: the
/// vertex of the parabola through them, clamped to half a pixel. Peaks on
/// the range boundary, and flat triples, fall back to the integer peak.
pub fn parabolic_subpixel(v: &FullCostVolume) -> Result<DisparityMap> {
    if !v.normalized {
        return Err(Error::State("parabolic_subpixel requires a normalized volume".into()));
    }
    let (d_max, h, w) = v.scores.dim();
    if d_max < 3 {
        return Err(Error::Shape(format!("need at least 3 disparity levels, got {d_max}")));
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = v.scores[[0, y, x]];
            for d in 1..d_max {
                let s = v.scores[[d, y, x]];
                if s > best_v {
                    best_v = s;
                    best = d;
                }
            }
            // The vertex is cancellation-prone; evaluate it in f64.
            let delta = if best == 0 || best == d_max - 1 {
                0.0
            } else {
                let sm = v.scores[[best - 1, y, x]] as f64;
                let s0 = best_v as f64;
                let sp = v.scores[[best + 1, y, x]] as f64;
                let denom = 2.0 * (sm - 2.0 * s0 + sp);
                if denom.abs() < 1e-12 {
                    0.0
                } else {
                    ((sm - sp) / denom).clamp(-0.5, 0.5)
                }
            };
            out[[y, x]] = (best as f64 + delta) as f32;
        }
    }
    Ok(DisparityMap::full(out))
}
