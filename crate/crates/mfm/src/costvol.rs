//! Low-resolution 4D correlation volume: group-wise correlation (g-cost),
//! compressed-feature concatenation (cat-cost), and their channel
//! concatenation.
//!
//! Disparity level `j` of the volume holds the full-resolution candidates
//! at stride n, i.e. cell `m = j`; the per-stage decoding downstream fills
//! in the offsets within each cell.

use ndarray::{Array4, Axis};
use rand::Rng;

use crate::domain::{Config, Error, Result};
use crate::features::FeatureMap;
use crate::nn::{Binding, Conv2dLayer, ParamStore};
use crate::tensor::{val_cat_corr, val_gwc_corr, Scalar, Tape, Var};

/// `(C_raw, k, h, w)` correlation feature stack, `C_raw = gwc_groups + 2 * cat_channels`.
#[derive(Debug, Clone)]
pub struct RawCorrelationVolume {
    pub values: Array4<f32>,
}

impl RawCorrelationVolume {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn k(&self) -> usize {
        self.values.dim().1
    }
}

/// Builds the raw volume; owns the learned 1x1 compression feeding the
/// concatenation half.
#[derive(Debug, Clone)]
pub struct CostVolumeBuilder {
    compress: Conv2dLayer,
    pub gwc_groups: usize,
    pub cat_channels: usize,
    pub k: usize,
}

impl CostVolumeBuilder {
    pub fn new<F: Scalar, R: Rng>(cfg: &Config, store: &mut ParamStore<F>, rng: &mut R) -> Self {
        let compress =
            Conv2dLayer::new(store, rng, "costvol.compress", cfg.feat_channels, cfg.cat_channels, 1, 1, 0);
        CostVolumeBuilder {
            compress,
            gwc_groups: cfg.gwc_groups,
            cat_channels: cfg.cat_channels,
            k: cfg.k(),
        }
    }

    /// Parameter handles of the shared 1x1 compression (weight, bias).
    pub fn compress_param_ids(&self) -> (crate::nn::ParamId, crate::nn::ParamId) {
        (self.compress.w, self.compress.b)
    }

    /// `(B, C, h, w)` feature pairs to the `(B, C_raw, k, h, w)` raw volume.
    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, bind: &Binding, fl: Var, fr: Var) -> Var {
        let g = tape.gwc_corr(fl, fr, self.gwc_groups, self.k);
        let flc = self.compress.forward(tape, bind, fl);
        let frc = self.compress.forward(tape, bind, fr);
        let c = tape.cat_corr(flc, frc, self.k);
        tape.concat_ch(g, c)
    }

    /// Concatenation volume for one feature pair: compress both maps with
    /// the shared 1x1 convolution, then stack `[left(x), right(x - j)]`
    /// per level. `(2 * cat_channels, k, h, w)`.
    pub fn cat_volume(
        &self,
        store: &ParamStore<f32>,
        fl: &FeatureMap,
        fr: &FeatureMap,
    ) -> Result<Array4<f32>> {
        check_pair(fl, fr)?;
        let tape: Tape<f32> = Tape::new();
        let bind = store.bind(&tape);
        let l = tape.input(fl.values.clone().insert_axis(Axis(0)).into_dyn());
        let r = tape.input(fr.values.clone().insert_axis(Axis(0)).into_dyn());
        let lc = self.compress.forward(&tape, &bind, l);
        let rc = self.compress.forward(&tape, &bind, r);
        let v = val_cat_corr(&tape.value_owned(lc), &tape.value_owned(rc), self.k);
        Ok(drop_batch(v))
    }

    /// Channel concatenation `[g-cost ; cat-cost]` as a typed volume.
    pub fn build_raw_volume(
        &self,
        store: &ParamStore<f32>,
        fl: &FeatureMap,
        fr: &FeatureMap,
        cfg: &Config,
    ) -> Result<RawCorrelationVolume> {
        let g = gwc_volume(fl, fr, self.gwc_groups, self.k)?;
        let c = self.cat_volume(store, fl, fr)?;
        let values = ndarray::concatenate(Axis(0), &[g.view(), c.view()])
            .map_err(|e| Error::Shape(format!("{e}")))?
            .as_standard_layout()
            .to_owned();
        debug_assert_eq!(values.dim().0, cfg.raw_channels());
        Ok(RawCorrelationVolume { values })
    }
}

fn check_pair(fl: &FeatureMap, fr: &FeatureMap) -> Result<()> {
    if fl.values.dim() != fr.values.dim() {
        return Err(Error::Shape(format!(
            "feature shapes differ: {:?} vs {:?}",
            fl.values.dim(),
            fr.values.dim()
        )));
    }
    Ok(())
}

fn drop_batch(v: ndarray::ArrayD<f32>) -> Array4<f32> {
    v.index_axis_move(Axis(0), 0).into_dimensionality().expect("rank-4 volume")
}

/// Group-wise correlation volume `(groups, k, h, w)`: level `j`, group `g`
/// holds the per-group mean of `fl_c(x, y) * fr_c(x - j, y)`; positions with
/// `x < j` are zero.
pub fn gwc_volume(fl: &FeatureMap, fr: &FeatureMap, groups: usize, k: usize) -> Result<Array4<f32>> {
    check_pair(fl, fr)?;
    let c = fl.values.dim().0;
    if c % groups != 0 {
        return Err(Error::Shape(format!("groups ({groups}) must divide channels ({c})")));
    }
    let l = fl.values.clone().insert_axis(Axis(0)).into_dyn();
    let r = fr.values.clone().insert_axis(Axis(0)).into_dyn();
    Ok(drop_batch(val_gwc_corr(&l, &r, groups, k)))
}
