//! The assembled pipeline: feature extraction, correlation volume,
//! multistage aggregation, full-volume assembly, and disparity readout,
//! with the training loss wired through both supervision paths.

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{Aggregator, Variant};
use crate::costvol::CostVolumeBuilder;
use crate::data::Batch;
use crate::domain::{Config, DisparityMap, Error, FullCostVolume, ImagePair, Result, ValidMask};
use crate::features::FeatureExtractor;
use crate::nn::{Binding, ParamStore};
use crate::supervision::{downsample_gt_batch, l1_constants, stage_ce_constants};
use crate::tensor::{Scalar, Tape, Var};

/// End-to-end model. Parameters are initialized deterministically from the
/// config seed; the same seed always builds the same network.
pub struct Network<F: Scalar> {
    pub cfg: Config,
    pub variant: Variant,
    pub store: ParamStore<F>,
    pub extractor: FeatureExtractor,
    pub costvol: CostVolumeBuilder,
    pub aggregator: Aggregator,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    /// Per-stage low-resolution score volumes; empty for the baseline
    /// variant (its single decode is consumed by the assembly directly).
    pub stage_scores: Vec<Var>,
    /// Normalized `(B, d_max, H, W)` similarity distribution.
    pub full_volume: Var,
    /// Soft-argmax disparity `(B, H, W)`.
    pub disparity: Var,
}

/// Loss terms for one batch.
pub struct LossVars {
    pub total: Var,
    pub l1: Var,
    pub stage: Option<Var>,
}

impl<F: Scalar> Network<F> {
    pub fn new(cfg: &Config, variant: Variant) -> Result<Self> {
        let cfg = cfg.clone().validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let extractor = FeatureExtractor::new(&cfg, &mut store, &mut rng)?;
        let costvol = CostVolumeBuilder::new(&cfg, &mut store, &mut rng);
        let aggregator = Aggregator::new(&cfg, variant, &mut store, &mut rng);
        Ok(Network { cfg, variant, store, extractor, costvol, aggregator })
    }

    pub fn bind(&self, tape: &Tape<F>) -> Binding {
        self.store.bind(tape)
    }

    /// Full forward pass over a `(B, 3, H, W)` image pair batch.
    pub fn forward(&self, tape: &Tape<F>, bind: &Binding, left: Var, right: Var) -> ForwardPass {
        let sh = tape.shape(left);
        let (full_h, full_w) = (sh[2], sh[3]);
        let n = self.cfg.n;
        let d_max = self.cfg.d_max;

        let fl = self.extractor.forward(tape, bind, left);
        let fr = self.extractor.forward(tape, bind, right);
        let raw = self.costvol.forward(tape, bind, fl, fr);
        let decoded = self.aggregator.forward_all(tape, bind, raw);

        let (stage_scores, full) = match self.variant {
            Variant::Baseline => {
                let up = tape.bilinear_up2d(decoded[0], full_h, full_w);
                (Vec::new(), tape.disp_lerp(up, n, d_max))
            }
            _ => {
                let ups: Vec<Var> =
                    decoded.iter().map(|s| tape.bilinear_up2d(*s, full_h, full_w)).collect();
                (decoded, tape.interleave(&ups))
            }
        };
        let full_volume = tape.softmax1(full);
        let disparity = tape.soft_argmax1(full_volume);
        ForwardPass { stage_scores, full_volume, disparity }
    }

    /// Builds the scalar training loss for a forward pass: masked mean
    /// absolute disparity error plus (when stage scores exist) the per-stage
    /// cross-entropy.
    pub fn loss(
        &self,
        tape: &Tape<F>,
        pass: &ForwardPass,
        gt: &Array3<f32>,
        mask: &Array3<bool>,
    ) -> Result<LossVars> {
        let (target, weights) = l1_constants::<F>(gt, mask)?;
        let l1 = tape.masked_l1(pass.disparity, target, weights);
        if pass.stage_scores.is_empty() {
            return Ok(LossVars { total: l1, l1, stage: None });
        }
        let (gt_low, mask_low) = downsample_gt_batch(gt, mask, self.cfg.n);
        let consts = stage_ce_constants::<F>(&gt_low, &mask_low, &self.cfg)?;
        let mut stage_total: Option<Var> = None;
        for (score, c) in pass.stage_scores.iter().zip(consts) {
            let lsm = tape.log_softmax1(*score);
            let term = tape.dot_const(lsm, c);
            stage_total = Some(match stage_total {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
        let stage = stage_total.expect("at least one stage");
        let total = tape.add(stage, l1);
        Ok(LossVars { total, l1, stage: Some(stage) })
    }
}

/// Inference output for one image pair.
pub struct Inference {
    pub volume: FullCostVolume,
    /// Soft-argmax readout (the training-time estimate).
    pub soft: DisparityMap,
    /// Parabolic sub-pixel readout (the reported estimate).
    pub subpixel: DisparityMap,
}

impl Network<f32> {
    /// Runs the pipeline on one pair and extracts the typed outputs.
    pub fn infer(&self, pair: &ImagePair) -> Result<Inference> {
        let (h, w) = (pair.height(), pair.width());
        if h % self.cfg.n != 0 || w % self.cfg.n != 0 {
            return Err(Error::Shape(format!(
                "image dims {h}x{w} must divide by n={}",
                self.cfg.n
            )));
        }
        let tape: Tape<f32> = Tape::new();
        let bind = self.bind(&tape);
        let left = tape.input(crate::features::image_to_chw_batch(&pair.left).into_dyn());
        let right = tape.input(crate::features::image_to_chw_batch(&pair.right).into_dyn());
        let pass = self.forward(&tape, &bind, left, right);
        let scores: Array3<f32> = tape
            .value_owned(pass.full_volume)
            .index_axis_move(Axis(0), 0)
            .into_dimensionality()
            .expect("rank-3 volume");
        let volume = FullCostVolume { scores, normalized: true };
        let soft = crate::regression::soft_argmax(&volume)?;
        let subpixel = crate::regression::parabolic_subpixel(&volume)?;
        Ok(Inference { volume, soft, subpixel })
    }

    /// Forward + loss on a training batch, returning the tape for the
    /// backward pass along with the loss handles.
    pub fn training_step(&self, batch: &Batch) -> Result<(Tape<f32>, Binding, LossVars)> {
        let tape: Tape<f32> = Tape::new();
        let bind = self.bind(&tape);
        let left = tape.input(batch.left.clone().into_dyn());
        let right = tape.input(batch.right.clone().into_dyn());
        let pass = self.forward(&tape, &bind, left, right);
        let loss = self.loss(&tape, &pass, &batch.gt, &batch.mask)?;
        Ok((tape, bind, loss))
    }
}

/// Downsamples a full-resolution mask/gt pair and returns typed views, used
/// by eval paths that need the low-resolution grid.
pub fn low_res_gt(
    gt: &DisparityMap,
    mask: &ValidMask,
    n: usize,
) -> (DisparityMap, ValidMask) {
    crate::supervision::downsample_gt(gt, mask, n)
}
