//! Shared-weight 2D convolutional feature extraction at 1/n scale.
//!
//! One extractor, applied independently to each image of the pair. The
//! total stride n is reached with log2(n) stride-2 convolutions, so n must
//! be a power of two here (the rest of the pipeline has no such limit).

use ndarray::{Array3, Array4};
use rand::Rng;

use crate::domain::{Config, Error, ImagePair, Result};
use crate::nn::{Binding, Conv2dLayer, ParamStore, LEAKY_SLOPE};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// `(C, H/n, W/n)` feature plane for one image.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array3<f32>,
    pub side: Side,
}

/// Stem of stride-2 convolutions, residual blocks at the final scale, and a
/// linear projection head.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stem: Vec<Conv2dLayer>,
    blocks: Vec<(Conv2dLayer, Conv2dLayer)>,
    head: Conv2dLayer,
    n: usize,
}

impl FeatureExtractor {
    pub fn new<F: Scalar, R: Rng>(
        cfg: &Config,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        if !cfg.n.is_power_of_two() {
            return Err(Error::Shape(format!(
                "feature extractor requires a power-of-two n, got {}",
                cfg.n
            )));
        }
        let c = cfg.feat_channels;
        let levels = cfg.n.trailing_zeros() as usize;
        let mut stem = Vec::with_capacity(levels);
        let mut cin = 3;
        for l in 0..levels {
            stem.push(Conv2dLayer::new(store, rng, &format!("features.stem{l}"), cin, c, 3, 2, 1));
            cin = c;
        }
        let blocks = (0..cfg.feat_blocks)
            .map(|i| {
                (
                    Conv2dLayer::new(store, rng, &format!("features.block{i}.a"), c, c, 3, 1, 1),
                    Conv2dLayer::new(store, rng, &format!("features.block{i}.b"), c, c, 3, 1, 1),
                )
            })
            .collect();
        let head = Conv2dLayer::new(store, rng, "features.head", c, c, 3, 1, 1);
        Ok(FeatureExtractor { stem, blocks, head, n: cfg.n })
    }

    pub fn stride(&self) -> usize {
        self.n
    }

    /// `(B, 3, H, W)` image batch to `(B, C, H/n, W/n)` features.
    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, bind: &Binding, images: Var) -> Var {
        let slope = F::c(LEAKY_SLOPE);
        let sh = tape.shape(images);
        assert_eq!(sh.len(), 4, "extractor expects (B, 3, H, W)");
        assert!(
            sh[2].is_multiple_of(self.n) && sh[3].is_multiple_of(self.n),
            "image dims {}x{} not divisible by n={}",
            sh[2],
            sh[3],
            self.n
        );
        let mut x = images;
        for conv in &self.stem {
            x = tape.leaky_relu(conv.forward(tape, bind, x), slope);
        }
        for (a, b) in &self.blocks {
            let y = tape.leaky_relu(a.forward(tape, bind, x), slope);
            let y = b.forward(tape, bind, y);
            x = tape.leaky_relu(tape.add(x, y), slope);
        }
        self.head.forward(tape, bind, x)
    }
}

/// Runs the shared extractor over both images of a pair.
pub fn extract(
    extractor: &FeatureExtractor,
    store: &ParamStore<f32>,
    pair: &ImagePair,
) -> Result<(FeatureMap, FeatureMap)> {
    let (h, w) = (pair.height(), pair.width());
    if h % extractor.n != 0 || w % extractor.n != 0 {
        return Err(Error::Shape(format!(
            "image dims {h}x{w} not divisible by n={}",
            extractor.n
        )));
    }
    let tape: Tape<f32> = Tape::new();
    let bind = store.bind(&tape);
    let left = tape.input(image_to_chw_batch(&pair.left).into_dyn());
    let right = tape.input(image_to_chw_batch(&pair.right).into_dyn());
    let fl = extractor.forward(&tape, &bind, left);
    let fr = extractor.forward(&tape, &bind, right);
    Ok((
        FeatureMap { values: batch_to_c_hw(&tape.value_owned(fl)), side: Side::Left },
        FeatureMap { values: batch_to_c_hw(&tape.value_owned(fr)), side: Side::Right },
    ))
}

/// `(H, W, 3)` to `(1, 3, H, W)`.
pub fn image_to_chw_batch(img: &Array3<f32>) -> Array4<f32> {
    let (h, w, c) = img.dim();
    let mut out = Array4::<f32>::zeros((1, c, h, w));
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                out[[0, ci, y, x]] = img[[y, x, ci]];
            }
        }
    }
    out
}

fn batch_to_c_hw(batch: &ndarray::ArrayD<f32>) -> Array3<f32> {
    let sh = batch.shape();
    assert_eq!(sh[0], 1);
    let mut out = Array3::<f32>::zeros((sh[1], sh[2], sh[3]));
    for c in 0..sh[1] {
        for y in 0..sh[2] {
            for x in 0..sh[3] {
                out[[c, y, x]] = batch[[0, c, y, x]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fdiff;
    use ndarray::ArrayD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &Config) -> (FeatureExtractor, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let ex = FeatureExtractor::new(cfg, &mut store, &mut rng).unwrap();
        (ex, store)
    }

    #[test]
    fn output_shape_is_one_nth() {
        let mut cfg = Config::desk();
        cfg.feat_channels = 32;
        let (ex, store) = build(&cfg);
        let tape: Tape<f32> = Tape::new();
        let bind = store.bind(&tape);
        let x = tape.input(fdiff::rand_array(&[1, 3, 64, 96], 1));
        let y = ex.forward(&tape, &bind, x);
        assert_eq!(tape.shape(y), vec![1, 32, 16, 24]);
    }

    #[test]
    fn identical_images_give_identical_features() {
        let cfg = Config::tiny();
        let (ex, store) = build(&cfg);
        let img = ndarray::Array3::from_shape_fn((8, 12, 3), |(y, x, c)| {
            ((y * 31 + x * 7 + c * 3) % 13) as f32 / 13.0
        });
        let pair = ImagePair::new(img.clone(), img, cfg.n).unwrap();
        let (fl, fr) = extract(&ex, &store, &pair).unwrap();
        assert_eq!(fl.values, fr.values);
        assert_eq!(fl.side, Side::Left);
        assert_eq!(fr.side, Side::Right);
    }

    #[test]
    fn swapping_inputs_swaps_outputs_exactly() {
        let cfg = Config::tiny();
        let (ex, store) = build(&cfg);
        let a = ndarray::Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            ((y + 2 * x + c) % 7) as f32 / 7.0
        });
        let b = ndarray::Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            ((3 * y + x + 2 * c) % 11) as f32 / 11.0
        });
        let p1 = ImagePair::new(a.clone(), b.clone(), cfg.n).unwrap();
        let p2 = ImagePair::new(b, a, cfg.n).unwrap();
        let (l1, r1) = extract(&ex, &store, &p1).unwrap();
        let (l2, r2) = extract(&ex, &store, &p2).unwrap();
        assert_eq!(l1.values, r2.values);
        assert_eq!(r1.values, l2.values);
    }

    #[test]
    fn deterministic_across_runs() {
        let cfg = Config::tiny();
        let (ex, store) = build(&cfg);
        let img = ndarray::Array3::from_shape_fn((8, 12, 3), |(y, x, c)| {
            ((y * 5 + x * 3 + c) % 17) as f32 / 17.0
        });
        let pair = ImagePair::new(img.clone(), img, cfg.n).unwrap();
        let (a, _) = extract(&ex, &store, &pair).unwrap();
        let (b, _) = extract(&ex, &store, &pair).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn rejects_non_power_of_two_n() {
        let mut cfg = Config::tiny();
        cfg.d_max = 12;
        cfg.n = 3;
        let cfg = cfg.validate().unwrap();
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            FeatureExtractor::new(&cfg, &mut store, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn extractor_gradients_match_finite_differences() {
        // Double precision, tiny net, scalar loss over features.
        let cfg = Config::tiny();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = FeatureExtractor::new(&cfg, &mut store, &mut rng).unwrap();
        let img: ArrayD<f64> = fdiff::rand_array(&[1, 3, 4, 6], 4);

        // analytic
        let tape: Tape<f64> = Tape::new();
        let bind = store.bind(&tape);
        let x = tape.input(img.clone());
        let y = ex.forward(&tape, &bind, x);
        let wts = fdiff::rand_array(&tape.shape(y), 5);
        let loss = tape.dot_const(y, wts.clone());
        tape.backward(loss);

        let eval = |st: &ParamStore<f64>| -> f64 {
            let t: Tape<f64> = Tape::new();
            let b = st.bind(&t);
            let x = t.input(img.clone());
            let y = ex.forward(&t, &b, x);
            let l = t.dot_const(y, wts.clone());
            t.value_owned(l)[[]]
        };

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let pick = rng.gen_range(0..store.len());
            let id = store.entries().nth(pick).unwrap().0;
            let len = store.value(id).len();
            let elem = rng.gen_range(0..len);
            let analytic = tape.grad(bind.var(id)).unwrap().as_slice().unwrap()[elem];
            let eps = 1e-5;
            let mut st = store.clone();
            st.value_mut(id).as_slice_mut().unwrap()[elem] += eps;
            let lp = eval(&st);
            st.value_mut(id).as_slice_mut().unwrap()[elem] -= 2.0 * eps;
            let lm = eval(&st);
            let numeric = (lp - lm) / (2.0 * eps);
            worst = worst.max(fdiff::grad_error(analytic, numeric));
        }
        assert!(worst < 1e-2, "max rel err {worst}");
    }
}
