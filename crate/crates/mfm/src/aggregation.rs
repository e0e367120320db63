//! Multistage cost aggregation: the raw correlation volume is converted to
//! an initial similarity feature volume, refined by n serial hourglass
//! stages anchored to that initial volume, and decoded into n per-stage
//! score volumes with cross-stage voting.
//!
//! Stage `s` scores the candidates at offset `s` inside every cell, so the
//! n stages together cover all `d_max` full-resolution candidates.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;

use crate::costvol::RawCorrelationVolume;
use crate::domain::{Config, Error, Result};
use crate::nn::{Binding, Conv3dLayer, ParamStore, LEAKY_SLOPE};
use crate::tensor::{Conv3dSpec, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    /// The initial volume decoded straight from the raw correlations.
    Ori,
    Stage(usize),
}

/// `(vol_channels, k, h, w)` similarity feature volume.
#[derive(Debug, Clone)]
pub struct StageFeatureVolume {
    pub values: Array4<f32>,
    pub stage: StageTag,
}

/// `(k, h, w)` decoded scores for one stage.
#[derive(Debug, Clone)]
pub struct StageScoreVolume {
    pub values: Array3<f32>,
    pub stage: usize,
}

/// Ablation variants. Order mirrors the report table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Single decode of the final refined volume; the missing disparity
    /// levels are filled by linear interpolation downstream.
    Baseline,
    /// Single stage decodes all candidates at once (n scores per cell).
    Decouple,
    /// n serial stages, each decoded from its own features alone.
    Multistage,
    /// n serial stages with cross-stage voting at decode time.
    Full,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Decouple => "decouple",
            Variant::Multistage => "multistage",
            Variant::Full => "full",
        }
    }

    pub fn all() -> [Variant; 4] {
        [Variant::Baseline, Variant::Decouple, Variant::Multistage, Variant::Full]
    }
}

/// Two 3D convolutions mapping the raw volume to `vol_channels`.
#[derive(Debug, Clone)]
pub struct OriInit {
    c1: Conv3dLayer,
    c2: Conv3dLayer,
}

impl OriInit {
    fn new<F: Scalar, R: Rng>(cfg: &Config, store: &mut ParamStore<F>, rng: &mut R) -> Self {
        let c1 = Conv3dLayer::new(
            store,
            rng,
            "agg.ori.c1",
            cfg.raw_channels(),
            cfg.vol_channels,
            Conv3dSpec::same(3),
        );
        let c2 = Conv3dLayer::new(
            store,
            rng,
            "agg.ori.c2",
            cfg.vol_channels,
            cfg.vol_channels,
            Conv3dSpec::same(3),
        );
        OriInit { c1, c2 }
    }

    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, bind: &Binding, raw: Var) -> Var {
        let x = tape.leaky_relu(self.c1.forward(tape, bind, raw), F::c(LEAKY_SLOPE));
        self.c2.forward(tape, bind, x)
    }
}

/// Shallow 3D hourglass: two stride-2 encoders, symmetric nearest-neighbor
/// upsampling with convolutions, and an additive skip at the half scale.
/// The final convolution is last, so zeroing its parameters zeroes the
/// whole output.
#[derive(Debug, Clone)]
pub struct Hourglass {
    down1: Conv3dLayer,
    down2: Conv3dLayer,
    up1: Conv3dLayer,
    pub up2: Conv3dLayer,
}

impl Hourglass {
    fn new<F: Scalar, R: Rng>(name: &str, c: usize, store: &mut ParamStore<F>, rng: &mut R) -> Self {
        let down1 = Conv3dLayer::new(store, rng, &format!("{name}.down1"), c, 2 * c, Conv3dSpec::down2(3));
        let down2 =
            Conv3dLayer::new(store, rng, &format!("{name}.down2"), 2 * c, 2 * c, Conv3dSpec::down2(3));
        let up1 = Conv3dLayer::new(store, rng, &format!("{name}.up1"), 2 * c, 2 * c, Conv3dSpec::same(3));
        let up2 = Conv3dLayer::new(store, rng, &format!("{name}.up2"), 2 * c, c, Conv3dSpec::same(3));
        Hourglass { down1, down2, up1, up2 }
    }

    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, bind: &Binding, x: Var) -> Var {
        let slope = F::c(LEAKY_SLOPE);
        let in_shape = tape.shape(x);
        let h1 = tape.leaky_relu(self.down1.forward(tape, bind, x), slope);
        let h1_shape = tape.shape(h1);
        let h2 = tape.leaky_relu(self.down2.forward(tape, bind, h1), slope);
        let u1 = tape.upsample_nearest3d_to(h2, [h1_shape[2], h1_shape[3], h1_shape[4]]);
        let u1 = tape.leaky_relu(tape.add(self.up1.forward(tape, bind, u1), h1), slope);
        let u2 = tape.upsample_nearest3d_to(u1, [in_shape[2], in_shape[3], in_shape[4]]);
        self.up2.forward(tape, bind, u2)
    }
}

/// Two 3D convolutions reducing a feature volume to score channels.
#[derive(Debug, Clone)]
pub struct DecodeHead {
    c1: Conv3dLayer,
    c2: Conv3dLayer,
}

impl DecodeHead {
    fn new<F: Scalar, R: Rng>(
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        let c1 = Conv3dLayer::new(store, rng, &format!("{name}.c1"), cin, mid, Conv3dSpec::same(3));
        let c2 = Conv3dLayer::new(store, rng, &format!("{name}.c2"), mid, cout, Conv3dSpec::same(3));
        DecodeHead { c1, c2 }
    }

    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, bind: &Binding, x: Var) -> Var {
        let h = tape.leaky_relu(self.c1.forward(tape, bind, x), F::c(LEAKY_SLOPE));
        self.c2.forward(tape, bind, h)
    }
}

/// The full aggregation trunk plus variant-specific decoding.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub variant: Variant,
    pub ori: OriInit,
    pub hourglasses: Vec<Hourglass>,
    /// One voting convolution per stage (Full variant only).
    pub vote_convs: Vec<Conv3dLayer>,
    pub heads: Vec<DecodeHead>,
    pub n: usize,
}

impl Aggregator {
    pub fn new<F: Scalar, R: Rng>(
        cfg: &Config,
        variant: Variant,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        let n = cfg.n;
        let v = cfg.vol_channels;
        let ori = OriInit::new(cfg, store, rng);
        let hourglasses =
            (0..n).map(|s| Hourglass::new(&format!("agg.stage{s}"), v, store, rng)).collect();
        let mut vote_convs = Vec::new();
        let mut heads = Vec::new();
        match variant {
            Variant::Full => {
                for s in 0..n {
                    vote_convs.push(Conv3dLayer::new(
                        store,
                        rng,
                        &format!("agg.vote{s}"),
                        v,
                        v,
                        Conv3dSpec::same(3),
                    ));
                    heads.push(DecodeHead::new(&format!("agg.head{s}"), 2 * v, v, 1, store, rng));
                }
            }
            Variant::Multistage => {
                for s in 0..n {
                    heads.push(DecodeHead::new(&format!("agg.head{s}"), v, v, 1, store, rng));
                }
            }
            Variant::Decouple => {
                heads.push(DecodeHead::new("agg.head", v, v, n, store, rng));
            }
            Variant::Baseline => {
                heads.push(DecodeHead::new("agg.head", v, v, 1, store, rng));
            }
        }
        Aggregator { variant, ori, hourglasses, vote_convs, heads, n }
    }

    /// Serial refinement: every stage is anchored to the initial volume
    /// and consumes the previous stage's output.
    pub fn stage_features<F: Scalar>(&self, tape: &Tape<F>, bind: &Binding, raw: Var) -> (Var, Vec<Var>) {
        let ori = self.ori.forward(tape, bind, raw);
        let mut feats = Vec::with_capacity(self.n);
        let mut prev = ori;
        for hg in &self.hourglasses {
            let delta = hg.forward(tape, bind, prev);
            let f = tape.add(ori, delta);
            feats.push(f);
            prev = f;
        }
        (ori, feats)
    }

    /// Sum of every stage's features except `s`.
    pub fn voting_sum<F: Scalar>(&self, tape: &Tape<F>, feats: &[Var], s: usize) -> Var {
        let mut acc: Option<Var> = None;
        for (i, f) in feats.iter().enumerate() {
            if i == s {
                continue;
            }
            acc = Some(match acc {
                None => *f,
                Some(a) => tape.add(a, *f),
            });
        }
        acc.expect("at least two stages")
    }

    /// Decoded per-stage score volumes `(B, k, h, w)`. Baseline yields one
    /// entry; every other variant yields n.
    pub fn forward_all<F: Scalar>(&self, tape: &Tape<F>, bind: &Binding, raw: Var) -> Vec<Var> {
        let (_ori, feats) = self.stage_features(tape, bind, raw);
        self.decode_all(tape, bind, &feats)
    }

    pub fn decode_all<F: Scalar>(&self, tape: &Tape<F>, bind: &Binding, feats: &[Var]) -> Vec<Var> {
        let squeeze = |v: Var| {
            let sh = tape.shape(v);
            tape.reshape(v, &[sh[0], sh[2], sh[3], sh[4]])
        };
        match self.variant {
            Variant::Full => (0..self.n)
                .map(|s| {
                    let v = self.voting_sum(tape, feats, s);
                    let vs = self.vote_convs[s].forward(tape, bind, v);
                    let cat = tape.concat_ch(vs, feats[s]);
                    squeeze(self.heads[s].forward(tape, bind, cat))
                })
                .collect(),
            Variant::Multistage => (0..self.n)
                .map(|s| squeeze(self.heads[s].forward(tape, bind, feats[s])))
                .collect(),
            Variant::Decouple => {
                let joint = self.heads[0].forward(tape, bind, feats[self.n - 1]);
                (0..self.n).map(|s| tape.select_ch(joint, s)).collect()
            }
            Variant::Baseline => {
                vec![squeeze(self.heads[0].forward(tape, bind, feats[self.n - 1]))]
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Typed single-sample operations
// ---------------------------------------------------------------------------

fn batched(v: &Array4<f32>) -> ndarray::ArrayD<f32> {
    v.clone().insert_axis(Axis(0)).into_dyn()
}

fn unbatched4(v: ndarray::ArrayD<f32>) -> Array4<f32> {
    v.index_axis_move(Axis(0), 0).into_dimensionality().expect("rank-4")
}

/// Converts a raw volume to the initial similarity features.
pub fn init_ori(
    agg: &Aggregator,
    store: &ParamStore<f32>,
    raw: &RawCorrelationVolume,
) -> Result<StageFeatureVolume> {
    let tape: Tape<f32> = Tape::new();
    let bind = store.bind(&tape);
    let r = tape.input(batched(&raw.values));
    let out = agg.ori.forward(&tape, &bind, r);
    Ok(StageFeatureVolume { values: unbatched4(tape.value_owned(out)), stage: StageTag::Ori })
}

/// One refinement step: `F_s = F_ori + De_s(F_prev)`.
pub fn stage_decouple(
    agg: &Aggregator,
    store: &ParamStore<f32>,
    prev: &StageFeatureVolume,
    ori: &StageFeatureVolume,
    s: usize,
) -> Result<StageFeatureVolume> {
    if s >= agg.n {
        return Err(Error::Index(format!("stage {s} out of range [0, {})", agg.n)));
    }
    if prev.values.dim() != ori.values.dim() {
        return Err(Error::Shape("stage volumes must share a shape".into()));
    }
    let tape: Tape<f32> = Tape::new();
    let bind = store.bind(&tape);
    let p = tape.input(batched(&prev.values));
    let o = tape.input(batched(&ori.values));
    let delta = agg.hourglasses[s].forward(&tape, &bind, p);
    let f = tape.add(o, delta);
    Ok(StageFeatureVolume { values: unbatched4(tape.value_owned(f)), stage: StageTag::Stage(s) })
}

/// Scores stage `s` from the voting sum of the other stages plus its own
/// features.
pub fn mutual_aid_decode(
    agg: &Aggregator,
    store: &ParamStore<f32>,
    all_stage_features: &[StageFeatureVolume],
    s: usize,
) -> Result<StageScoreVolume> {
    if agg.variant != Variant::Full {
        return Err(Error::State("mutual aid requires the full variant".into()));
    }
    if s >= agg.n {
        return Err(Error::Index(format!("stage {s} out of range [0, {})", agg.n)));
    }
    if all_stage_features.len() != agg.n {
        return Err(Error::Arity(format!(
            "expected {} stage feature volumes, got {}",
            agg.n,
            all_stage_features.len()
        )));
    }
    let tape: Tape<f32> = Tape::new();
    let bind = store.bind(&tape);
    let feats: Vec<Var> =
        all_stage_features.iter().map(|f| tape.input(batched(&f.values))).collect();
    let v = agg.voting_sum(&tape, &feats, s);
    let vs = agg.vote_convs[s].forward(&tape, &bind, v);
    let cat = tape.concat_ch(vs, feats[s]);
    let scores = agg.heads[s].forward(&tape, &bind, cat);
    let sh = tape.shape(scores);
    let scores = tape.reshape(scores, &[sh[0], sh[2], sh[3], sh[4]]);
    let values = tape
        .value_owned(scores)
        .index_axis_move(Axis(0), 0)
        .into_dimensionality()
        .expect("rank-3");
    Ok(StageScoreVolume { values, stage: s })
}

/// Runs the whole aggregation for one raw volume.
pub fn forward_all(
    agg: &Aggregator,
    store: &ParamStore<f32>,
    raw: &RawCorrelationVolume,
) -> Result<Vec<StageScoreVolume>> {
    let tape: Tape<f32> = Tape::new();
    let bind = store.bind(&tape);
    let r = tape.input(batched(&raw.values));
    let scores = agg.forward_all(&tape, &bind, r);
    Ok(scores
        .into_iter()
        .enumerate()
        .map(|(s, v)| StageScoreVolume {
            values: tape
                .value_owned(v)
                .index_axis_move(Axis(0), 0)
                .into_dimensionality()
                .expect("rank-3"),
            stage: s,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fdiff;
    use ndarray::ArrayD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> Config {
        let mut cfg = Config::tiny();
        cfg.vol_channels = 4;
        cfg.feat_channels = 4;
        cfg.gwc_groups = 2;
        cfg.cat_channels = 2;
        cfg.validate().unwrap()
    }

    fn build(cfg: &Config, variant: Variant) -> (Aggregator, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let agg = Aggregator::new(cfg, variant, &mut store, &mut rng);
        (agg, store)
    }

    fn rand_raw(cfg: &Config, h: usize, w: usize, seed: u64) -> RawCorrelationVolume {
        let v: ArrayD<f32> = fdiff::rand_array(&[cfg.raw_channels(), cfg.k(), h, w], seed);
        RawCorrelationVolume { values: v.into_dimensionality().unwrap() }
    }

    #[test]
    fn init_ori_shape_contract() {
        let cfg = small_cfg();
        let (agg, store) = build(&cfg, Variant::Full);
        let raw = rand_raw(&cfg, 4, 6, 1);
        let ori = init_ori(&agg, &store, &raw).unwrap();
        assert_eq!(ori.values.dim(), (cfg.vol_channels, cfg.k(), 4, 6));
        assert_eq!(ori.stage, StageTag::Ori);
    }

    #[test]
    fn zero_raw_with_zero_biases_gives_zero_ori() {
        let cfg = small_cfg();
        let (agg, store) = build(&cfg, Variant::Full);
        // biases are zero-initialized; the raw volume is all zeros
        let raw = RawCorrelationVolume {
            values: Array4::zeros((cfg.raw_channels(), cfg.k(), 4, 6)),
        };
        let ori = init_ori(&agg, &store, &raw).unwrap();
        assert!(ori.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zeroed_final_layer_makes_stage_equal_ori() {
        let cfg = small_cfg();
        let (agg, mut store) = build(&cfg, Variant::Full);
        store.set_zero(agg.hourglasses[1].up2.w);
        store.set_zero(agg.hourglasses[1].up2.b);
        let raw = rand_raw(&cfg, 4, 6, 2);
        let ori = init_ori(&agg, &store, &raw).unwrap();
        let f0 = stage_decouple(&agg, &store, &ori, &ori, 0).unwrap();
        let f1 = stage_decouple(&agg, &store, &f0, &ori, 1).unwrap();
        assert_eq!(f1.values, ori.values);
        assert_ne!(f0.values, ori.values);
    }

    #[test]
    fn stage_shape_preserved_on_random_input() {
        let cfg = small_cfg();
        let (agg, store) = build(&cfg, Variant::Full);
        let raw = rand_raw(&cfg, 4, 6, 3);
        let ori = init_ori(&agg, &store, &raw).unwrap();
        let f0 = stage_decouple(&agg, &store, &ori, &ori, 0).unwrap();
        assert_eq!(f0.values.dim(), ori.values.dim());
        assert_eq!(f0.stage, StageTag::Stage(0));
    }

    #[test]
    fn forward_all_chains_stages_serially() {
        // Recomputing the three-stage serial chain by hand must reproduce
        // forward_all step for step.
        let cfg = {
            let mut c = small_cfg();
            c.d_max = 6;
            c.n = 3;
            c.validate().unwrap()
        };
        let (agg, store) = build(&cfg, Variant::Full);
        let raw = rand_raw(&cfg, 4, 6, 4);
        let got = forward_all(&agg, &store, &raw).unwrap();

        let ori = init_ori(&agg, &store, &raw).unwrap();
        let mut feats = Vec::new();
        let mut prev = ori.clone();
        for s in 0..cfg.n {
            let f = stage_decouple(&agg, &store, &prev, &ori, s).unwrap();
            feats.push(f.clone());
            prev = f;
        }
        for s in 0..cfg.n {
            let want = mutual_aid_decode(&agg, &store, &feats, s).unwrap();
            let diff = (&got[s].values - &want.values)
                .iter()
                .fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(diff < 1e-5, "stage {s}: diff {diff}");
        }
    }

    #[test]
    fn voting_sum_excludes_own_stage() {
        let cfg = {
            let mut c = small_cfg();
            c.d_max = 6;
            c.n = 3;
            c.validate().unwrap()
        };
        let (agg, _store) = build(&cfg, Variant::Full);
        let tape: Tape<f32> = Tape::new();
        let feats: Vec<Var> = (0..3)
            .map(|i| tape.input(fdiff::rand_array(&[1, 4, 2, 2, 3], 90 + i)))
            .collect();
        let v = agg.voting_sum(&tape, &feats, 1);
        let want = &tape.value_owned(feats[0]) + &tape.value_owned(feats[2]);
        assert_eq!(tape.value_owned(v), want);
    }

    #[test]
    fn two_stage_voting_is_the_other_stage() {
        let cfg = small_cfg();
        assert_eq!(cfg.n, 2);
        let (agg, _store) = build(&cfg, Variant::Full);
        let tape: Tape<f32> = Tape::new();
        let a = tape.input(fdiff::rand_array(&[1, 4, 2, 2, 3], 95));
        let b = tape.input(fdiff::rand_array(&[1, 4, 2, 2, 3], 96));
        let v0 = agg.voting_sum(&tape, &[a, b], 0);
        let v1 = agg.voting_sum(&tape, &[a, b], 1);
        assert_eq!(tape.value_owned(v0), tape.value_owned(b));
        assert_eq!(tape.value_owned(v1), tape.value_owned(a));
    }

    #[test]
    fn voting_is_permutation_invariant() {
        let cfg = {
            let mut c = small_cfg();
            c.d_max = 8;
            c.n = 4;
            c.validate().unwrap()
        };
        let (agg, store) = build(&cfg, Variant::Full);
        let raw = rand_raw(&cfg, 4, 4, 5);
        let ori = init_ori(&agg, &store, &raw).unwrap();
        let mut feats = Vec::new();
        let mut prev = ori.clone();
        for s in 0..cfg.n {
            let f = stage_decouple(&agg, &store, &prev, &ori, s).unwrap();
            feats.push(f.clone());
            prev = f;
        }
        let base = mutual_aid_decode(&agg, &store, &feats, 2).unwrap();
        // permute the other stages (0, 1, 3) arbitrarily; stage 2 in place
        let mut permuted = feats.clone();
        permuted.swap(0, 3);
        permuted.swap(1, 0);
        // restore stage 2's own features at its slot
        permuted[2] = feats[2].clone();
        let again = mutual_aid_decode(&agg, &store, &permuted, 2).unwrap();
        let diff =
            (&base.values - &again.values).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(diff < 1e-5, "diff {diff}");
    }

    #[test]
    fn residual_anchoring_is_exact() {
        // F_s is literally the elementwise sum of F_ori and the hourglass
        // output, bitwise.
        let cfg = small_cfg();
        let (agg, store) = build(&cfg, Variant::Full);
        let raw = rand_raw(&cfg, 4, 6, 6);
        let tape: Tape<f32> = Tape::new();
        let bind = store.bind(&tape);
        let r = tape.input(batched(&raw.values));
        let ori = agg.ori.forward(&tape, &bind, r);
        let delta = agg.hourglasses[0].forward(&tape, &bind, ori);
        let f0 = tape.add(ori, delta);
        let want = &tape.value_owned(ori) + &tape.value_owned(delta);
        assert_eq!(tape.value_owned(f0), want);
    }

    #[test]
    fn forward_all_shapes_and_determinism() {
        let cfg = {
            let mut c = small_cfg();
            c.d_max = 8;
            c.n = 4;
            c.validate().unwrap()
        };
        let (agg, store) = build(&cfg, Variant::Full);
        let raw = rand_raw(&cfg, 4, 6, 7);
        let a = forward_all(&agg, &store, &raw).unwrap();
        let b = forward_all(&agg, &store, &raw).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values.dim(), (cfg.k(), 4, 6));
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn decode_arity_per_variant() {
        let cfg = small_cfg();
        for (variant, arity) in [
            (Variant::Baseline, 1usize),
            (Variant::Decouple, cfg.n),
            (Variant::Multistage, cfg.n),
            (Variant::Full, cfg.n),
        ] {
            let (agg, store) = build(&cfg, variant);
            let raw = rand_raw(&cfg, 4, 6, 8);
            let scores = forward_all(&agg, &store, &raw).unwrap();
            assert_eq!(scores.len(), arity, "variant {variant:?}");
        }
    }

    #[test]
    fn mutual_aid_index_and_arity_errors() {
        let cfg = small_cfg();
        let (agg, store) = build(&cfg, Variant::Full);
        let raw = rand_raw(&cfg, 4, 6, 9);
        let ori = init_ori(&agg, &store, &raw).unwrap();
        let f0 = stage_decouple(&agg, &store, &ori, &ori, 0).unwrap();
        let f1 = stage_decouple(&agg, &store, &f0, &ori, 1).unwrap();
        let feats = vec![f0.clone(), f1.clone()];
        assert!(matches!(
            mutual_aid_decode(&agg, &store, &feats, 2),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            mutual_aid_decode(&agg, &store, &feats[..1], 0),
            Err(Error::Arity(_))
        ));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        // No dead branches: a scalar loss over all stage scores reaches
        // every aggregation parameter.
        let cfg = small_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let agg = Aggregator::new(&cfg, Variant::Full, &mut store, &mut rng);
        let tape: Tape<f64> = Tape::new();
        let bind = store.bind(&tape);
        let raw = tape.input(fdiff::rand_array(&[1, cfg.raw_channels(), cfg.k(), 4, 6], 14));
        let scores = agg.forward_all(&tape, &bind, raw);
        let mut loss = None;
        for (i, s) in scores.iter().enumerate() {
            let w = fdiff::rand_array(&tape.shape(*s), 15 + i as u64);
            let l = tape.dot_const(*s, w);
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(acc, l),
            });
        }
        tape.backward(loss.unwrap());
        for (id, entry) in store.entries() {
            let g = tape.grad(bind.var(id)).expect("gradient");
            assert!(
                g.iter().any(|v| *v != 0.0),
                "parameter {} received no gradient",
                entry.name
            );
        }
    }
}
