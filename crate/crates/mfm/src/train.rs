//! Optimizer, learning-rate schedule, checkpointing, and the training loop.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::aggregation::Variant;
use crate::domain::{Config, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Scalar;

/// Optimization schedule and run bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs after which the learning rate is multiplied by `lr_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub data_dir: PathBuf,
    /// Crop dims for training batches; 0 means the full frame.
    pub crop_h: usize,
    pub crop_w: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 2,
            base_lr: 0.001,
            lr_milestones: Vec::new(),
            lr_factor: 0.5,
            epochs: 10,
            seed: 1,
            checkpoint_dir: PathBuf::from("runs/default"),
            data_dir: PathBuf::from("data/train"),
            crop_h: 0,
            crop_w: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: batch 8, 16 epochs, lr halved after epochs 10, 12, 14.
    pub fn sceneflow() -> Self {
        TrainConfig {
            batch_size: 8,
            lr_milestones: vec![10, 12, 14],
            lr_factor: 0.5,
            epochs: 16,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Range("batch_size and epochs must be positive".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Range("base_lr must be positive".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::Range(format!(
                "lr_factor must lie in (0, 1], got {}",
                self.lr_factor
            )));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Range("lr_milestones must be strictly increasing".into()));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::Range("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate for an epoch: the base rate times one factor per milestone
/// already passed (an epoch strictly greater than the milestone).
pub fn lr_at(epoch: usize, tc: &TrainConfig) -> f64 {
    let passed = tc.lr_milestones.iter().filter(|&&m| epoch > m).count();
    tc.base_lr * tc.lr_factor.powi(passed as i32)
}

/// Adam with bias correction. Moment buffers sit in declaration order next
/// to the [`ParamStore`], so every parameter is stepped exactly once.
pub struct Adam<F: Scalar> {
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
    pub step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, beta1: f64, beta2: f64) -> Self {
        let m = store.entries().map(|(_, e)| ArrayD::zeros(e.value.raw_dim())).collect();
        let v = store.entries().map(|(_, e)| ArrayD::zeros(e.value.raw_dim())).collect();
        Adam { m, v, step: 0, beta1, beta2, eps: 1e-8 }
    }

    /// One update over every parameter; `grads[i]` must align with entry `i`.
    pub fn apply(&mut self, store: &mut ParamStore<F>, grads: &[ArrayD<F>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient/parameter count mismatch");
        self.step += 1;
        let b1 = F::c(self.beta1);
        let b2 = F::c(self.beta2);
        let one = F::one();
        let bc1 = F::c(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = F::c(1.0 - self.beta2.powi(self.step as i32));
        let lr = F::c(lr);
        let eps = F::c(self.eps);
        for (i, (_, entry)) in store.entries_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

const CKPT_MAGIC: &[u8; 8] = b"MFMCKPT1";

fn variant_tag(v: Variant) -> u8 {
    match v {
        Variant::Baseline => 0,
        Variant::Decouple => 1,
        Variant::Multistage => 2,
        Variant::Full => 3,
    }
}

fn variant_from_tag(t: u8) -> Result<Variant> {
    Ok(match t {
        0 => Variant::Baseline,
        1 => Variant::Decouple,
        2 => Variant::Multistage,
        3 => Variant::Full,
        other => return Err(Error::Format(format!("unknown variant tag {other}"))),
    })
}

/// Everything needed to resume training: parameters, optimizer moments,
/// epoch counter, and the full config (plus its architecture hash).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch_hash: u64,
    pub variant: Variant,
    pub epoch: u32,
    pub adam_step: u64,
    pub config_text: String,
    pub params: Vec<(String, ArrayD<f32>)>,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

impl Checkpoint {
    pub fn from_state(
        cfg: &Config,
        variant: Variant,
        epoch: u32,
        store: &ParamStore<f32>,
        adam: &Adam<f32>,
    ) -> Self {
        Checkpoint {
            arch_hash: cfg.arch_hash(),
            variant,
            epoch,
            adam_step: adam.step,
            config_text: cfg.to_text(),
            params: store.entries().map(|(_, e)| (e.name.clone(), e.value.clone())).collect(),
            m: adam.m.clone(),
            v: adam.v.clone(),
        }
    }

    pub fn config(&self) -> Result<Config> {
        Config::from_text(&self.config_text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u64::<LittleEndian>(self.arch_hash)?;
        w.write_u8(variant_tag(self.variant))?;
        w.write_u32::<LittleEndian>(self.epoch)?;
        w.write_u64::<LittleEndian>(self.adam_step)?;
        let cfg_bytes = self.config_text.as_bytes();
        w.write_u32::<LittleEndian>(cfg_bytes.len() as u32)?;
        w.write_all(cfg_bytes)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (i, (name, value)) in self.params.iter().enumerate() {
            let nb = name.as_bytes();
            w.write_u32::<LittleEndian>(nb.len() as u32)?;
            w.write_all(nb)?;
            w.write_u32::<LittleEndian>(value.ndim() as u32)?;
            for d in value.shape() {
                w.write_u32::<LittleEndian>(*d as u32)?;
            }
            for blob in [value, &self.m[i], &self.v[i]] {
                for x in blob.iter() {
                    w.write_f32::<LittleEndian>(*x)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let arch_hash = r.read_u64::<LittleEndian>()?;
        let variant = variant_from_tag(r.read_u8()?)?;
        let epoch = r.read_u32::<LittleEndian>()?;
        let adam_step = r.read_u64::<LittleEndian>()?;
        let cfg_len = r.read_u32::<LittleEndian>()? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)?;
        let config_text = String::from_utf8(cfg_bytes)
            .map_err(|_| Error::Format("checkpoint config is not utf-8".into()))?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(count);
        let mut ms = Vec::with_capacity(count);
        let mut vs = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let len: usize = dims.iter().product();
            let read_blob = |r: &mut BufReader<std::fs::File>| -> Result<ArrayD<f32>> {
                let mut data = vec![0f32; len];
                for x in data.iter_mut() {
                    *x = r.read_f32::<LittleEndian>()?;
                }
                ArrayD::from_shape_vec(IxDyn(&dims), data)
                    .map_err(|e| Error::Format(format!("bad blob shape: {e}")))
            };
            let value = read_blob(&mut r)?;
            let m = read_blob(&mut r)?;
            let v = read_blob(&mut r)?;
            params.push((name, value));
            ms.push(m);
            vs.push(v);
        }
        Ok(Checkpoint { arch_hash, variant, epoch, adam_step, config_text, params, m: ms, v: vs })
    }

    /// Rebuilds the network this checkpoint was saved from and restores its
    /// parameter values (optimizer state is ignored).
    pub fn build_network(&self) -> Result<crate::network::Network<f32>> {
        let cfg = self.config()?;
        if self.arch_hash != cfg.arch_hash() {
            return Err(Error::Format("checkpoint architecture hash mismatch".into()));
        }
        let mut net = crate::network::Network::new(&cfg, self.variant)?;
        if self.params.len() != net.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                net.store.len()
            )));
        }
        for (i, (_, entry)) in net.store.entries_mut().enumerate() {
            let (name, value) = &self.params[i];
            if entry.name != *name || entry.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter '{name}' does not match model '{}'",
                    entry.name
                )));
            }
            entry.value.assign(value);
        }
        Ok(net)
    }

    /// Copies parameter values and moments back into live training state.
    pub fn restore(&self, store: &mut ParamStore<f32>, adam: &mut Adam<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (i, (id, entry)) in store.entries_mut().enumerate() {
            let (name, value) = &self.params[i];
            if entry.name != *name || entry.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {i} ('{name}') does not match model ('{}')",
                    entry.name
                )));
            }
            entry.value.assign(value);
            adam.m[id.0].assign(&self.m[i]);
            adam.v[id.0].assign(&self.v[i]);
        }
        adam.step = self.adam_step;
        Ok(())
    }
}

/// Result of a finished training run.
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub iterations: u64,
    pub final_loss: f32,
}

fn epoch_rng_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15)
}

/// Runs the optimization loop: shuffled seeded batches, forward/backward,
/// Adam updates under the milestone schedule, one log line per iteration
/// (`iter loss l1 lstage lr`), and a checkpoint plus summary metrics per
/// epoch. Aborts with a `Numeric` error if the loss stops being finite.
pub fn train_loop(
    net: &mut crate::network::Network<f32>,
    dataset: &[crate::data::Sample],
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let tc = net.cfg.train.clone();
    tc.validate()?;
    if dataset.is_empty() {
        return Err(Error::Arity("empty dataset".into()));
    }
    std::fs::create_dir_all(&tc.checkpoint_dir)?;
    let ckpt_path = tc.checkpoint_dir.join("latest.ckpt");
    let log_path = tc.checkpoint_dir.join("train.log");

    let mut adam = Adam::new(&net.store, tc.beta1, tc.beta2);
    assert_eq!(adam.m.len(), net.store.len(), "optimizer must cover every parameter once");
    let mut start_epoch = 0usize;
    if let Some(ck) = resume {
        if ck.arch_hash != net.cfg.arch_hash() {
            return Err(Error::Config("checkpoint architecture does not match config".into()));
        }
        ck.restore(&mut net.store, &mut adam)?;
        start_epoch = ck.epoch as usize;
    }
    // fresh runs truncate the log so identical invocations produce
    // identical files; resumed runs append
    let mut log_opts = std::fs::OpenOptions::new();
    log_opts.create(true);
    if resume.is_some() {
        log_opts.append(true);
    } else {
        log_opts.write(true).truncate(true);
    }
    let mut log = std::io::BufWriter::new(log_opts.open(&log_path)?);

    let mut iter = adam.step;
    let mut last_loss = f32::NAN;
    for epoch in start_epoch..tc.epochs {
        let lr = lr_at(epoch, &tc);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(epoch_rng_seed(tc.seed, epoch));
        order.shuffle(&mut rng);
        for (batch_id, chunk) in order.chunks(tc.batch_size).enumerate() {
            let samples: Vec<&crate::data::Sample> = chunk.iter().map(|i| &dataset[*i]).collect();
            let crop_seed = epoch_rng_seed(tc.seed, epoch) ^ (batch_id as u64 + 1);
            let batch =
                crate::data::make_batch(&samples, tc.crop_h, tc.crop_w, net.cfg.n, crop_seed)?;
            let (tape, bind, loss) = net.training_step(&batch)?;
            let total = tape.value_owned(loss.total)[[]];
            let l1 = tape.value_owned(loss.l1)[[]];
            let lstage = loss.stage.map(|s| tape.value_owned(s)[[]]).unwrap_or(0.0);
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at iteration {} (epoch {epoch}, batch {batch_id})",
                    iter + 1
                )));
            }
            tape.backward(loss.total);
            let grads: Vec<ndarray::ArrayD<f32>> = bind
                .vars()
                .iter()
                .zip(net.store.entries())
                .map(|(v, (_, e))| {
                    tape.grad(*v).unwrap_or_else(|| ndarray::ArrayD::zeros(e.value.raw_dim()))
                })
                .collect();
            adam.apply(&mut net.store, &grads, lr);
            iter += 1;
            last_loss = total;
            writeln!(log, "{iter} {total:.6} {l1:.6} {lstage:.6} {lr}")?;
            if iter.is_multiple_of(25) {
                println!("iter {iter} loss {total:.4} l1 {l1:.4} lstage {lstage:.4} lr {lr}");
            }
        }
        log.flush()?;
        Checkpoint::from_state(&net.cfg, net.variant, (epoch + 1) as u32, &net.store, &adam)
            .save(&ckpt_path)?;
        // quick epoch summary on a bounded slice of the dataset
        let probe = &dataset[..dataset.len().min(8)];
        let mut epe_sum = 0.0f64;
        let mut cnt = 0usize;
        for s in probe {
            if let Ok(inf) = net.infer(&s.pair) {
                if let Ok(e) = crate::eval::epe(&inf.subpixel, &s.gt, &s.mask) {
                    epe_sum += e as f64;
                    cnt += 1;
                }
            }
        }
        if cnt > 0 {
            let line = format!("# epoch {} epe {:.4} lr {lr}", epoch + 1, epe_sum / cnt as f64);
            writeln!(log, "{line}")?;
            println!("{line}");
        }
        log.flush()?;
    }
    Ok(TrainOutcome { checkpoint_path: ckpt_path, log_path, iterations: iter, final_loss: last_loss })
}
