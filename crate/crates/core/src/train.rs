//! Loss, optimizer, schedule, training loop and `DCKP` checkpoints.
//!
//! Training runs in `f32`. Loss values are accumulated in `f64`. The loss
//! is a weighted sum of a soft Dice term, averaged over every (item, organ)
//! pair of the batch, and a mean binary cross-entropy on the logits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::depthsim;
use crate::exec::Exec;
use crate::net::{self, Arch, NetError, NetworkParams, Real, Tensor};
use crate::phantom::{Manifest, MANIFEST_FILE};
use crate::voldata::{self, Cursor, DepthImage, FormatError, MaskStack, N_ORGANS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has {found} cases, batch size needs at least {needed}")]
    TooFewCases { needed: usize, found: usize },
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("checkpoint architecture {found:?} does not match requested {expected:?}")]
    ArchMismatch { expected: Arch, found: Arch },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub total_steps: usize,
    pub loss_weight_dice: f64,
    pub loss_weight_bce: f64,
    pub dice_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub rng_seed: u64,
    pub eta_min: f64,
    /// Per-level channel widths of the network.
    pub channels: Vec<usize>,
}

impl Default for TrainConfig {
    /// Desk-scale configuration: batch 8, 1500 steps.
    fn default() -> Self {
        Self {
            batch_size: 8,
            base_lr: 0.002,
            total_steps: 1500,
            loss_weight_dice: 0.5,
            loss_weight_bce: 0.5,
            dice_epsilon: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rng_seed: 0,
            eta_min: 0.0,
            channels: vec![8, 16, 32],
        }
    }
}

impl TrainConfig {
    /// Batch 16 at the same learning rate.
    pub fn full_batch() -> Self {
        Self {
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be > 0");
        }
        if !(self.eta_min >= 0.0) {
            return bad("eta_min must be >= 0");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1");
        }
        if !(self.loss_weight_dice >= 0.0 && self.loss_weight_bce >= 0.0)
            || self.loss_weight_dice + self.loss_weight_bce <= 0.0
        {
            return bad("loss weights must be >= 0 with a positive sum");
        }
        if !(self.dice_epsilon >= 0.0) {
            return bad("dice_epsilon must be >= 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be non-empty and positive");
        }
        Ok(())
    }

    /// First eight bytes of SHA-256 over the JSON form.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(json);
        u64::from_le_bytes(hash[..8].try_into().unwrap())
    }
}

// ---------------------------------------------------------------------------
// Losses

/// Rounds to `T`, sending values below the smallest normal to zero.
/// Subnormal gradients and moments slow the arithmetic down by orders of
/// magnitude once a small training set is fitted.
fn flush<T: Real>(x: f64) -> T {
    if x.abs() < T::min_positive_value().to_f64().unwrap() {
        T::zero()
    } else {
        T::from_f64_lossy(x)
    }
}

fn check_same(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b || a.len() < 2 {
        return Err(NetError::Shape {
            expected: a.to_vec(),
            found: b.to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Elements per Dice group: the trailing two (spatial) dimensions.
fn group_len(shape: &[usize]) -> usize {
    shape[shape.len() - 2..].iter().product()
}

/// `mean_k [1 - (2 sum p g + eps) / (sum p + sum g + eps)]` over groups `k`
/// formed by every leading index (item and channel).
pub fn dice_loss<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>, epsilon: f64) -> Result<f64> {
    check_same(probs.shape(), targets.shape())?;
    let g = group_len(probs.shape());
    let mut total = 0.0;
    let mut groups = 0;
    for (p, t) in probs.data().chunks(g).zip(targets.data().chunks(g)) {
        let (mut inter, mut sum) = (0.0, 0.0);
        for (&pi, &ti) in p.iter().zip(t) {
            let (pi, ti) = (pi.to_f64().unwrap(), ti.to_f64().unwrap());
            inter += pi * ti;
            sum += pi + ti;
        }
        total += 1.0 - (2.0 * inter + epsilon) / (sum + epsilon);
        groups += 1;
    }
    Ok(total / groups as f64)
}

/// Stable `max(x, 0) - x g + log(1 + exp(-|x|))`.
fn bce_term(x: f64, g: f64) -> f64 {
    x.max(0.0) - x * g + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy of `sigmoid(logits)` against targets.
pub fn bce_loss<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    check_same(logits.shape(), targets.shape())?;
    let n = logits.len() as f64;
    let s: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &g)| bce_term(x.to_f64().unwrap(), g.to_f64().unwrap()))
        .sum();
    Ok(s / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub dice: f64,
    pub bce: f64,
}

/// Weighted Dice + BCE on logits and its gradient with respect to the logits.
pub fn combined_loss<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>, cfg: &TrainConfig) -> Result<(LossParts, Tensor<T>)> {
    check_same(logits.shape(), targets.shape())?;
    let g = group_len(logits.shape());
    let n = logits.len() as f64;
    let n_groups = (logits.len() / g) as f64;
    let eps = cfg.dice_epsilon;
    let (wd, wb) = (cfg.loss_weight_dice, cfg.loss_weight_bce);
    let mut grad = vec![T::zero(); logits.len()];
    let mut probs = vec![0.0f64; g];
    let (mut dice_sum, mut bce_sum) = (0.0, 0.0);
    for ((x, t), out) in logits.data().chunks(g).zip(targets.data().chunks(g)).zip(grad.chunks_mut(g)) {
        let (mut inter, mut sum) = (0.0, 0.0);
        for ((p, &xi), &ti) in probs.iter_mut().zip(x).zip(t) {
            let (xi, ti) = (xi.to_f64().unwrap(), ti.to_f64().unwrap());
            *p = net::sigmoid(xi);
            inter += *p * ti;
            sum += *p + ti;
            bce_sum += bce_term(xi, ti);
        }
        let den = sum + eps;
        let num = 2.0 * inter + eps;
        dice_sum += 1.0 - num / den;
        for ((o, &p), &ti) in out.iter_mut().zip(&probs).zip(t) {
            let ti = ti.to_f64().unwrap();
            let d_dice_dp = -(2.0 * ti * den - num) / (den * den) / n_groups;
            let d = wd * d_dice_dp * p * (1.0 - p) + wb * (p - ti) / n;
            *o = flush(d);
        }
    }
    let dice = dice_sum / n_groups;
    let bce = bce_sum / n;
    let parts = LossParts {
        total: wd * dice + wb * bce,
        dice,
        bce,
    };
    Ok((parts, Tensor::new(logits.shape().to_vec(), grad)?))
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

/// Cosine annealing from `base_lr` at step 0 to `eta_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, eta_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(TrainError::Config(format!("step {step} beyond total_steps {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let t = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(eta_min + 0.5 * (base_lr - eta_min) * (1.0 + t.cos()))
}

/// Adam first and second moments, one tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn matches(&self, params: &NetworkParams<T>) -> bool {
        let same = |ts: &[Tensor<T>]| {
            ts.len() == params.tensors().len() && ts.iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape())
        };
        same(&self.m) && same(&self.v)
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step<T: Real>(
    params: &mut NetworkParams<T>,
    grads: &NetworkParams<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if !params.same_shape(grads) || !state.matches(params) {
        return Err(NetError::Arch("optimizer, gradient and parameter shapes differ".into()).into());
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads.tensors()[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].to_f64().unwrap();
            let mj = b1 * m[j].to_f64().unwrap() + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64().unwrap() + (1.0 - b2) * gj * gj;
            m[j] = flush(mj);
            v[j] = flush(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.adam_eps);
            *w = T::from_f64_lossy(w.to_f64().unwrap() - update);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Data

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub case_id: String,
    pub depth: DepthImage,
    pub masks: MaskStack,
}

/// Reads the depth images and masks of a simulated dataset directory, in
/// manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = Manifest::read(dir.join(MANIFEST_FILE)).map_err(|e| TrainError::Dataset(e.to_string()))?;
    let mut out = Vec::with_capacity(manifest.len());
    for row in &manifest.rows {
        let depth = voldata::read_depth(depthsim::depth_path(dir, &row.case_id))?;
        let masks = voldata::read_maskstack(depthsim::masks_path(dir, &row.case_id))?;
        if masks.dims() != depth.dims() || !masks.has_canonical_order() {
            return Err(TrainError::Dataset(format!("{}: masks do not match depth image", row.case_id)));
        }
        out.push(Sample {
            case_id: row.case_id.clone(),
            depth,
            masks,
        });
    }
    Ok(out)
}

/// Endless stream of sample indices: concatenated seeded permutations.
#[derive(Debug, Clone)]
pub struct ShuffleStream {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl ShuffleStream {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            perm: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.perm.len() {
                self.perm.sort_unstable();
                self.perm.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn target_tensor(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let d = samples[0].masks.dims();
    let mut data = Vec::with_capacity(samples.len() * N_ORGANS * d.len());
    for s in samples {
        for ch in s.masks.channels() {
            data.extend(ch.iter().map(|&v| v as f32));
        }
    }
    Ok(Tensor::new(vec![samples.len(), N_ORGANS, d.h, d.w], data)?)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_dice: f64,
    pub loss_bce: f64,
}

pub fn write_log(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Network weights with optional optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub step: u64,
    pub config_digest: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

pub fn train(samples: &[Sample], cfg: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    train_with_progress(samples, cfg, exec, |_| {})
}

/// Full training run; `on_step` sees every log row as it is produced.
pub fn train_with_progress(
    samples: &[Sample],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.len() < cfg.batch_size {
        return Err(TrainError::TooFewCases {
            needed: cfg.batch_size,
            found: samples.len(),
        });
    }
    let d = samples[0].depth.dims();
    if samples.iter().any(|s| s.depth.dims() != d || s.masks.dims() != d) {
        return Err(TrainError::Dataset("samples differ in image size".into()));
    }
    let arch = Arch::new(cfg.channels.clone(), d.h, d.w, N_ORGANS);
    let mut params = net::init_params::<f32>(&arch, cfg.rng_seed)?;
    let mut state = OptimizerState::new(&params);
    let mut stream = ShuffleStream::new(samples.len(), cfg.rng_seed ^ SHUFFLE_SALT);
    let mut log = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let batch: Vec<&Sample> = stream.next_batch(cfg.batch_size).into_iter().map(|i| &samples[i]).collect();
        let depths: Vec<&DepthImage> = batch.iter().map(|s| &s.depth).collect();
        let input = net::batch_input::<f32>(&depths)?;
        let targets = target_tensor(&batch)?;
        let (logits, trace) = net::forward_with(exec, &params, &input)?;
        let (loss, grad) = combined_loss(&logits, &targets, cfg)?;
        if !loss.total.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        let grads = net::backward_with(exec, &params, &trace, &grad)?;
        let lr = cosine_lr(step, cfg.total_steps, cfg.base_lr, cfg.eta_min)?;
        adam_step(&mut params, &grads, &mut state, lr, cfg)?;
        let row = LogRow {
            step,
            lr,
            loss_total: loss.total,
            loss_dice: loss.dice,
            loss_bce: loss.bce,
        };
        on_step(&row);
        log.push(row);
    }
    if params.tensors().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
        return Err(TrainError::Diverged { step: cfg.total_steps });
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            step: state.step,
            optimizer: Some(state),
            config_digest: cfg.digest(),
        },
        log,
    })
}

/// Trains on the dataset in `dataset_dir` and writes the checkpoint and,
/// if given, the per-step log.
pub fn train_loop(
    dataset_dir: &Path,
    cfg: &TrainConfig,
    out_checkpoint: &Path,
    log_path: Option<&Path>,
) -> Result<Vec<LogRow>> {
    let samples = load_dataset(dataset_dir)?;
    let outcome = train(&samples, cfg, Exec::default())?;
    save_checkpoint(&outcome.checkpoint, out_checkpoint)?;
    if let Some(p) = log_path {
        write_log(&outcome.log, p)?;
    }
    Ok(outcome.log)
}

// ---------------------------------------------------------------------------
// Checkpoint format

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| FormatError::Invariant("tensor name too long".into()))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| FormatError::Invariant("tensor dim exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    voldata::push_f32s(out, t.data());
    Ok(())
}

fn read_tensor(c: &mut Cursor) -> Result<(String, Tensor<f32>)> {
    let len = c.u16()? as usize;
    let name = std::str::from_utf8(c.take(len)?).map_err(|_| FormatError::BadName)?.to_string();
    let ndim = c.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(c.u32()? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| FormatError::Invariant("tensor size overflow".into()))?;
    let bytes = c.take(n.checked_mul(4).ok_or_else(|| FormatError::Invariant("tensor size overflow".into()))?)?;
    Ok((name, Tensor::new(shape, voldata::f32s_from_le(bytes))?))
}

fn moment_name(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let arch = ck.params.arch();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(voldata::FORMAT_VERSION);
    let levels = u8::try_from(arch.levels()).map_err(|_| FormatError::Invariant("too many levels".into()))?;
    out.push(levels);
    for &c in &arch.channels {
        let c = u16::try_from(c).map_err(|_| FormatError::Invariant("channel count exceeds u16".into()))?;
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&(arch.height as u32).to_le_bytes());
    out.extend_from_slice(&(arch.width as u32).to_le_bytes());
    out.push(u8::try_from(arch.n_out).map_err(|_| FormatError::Invariant("n_out exceeds u8".into()))?);
    let tensors = ck.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in ck.params.names().iter().zip(tensors) {
        push_tensor(&mut out, name, t)?;
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            for (prefix, moments) in [("m", &opt.m), ("v", &opt.v)] {
                for (name, t) in ck.params.names().iter().zip(moments) {
                    push_tensor(&mut out, &moment_name(prefix, name), t)?;
                }
            }
        }
    }
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.extend_from_slice(&ck.config_digest.to_le_bytes());
    Ok(out)
}

/// Decodes a checkpoint; with `expected` set, the stored architecture must
/// equal it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&Arch>) -> Result<Checkpoint> {
    let mut c = Cursor::new(bytes);
    c.magic(CHECKPOINT_MAGIC)?;
    c.version()?;
    let levels = c.u8()? as usize;
    let mut channels = Vec::with_capacity(levels);
    for _ in 0..levels {
        channels.push(c.u16()? as usize);
    }
    let height = c.u32()? as usize;
    let width = c.u32()? as usize;
    let n_out = c.u8()? as usize;
    let arch = Arch::new(channels, height, width, n_out);
    if let Some(exp) = expected {
        if *exp != arch {
            return Err(TrainError::ArchMismatch {
                expected: exp.clone(),
                found: arch,
            });
        }
    }
    arch.validate()?;
    let specs = arch.tensor_specs();
    let n_tensors = c.u32()? as usize;
    if n_tensors != specs.len() {
        return Err(FormatError::Invariant(format!("expected {} tensors, found {n_tensors}", specs.len())).into());
    }
    let read_group = |c: &mut Cursor, prefix: Option<&str>| -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(specs.len());
        for (name, _) in &specs {
            let (found, t) = read_tensor(c)?;
            let want = prefix.map_or_else(|| name.clone(), |p| moment_name(p, name));
            if found != want {
                return Err(FormatError::Invariant(format!("expected tensor {want}, found {found}")).into());
            }
            out.push(t);
        }
        Ok(out)
    };
    let params = NetworkParams::from_tensors(&arch, read_group(&mut c, None)?)?;
    let has_opt = c.u8()?;
    let moments = match has_opt {
        0 => None,
        1 => Some((read_group(&mut c, Some("m"))?, read_group(&mut c, Some("v"))?)),
        f => return Err(FormatError::Invariant(format!("bad optimizer flag {f}")).into()),
    };
    let step = c.u64()?;
    let config_digest = c.u64()?;
    if c.remaining() != 0 {
        return Err(FormatError::SizeMismatch {
            expected: bytes.len() - c.remaining(),
            actual: bytes.len(),
        }
        .into());
    }
    let optimizer = moments.map(|(m, v)| OptimizerState { m, v, step });
    if let Some(opt) = &optimizer {
        if !opt.matches(&params) {
            return Err(NetError::Arch("optimizer moments do not match parameter shapes".into()).into());
        }
    }
    Ok(Checkpoint {
        params,
        optimizer,
        step,
        config_digest,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    Ok(voldata::write_bytes(path.as_ref(), &encode_checkpoint(ck)?)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&Arch>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voldata::{Dims2, Spacing2};
    use rand::Rng;

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn dice_loss_examples() {
        let ones = tensor(&[1, 1, 2, 2], vec![1.0; 4]);
        let zeros = tensor(&[1, 1, 2, 2], vec![0.0; 4]);
        assert_eq!(dice_loss(&ones, &ones, 1.0).unwrap(), 0.0);
        assert_eq!(dice_loss(&zeros, &zeros, 1.0).unwrap(), 0.0);
        assert!((dice_loss(&ones, &zeros, 1.0).unwrap() - (1.0 - 1.0 / 5.0)).abs() < 1e-15);
        assert!(dice_loss(&ones, &tensor(&[1, 4], vec![0.0; 4]), 1.0).is_err());
    }

    #[test]
    fn bce_examples() {
        let t = tensor(&[1, 1], vec![1.0]);
        let at = |x: f64| bce_loss(&tensor(&[1, 1], vec![x]), &t).unwrap();
        assert!((at(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(at(50.0) < 1e-20 && at(50.0).is_finite());
        assert!((at(-50.0) - 50.0).abs() < 1e-12);
    }

    fn random_case(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 11 * 8 * 8;
        let logits = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets = (0..n).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();
        (tensor(&[11, 8, 8], logits), tensor(&[11, 8, 8], targets))
    }

    #[test]
    fn degenerate_weights_match_single_losses() {
        let (x, g) = random_case(1);
        let probs = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| net::sigmoid(v)).collect()).unwrap();
        let dice_only = TrainConfig { loss_weight_dice: 1.0, loss_weight_bce: 0.0, ..Default::default() };
        let bce_only = TrainConfig { loss_weight_dice: 0.0, loss_weight_bce: 1.0, ..Default::default() };
        let (a, _) = combined_loss(&x, &g, &dice_only).unwrap();
        let (b, _) = combined_loss(&x, &g, &bce_only).unwrap();
        assert!((a.total - dice_loss(&probs, &g, 1.0).unwrap()).abs() < 1e-12);
        assert!((b.total - bce_loss(&x, &g).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = TrainConfig::default();
        for seed in 0..3 {
            let (x, g) = random_case(seed);
            let (_, grad) = combined_loss(&x, &g, &cfg).unwrap();
            let h = 1e-6;
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                let fp = combined_loss(&xp, &g, &cfg).unwrap().0.total;
                let fm = combined_loss(&xm, &g, &cfg).unwrap().0.total;
                let fd = (fp - fm) / (2.0 * h);
                let an = grad.data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                assert!(rel < 1e-4, "element {i}: analytic {an}, numeric {fd}");
            }
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let cfg = TrainConfig::default();
        for seed in 10..20 {
            let (x, g) = random_case(seed);
            let (l, _) = combined_loss(&x, &g, &cfg).unwrap();
            assert!(l.total >= 0.0 && (0.0..=1.0).contains(&l.dice));
        }
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 0.002, 0.0).unwrap(), 0.002);
        assert!(cosine_lr(100, 100, 0.002, 0.0).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.002, 0.0004).unwrap() - 0.0012).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.002, 0.0).is_err());
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 0.002, 0.0001).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn scalar_params(v: f64) -> NetworkParams<f64> {
        let arch = Arch::new(vec![1], 1, 1, 1);
        let mut p = NetworkParams::zeros(&arch).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(v);
        }
        p
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(1.0);
        let g = scalar_params(-3.7);
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.01, &cfg).unwrap();
        for t in p.tensors() {
            for &w in t.data() {
                assert!((w - 1.01).abs() < 1e-8);
            }
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(0.5);
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &scalar_params(1.0), &mut st, 0.01, &cfg).unwrap();
        let before = p.clone();
        let m_before = st.m[0].data()[0];
        // A zero gradient still applies the decayed momentum, so freeze it first.
        for t in st.m.iter_mut() {
            t.data_mut().fill(0.0);
        }
        adam_step(&mut p, &scalar_params(0.0), &mut st, 0.01, &cfg).unwrap();
        assert_eq!(p, before);
        assert!(st.v[0].data()[0] < 0.001 + 1e-12);
        assert!(m_before > 0.0);
    }

    fn toy_samples(n: usize) -> Vec<Sample> {
        let d = Dims2::new(8, 8);
        let sp = Spacing2::new(4.0, 4.0);
        (0..n)
            .map(|i| {
                let shift = i % 4;
                let values: Vec<f32> = (0..64).map(|k| if (k % 8) >= shift && (k % 8) < shift + 4 { 1.0 } else { 0.0 }).collect();
                let chan: Vec<u8> = values.iter().map(|&v| (v > 0.5) as u8).collect();
                Sample {
                    case_id: format!("t{i}"),
                    depth: DepthImage::new(d, sp, values).unwrap(),
                    masks: MaskStack::canonical(d, sp, vec![chan; N_ORGANS]).unwrap(),
                }
            })
            .collect()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            total_steps: 40,
            channels: vec![4, 8],
            base_lr: 0.01,
            ..Default::default()
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let samples = toy_samples(12);
        let cfg = toy_config();
        let a = train(&samples, &cfg, Exec::default()).unwrap();
        let b = train(&samples, &cfg, Exec::Sequential).unwrap();
        let ea = encode_checkpoint(&a.checkpoint).unwrap();
        assert_eq!(ea, encode_checkpoint(&b.checkpoint).unwrap());
        let head: f64 = a.log[..5].iter().map(|r| r.loss_total).sum();
        let tail: f64 = a.log[35..].iter().map(|r| r.loss_total).sum();
        assert!(tail < head);
        assert_eq!(a.checkpoint.step, 40);
    }

    #[test]
    fn too_few_cases() {
        let samples = toy_samples(3);
        assert!(matches!(
            train(&samples, &toy_config(), Exec::Sequential),
            Err(TrainError::TooFewCases { needed: 4, found: 3 })
        ));
    }

    #[test]
    fn divergence_names_step() {
        let samples = toy_samples(8);
        let cfg = TrainConfig { base_lr: 1e30, ..toy_config() };
        match train(&samples, &cfg, Exec::Sequential) {
            Err(TrainError::Diverged { step }) => assert!(step <= 40),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn shuffle_stream_covers_each_epoch() {
        let mut s = ShuffleStream::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut a = ShuffleStream::new(10, 3);
        let mut b = ShuffleStream::new(10, 3);
        assert_eq!(a.next_batch(25), b.next_batch(25));
    }

    fn small_checkpoint(with_opt: bool) -> Checkpoint {
        let arch = Arch::new(vec![2, 3], 4, 4, N_ORGANS);
        let params = net::init_params::<f32>(&arch, 9).unwrap();
        let mut opt = OptimizerState::new(&params);
        opt.m[0].data_mut()[0] = 0.25;
        opt.step = 7;
        Checkpoint {
            params,
            optimizer: with_opt.then_some(opt),
            step: 7,
            config_digest: 0xDEAD_BEEF,
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for with_opt in [false, true] {
            let ck = small_checkpoint(with_opt);
            let bytes = encode_checkpoint(&ck).unwrap();
            let back = decode_checkpoint(&bytes, None).unwrap();
            assert_eq!(back, ck);
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let ck = small_checkpoint(true);
        let bytes = encode_checkpoint(&ck).unwrap();
        let other = Arch::new(vec![2, 4], 4, 4, N_ORGANS);
        assert!(matches!(decode_checkpoint(&bytes, Some(&other)), Err(TrainError::ArchMismatch { .. })));
        assert!(decode_checkpoint(&bytes, Some(ck.params.arch())).is_ok());
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], None),
            Err(TrainError::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, None), Err(TrainError::Format(FormatError::BadMagic { .. }))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad, None),
            Err(TrainError::Format(FormatError::VersionMismatch(9)))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            decode_checkpoint(&long, None),
            Err(TrainError::Format(FormatError::SizeMismatch { .. }))
        ));
    }

    #[test]
    fn config_digest_tracks_fields() {
        let a = TrainConfig::default();
        let b = TrainConfig { rng_seed: 1, ..a.clone() };
        assert_eq!(a.digest(), a.clone().digest());
        assert_ne!(a.digest(), b.digest());
        assert!(TrainConfig { batch_size: 0, ..a.clone() }.validate().is_err());
        assert!(TrainConfig { loss_weight_bce: 0.0, loss_weight_dice: 0.0, ..a }.validate().is_err());
    }
}
