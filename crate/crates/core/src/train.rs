//! Training loop: pair batches, Adam, schedule, checkpoints and run logs.
//!
//! Every step runs forward → mine → loss → backward → Adam on one batch of
//! `batch_identities` identity pairs. An epoch visits a fresh permutation of
//! the training identities in whole batches. All randomness derives from
//! `TrainConfig::seed` through labelled sub-seeds, and the per-epoch
//! permutations are stateless, so a run resumed from its state files
//! continues exactly as the uninterrupted run would.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, Tensor};
use crate::data::{DescriptorSet, PatchBatch};
use crate::error::{Error, Result};
use crate::loss::{batch_loss, LossConfig};
use crate::metrics::{fpr_at_recall, verification_scores, Polarity};
use crate::net::{
    init, layer_of, load_checkpoint, preprocess, save_checkpoint, Mode, NetworkParams, NormScheme, Scale,
};
use crate::seed;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Share of identities held out for validation.
pub const VALIDATION_PERCENT: u64 = 10;

pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    LinearDecay,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::LinearDecay => "linear-decay",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear-decay" => Ok(LrSchedule::LinearDecay),
            _ => Err(Error::invalid(format!("unknown schedule {s:?} (constant, linear-decay)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_identities: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub scale: Scale,
    pub norm: NormScheme,
    pub loss: LossConfig,
    /// Write state files every this many epochs; 0 writes only at the end.
    pub checkpoint_every: usize,
    /// Hold out identities for per-epoch validation.
    pub validation: bool,
    /// Layers (1–7) whose parameters are never updated.
    pub frozen_layers: Vec<usize>,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Stop (and write state files) once this many steps are done; the
    /// schedule still spans all `epochs`.
    pub stop_after_step: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_identities: 128,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::LinearDecay,
            seed: 0,
            scale: Scale::Half,
            norm: NormScheme::Frn,
            loss: LossConfig::default(),
            checkpoint_every: 0,
            validation: true,
            frozen_layers: Vec::new(),
            grad_clip: None,
            stop_after_step: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_identities < 2 {
            return Err(Error::invalid("batch_identities must be >= 2"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if let Some(&l) = self.frozen_layers.iter().find(|&&l| !(1..=7).contains(&l)) {
            return Err(Error::invalid(format!("frozen layer {l} outside 1..=7")));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.loss.validate()
    }

    /// `key = value` lines echoing every setting.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        let l = &self.loss;
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_identities", self.batch_identities.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("lr_schedule", self.lr_schedule.name().into()),
            ("seed", self.seed.to_string()),
            ("scale", self.scale.name().into()),
            ("norm", self.norm.name().into()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("validation", self.validation.to_string()),
            (
                "frozen_layers",
                self.frozen_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("grad_clip", self.grad_clip.map_or("none".into(), |c| c.to_string())),
            ("stop_after_step", self.stop_after_step.map_or("none".into(), |c| c.to_string())),
            ("loss.variant", l.variant.name().into()),
            ("loss.alpha", l.alpha.to_string()),
            ("loss.margin", l.margin.to_string()),
            ("loss.gamma_reg", l.gamma_reg.to_string()),
            ("loss.m_a", l.m_a.to_string()),
            ("loss.m_b1", l.m_b1.to_string()),
            ("loss.m_b2", l.m_b2.to_string()),
            ("loss.margin_pure_s", l.margin_pure_s.to_string()),
            ("loss.margin_pure_d", l.margin_pure_d.to_string()),
            ("loss.sign", l.sign.name().into()),
        ]
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(net: &NetworkParams<T>) -> Self {
        let z: Vec<Tensor<T>> = net.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        AdamState {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub loss_triplet: f64,
    pub loss_r_l2: f64,
    pub loss_total: f64,
    pub val_fpr95: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,epoch,loss_triplet,loss_r_l2,loss_total,val_fpr95";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.loss_triplet,
            self.loss_r_l2,
            self.loss_total,
            self.val_fpr95.map_or(String::new(), |v| v.to_string())
        )
    }
}

pub fn metrics_csv(history: &[LogRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunState<T> {
    pub params: NetworkParams<T>,
    pub adam: AdamState<T>,
    /// Completed optimizer steps.
    pub step: u64,
    pub history: Vec<LogRow>,
    /// Pair sampler.
    pub rng: ChaCha8Rng,
    /// Per parameter tensor: excluded from updates.
    pub frozen: Vec<bool>,
}

impl<T: Real> RunState<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        let params = init::<T>(seed::derive(cfg.seed, "init"), cfg.scale, cfg.norm);
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: &TrainConfig, params: NetworkParams<T>) -> Self {
        let frozen = params
            .params
            .iter()
            .map(|p| layer_of(&p.name).is_some_and(|l| cfg.frozen_layers.contains(&l)))
            .collect();
        RunState {
            adam: AdamState::new(&params),
            params,
            step: 0,
            history: Vec::new(),
            rng: seed::rng(cfg.seed, "pairs"),
            frozen,
        }
    }
}

/// One bias-corrected Adam update at rate `lr`.
///
/// Gradients are checked before anything is modified; a non-finite entry
/// aborts with the parameter's name.
pub fn adam_step<T: Real>(state: &mut RunState<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
    let net = &mut state.params;
    if grads.len() != net.params.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            net.params.len()
        )));
    }
    for (p, g) in net.params.iter().zip(grads) {
        if p.tensor.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient for {} has shape {:?}, expected {:?}",
                p.name,
                g.shape(),
                p.tensor.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NumericFault {
                op: "adam_step".into(),
                detail: format!("non-finite gradient for {}", p.name),
            });
        }
    }
    let adam = &mut state.adam;
    adam.t += 1;
    let t = adam.t as i32;
    let c1 = T::lit(1.0 - BETA1.powi(t));
    let c2 = T::lit(1.0 - BETA2.powi(t));
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPS));
    for (k, g) in grads.iter().enumerate() {
        if state.frozen.get(k).copied().unwrap_or(false) {
            continue;
        }
        let m = adam.m[k].data_mut();
        let v = adam.v[k].data_mut();
        let w = net.params[k].tensor.data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] = w[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Identity groups with at least two patches, split into
/// `(training, validation)` by a fixed hash of the identity id.
pub fn split_identities(dataset: &PatchBatch, validation: bool) -> (Vec<(u32, Vec<usize>)>, Vec<(u32, Vec<usize>)>) {
    dataset
        .groups()
        .into_iter()
        .filter(|(_, m)| m.len() >= 2)
        .partition(|(id, _)| !(validation && seed::derive(0, &format!("split/{id}")) % 100 < VALIDATION_PERCENT))
}

/// Interleaved pair batch: for every listed group, two distinct patches
/// chosen uniformly.
pub fn build_batch(dataset: &PatchBatch, groups: &[&(u32, Vec<usize>)], rng: &mut ChaCha8Rng) -> Result<PatchBatch> {
    let mut idx = Vec::with_capacity(groups.len() * 2);
    for (id, members) in groups {
        if members.len() < 2 {
            return Err(Error::invalid(format!("identity {id} has fewer than two patches")));
        }
        let pick = index::sample(rng, members.len(), 2);
        idx.push(members[pick.index(0)]);
        idx.push(members[pick.index(1)]);
    }
    Ok(dataset.subset(&idx))
}

/// `batch_identities` distinct identities drawn without replacement, one
/// pair each.
pub fn sample_batch(dataset: &PatchBatch, rng: &mut ChaCha8Rng, batch_identities: usize) -> Result<PatchBatch> {
    let (groups, _) = split_identities(dataset, false);
    if groups.len() < batch_identities {
        return Err(Error::invalid(format!(
            "dataset has {} usable identities, batch needs {batch_identities}",
            groups.len()
        )));
    }
    let chosen: Vec<&(u32, Vec<usize>)> = index::sample(rng, groups.len(), batch_identities)
        .into_iter()
        .map(|i| &groups[i])
        .collect();
    build_batch(dataset, &chosen, rng)
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, &format!("epoch/{epoch}"))));
    order
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub triplet: f64,
    pub r_l2: f64,
    pub total: f64,
}

/// Loss and parameter gradients of one interleaved batch (train mode).
/// Also returns the batch statistics for the running averages.
pub fn loss_and_grads<T: Real>(
    net: &NetworkParams<T>,
    batch: &PatchBatch,
    cfg: &LossConfig,
) -> Result<(StepLoss, Vec<Tensor<T>>, Vec<(usize, crate::autodiff::ChannelStats<T>)>)> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let input = preprocess::<T>(batch, &idx, net.topology.input_size)?;
    let mut tape = Tape::new();
    let fwd = net.forward_on_tape(&mut tape, &input, Mode::Train)?;
    let dim = net.topology.descriptor_dim;
    let bl = batch_loss(
        tape.value(fwd.unit).data(),
        tape.value(fwd.raw).data(),
        dim,
        &batch.identity,
        cfg,
    )?;
    if !bl.total.is_finite() {
        return Err(Error::NumericFault {
            op: "loss".into(),
            detail: "non-finite batch loss".into(),
        });
    }
    let shape = tape.value(fwd.unit).shape().to_vec();
    tape.backward_with(&[
        (fwd.unit, Tensor::new(shape.clone(), bl.grad_unit)?),
        (fwd.raw, Tensor::new(shape, bl.grad_raw)?),
    ])?;
    let grads = fwd
        .params
        .iter()
        .zip(&net.params)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect();
    Ok((
        StepLoss {
            triplet: bl.triplet,
            r_l2: bl.r_l2,
            total: bl.total,
        },
        grads,
        fwd.stats,
    ))
}

fn clip<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let k = T::lit(max_norm / total);
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }
}

/// Validation FPR@95 over the first two patches of every held-out identity.
pub fn validation_fpr95<T: Real>(net: &NetworkParams<T>, dataset: &PatchBatch, groups: &[(u32, Vec<usize>)]) -> Result<f64> {
    let idx: Vec<usize> = groups.iter().flat_map(|(_, m)| m[..2].iter().copied()).collect();
    let set = descriptor_set(net, dataset, &idx)?;
    let (pos, neg) = verification_scores(&set)?;
    fpr_at_recall(&pos, &neg, 0.95, Polarity::SmallerIsSimilar)
}

/// Eval-mode descriptors of the listed patches, labelled by identity.
pub fn descriptor_set<T: Real>(net: &NetworkParams<T>, dataset: &PatchBatch, idx: &[usize]) -> Result<DescriptorSet> {
    let (raw, unit) = net.describe(dataset, idx)?;
    let dim = net.topology.descriptor_dim;
    let mut set = DescriptorSet::new(
        dim,
        unit.iter().map(|v| v.f64() as f32).collect(),
        idx.iter().map(|&i| dataset.identity[i]).collect(),
    )?;
    set.raw_norms = Some(
        raw.chunks(dim)
            .map(|r| r.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt() as f32)
            .collect(),
    );
    Ok(set)
}

/// Where a run writes its files.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(RunOutput { dir })
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

pub fn manifest(cfg: &TrainConfig, dataset: &PatchBatch, width_bits: usize) -> String {
    let mut s = String::new();
    for (k, v) in cfg.echo() {
        let _ = writeln!(s, "{k} = {v}");
    }
    let _ = writeln!(s, "resolved_seed.init = {}", seed::derive(cfg.seed, "init"));
    let _ = writeln!(s, "resolved_seed.pairs = {}", seed::derive(cfg.seed, "pairs"));
    let _ = writeln!(s, "dataset = {}", dataset.source);
    let _ = writeln!(s, "dataset.patches = {}", dataset.len());
    let _ = writeln!(s, "code_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "value_width_bits = {width_bits}");
    // settings with no upstream value, chosen here
    let _ = writeln!(s, "assumed = learning_rate lr_schedule weight_decay(0) grad_clip");
    s
}

/// Trains from scratch.
pub fn train<T: Real>(cfg: &TrainConfig, dataset: &PatchBatch, out: Option<&RunOutput>) -> Result<RunState<T>> {
    cfg.validate()?;
    if let Some(o) = out {
        o.write(MANIFEST_FILE, &manifest(cfg, dataset, 8 * T::BYTES))?;
    }
    resume(cfg, dataset, RunState::new(cfg), out)
}

/// Continues `state` until the configured number of epochs is done.
pub fn resume<T: Real>(cfg: &TrainConfig, dataset: &PatchBatch, mut state: RunState<T>, out: Option<&RunOutput>) -> Result<RunState<T>> {
    cfg.validate()?;
    let (train_groups, val_groups) = split_identities(dataset, cfg.validation);
    let b = cfg.batch_identities;
    if train_groups.len() < b {
        return Err(Error::invalid(format!(
            "{} training identities, batch needs {b}",
            train_groups.len()
        )));
    }
    if cfg.validation && val_groups.len() < 2 {
        return Err(Error::invalid("validation split holds fewer than two identities"));
    }
    let per_epoch = (train_groups.len() / b) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    let stop = cfg.stop_after_step.map_or(total, |s| s.min(total));
    while state.step < stop {
        let epoch = state.step / per_epoch;
        let pos = (state.step % per_epoch) as usize;
        if order_epoch != epoch {
            order = epoch_order(cfg.seed, epoch, train_groups.len());
            order_epoch = epoch;
        }
        let groups: Vec<&(u32, Vec<usize>)> = order[pos * b..(pos + 1) * b].iter().map(|&i| &train_groups[i]).collect();
        let batch = build_batch(dataset, &groups, &mut state.rng)?;
        let lr = match cfg.lr_schedule {
            LrSchedule::Constant => cfg.learning_rate,
            LrSchedule::LinearDecay => cfg.learning_rate * (1.0 - state.step as f64 / total as f64),
        };
        let step_no = state.step;
        let result = loss_and_grads(&state.params, &batch, &cfg.loss).and_then(|(loss, mut grads, stats)| {
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            adam_step(&mut state, &grads, lr)?;
            state.params.update_running_stats(&stats);
            Ok(loss)
        });
        let loss = match result {
            Ok(l) => l,
            Err(e) if e.is_numeric() => {
                if let Some(o) = out {
                    save_checkpoint(&o.dir.join(LAST_GOOD_FILE), &state.params)?;
                }
                return Err(Error::TrainingAborted {
                    step: step_no + 1,
                    source: Box::new(e),
                });
            }
            Err(e) => return Err(e),
        };
        let end_of_epoch = pos as u64 + 1 == per_epoch;
        let val = if end_of_epoch && cfg.validation {
            Some(validation_fpr95(&state.params, dataset, &val_groups)?)
        } else {
            None
        };
        state.history.push(LogRow {
            step: state.step,
            epoch: epoch + 1,
            loss_triplet: loss.triplet,
            loss_r_l2: loss.r_l2,
            loss_total: loss.total,
            val_fpr95: val,
        });
        if let Some(o) = out {
            let done = epoch + 1;
            let last = state.step == stop;
            if end_of_epoch || last {
                o.write(METRICS_FILE, &metrics_csv(&state.history))?;
            }
            if last || (end_of_epoch && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0) {
                save_run(&o.dir, &state)?;
            }
        }
    }
    Ok(state)
}

// ---- run-state files -----------------------------------------------------

const STATE_MAGIC: &[u8; 4] = b"PLST";
const STATE_VERSION: u32 = 1;

/// Writes `model.ckpt` and `state.bin` into `dir`.
pub fn save_run<T: Real>(dir: &Path, state: &RunState<T>) -> Result<()> {
    save_checkpoint(&dir.join(MODEL_FILE), &state.params)?;
    let mut b = Vec::new();
    b.extend_from_slice(STATE_MAGIC);
    b.extend_from_slice(&STATE_VERSION.to_le_bytes());
    b.push(T::BYTES as u8);
    b.extend_from_slice(&state.step.to_le_bytes());
    b.extend_from_slice(&state.adam.t.to_le_bytes());
    b.extend_from_slice(&state.rng.get_seed());
    b.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    b.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    b.extend_from_slice(&(state.frozen.len() as u32).to_le_bytes());
    for &f in &state.frozen {
        b.push(f as u8);
    }
    for t in state.adam.m.iter().chain(&state.adam.v) {
        b.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut b);
        }
    }
    b.extend_from_slice(&(state.history.len() as u64).to_le_bytes());
    for r in &state.history {
        b.extend_from_slice(&r.step.to_le_bytes());
        b.extend_from_slice(&r.epoch.to_le_bytes());
        for v in [r.loss_triplet, r.loss_r_l2, r.loss_total, r.val_fpr95.unwrap_or(f64::NAN)] {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let p = dir.join(STATE_FILE);
    fs::write(&p, b).map_err(|e| Error::io(&p, e))
}

/// Reads the state written by [`save_run`].
pub fn load_run<T: Real>(dir: &Path) -> Result<RunState<T>> {
    let params = load_checkpoint::<T>(&dir.join(MODEL_FILE), None)?;
    let path = dir.join(STATE_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - at < n {
            return Err(Error::format(&path, format!("truncated at byte {at}")));
        }
        at += n;
        Ok(&bytes[at - n..at])
    };
    if take(4)? != STATE_MAGIC {
        return Err(Error::format(&path, "bad magic, not a run-state file"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4"));
    if version != STATE_VERSION {
        return Err(Error::format(&path, format!("unsupported version {version}")));
    }
    if take(1)?[0] as usize != T::BYTES {
        return Err(Error::format(&path, "value width differs from the requested precision"));
    }
    let u64le = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8"));
    let step = u64le(take(8)?);
    let t = u64le(take(8)?);
    let seed: [u8; 32] = take(32)?.try_into().expect("32");
    let stream = u64le(take(8)?);
    let word_pos = u128::from_le_bytes(take(16)?.try_into().expect("16"));
    let nf = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
    let frozen: Vec<bool> = take(nf)?.iter().map(|&b| b != 0).collect();
    if nf != params.params.len() {
        return Err(Error::format(&path, "parameter count differs from the model"));
    }
    let mut moments = Vec::new();
    for k in 0..2 * nf {
        let n = u64le(take(8)?) as usize;
        let shape = params.params[k % nf].tensor.shape().to_vec();
        if n != shape.iter().product::<usize>() {
            return Err(Error::format(&path, format!("moment {k} has {n} values")));
        }
        let data = take(n * T::BYTES)?.chunks_exact(T::BYTES).map(T::read_le).collect();
        moments.push(Tensor::new(shape, data)?);
    }
    let v = moments.split_off(nf);
    let rows = u64le(take(8)?) as usize;
    let mut history = Vec::with_capacity(rows);
    for _ in 0..rows {
        let step = u64le(take(8)?);
        let epoch = u64le(take(8)?);
        let mut f = [0.0; 4];
        for x in &mut f {
            *x = f64::from_le_bytes(take(8)?.try_into().expect("8"));
        }
        history.push(LogRow {
            step,
            epoch,
            loss_triplet: f[0],
            loss_r_l2: f[1],
            loss_total: f[2],
            val_fpr95: (!f[3].is_nan()).then_some(f[3]),
        });
    }
    if at != bytes.len() {
        return Err(Error::format(&path, "trailing bytes"));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(RunState {
        params,
        adam: AdamState { m: moments, v, t },
        step,
        history,
        rng,
        frozen,
    })
}
