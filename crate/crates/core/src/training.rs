//! Losses, the first-order bi-level optimization loop, checkpoints and run
//! configuration.
//!
//! Each optimization step has two levels. The inner step updates every
//! network parameter on a training batch with the descriptor weights `z`
//! held constant. The outer step updates the descriptor logits `alpha` on a
//! validation batch with the network held constant (first order: the
//! dependence of the inner optimum on `alpha` is dropped).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    apply_variance_mode, sample_at, sample_subsequence, LabelSpace, SamplingPool, Scan, SequenceSample, VarianceMode,
};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::geometry::{euler_zyx, euler_zyx_partials, frame_corners, FrameGeometry, RigidTransform};
use crate::model::{descriptor, Activation, Gradients, Model, ModelConfig};
use crate::seeds;

/// Probability floor inside the logarithm of the cross-entropy.
pub const CE_EPS: f64 = 1e-12;
/// Training aborts once the total loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub const CHECKPOINT_FORMAT: &str = "freehand-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    /// Reconstruction loss, mm.
    pub l_rec: f64,
    /// Subject-task cross-entropy, nats.
    pub l_ce_1: f64,
    /// Protocol-task cross-entropy, nats.
    pub l_ce_2: f64,
    pub l_total: f64,
}

impl LossBundle {
    pub fn new(l_rec: f64, l_ce_1: f64, l_ce_2: f64) -> Self {
        LossBundle { l_rec, l_ce_1, l_ce_2, l_total: l_rec + l_ce_1 + l_ce_2 }
    }

    pub fn is_finite(&self) -> bool {
        self.l_total.is_finite()
    }
}

fn check_distribution(y: &[f64], t: &[f64]) -> Result<()> {
    if y.len() != t.len() || y.is_empty() {
        return Err(Error::InvalidInput(format!("prediction has {} classes, target {}", y.len(), t.len())));
    }
    let sum: f64 = y.iter().sum();
    if (sum - 1.0).abs() > 1e-4 || y.iter().any(|&v| v < 0.0) {
        return Err(Error::ContractViolation(format!("prediction is not a distribution (sums to {sum})")));
    }
    Ok(())
}

/// Cross-entropy of one prediction against one target distribution.
pub fn cross_entropy(y: &[f64], t: &[f64]) -> Result<f64> {
    check_distribution(y, t)?;
    Ok(-y.iter().zip(t).map(|(&y, &t)| t * (y + CE_EPS).ln()).sum::<f64>())
}

/// Batch-mean cross-entropy.
pub fn loss_ce(ys: &[Vec<f64>], ts: &[Vec<f64>]) -> Result<f64> {
    if ys.len() != ts.len() || ys.is_empty() {
        return Err(Error::InvalidInput(format!("{} predictions for {} targets", ys.len(), ts.len())));
    }
    let mut total = 0.0;
    for (y, t) in ys.iter().zip(ts) {
        total += cross_entropy(y, t)?;
    }
    Ok(total / ys.len() as f64)
}

/// Mean corner distance between frames moved by the predicted and by the
/// ground-truth relative transforms, over all pairs.
pub fn loss_rec(pred: &[RigidTransform], gt: &[RigidTransform], g: &FrameGeometry) -> Result<f64> {
    let params: Vec<f64> = pred.iter().flat_map(|p| p.params()).collect();
    Ok(loss_rec_grad(&params, gt, g)?.0)
}

/// `loss_rec` on packed `[rz, ry, rx, tx, ty, tz]` parameters, with its
/// gradient with respect to them.
pub fn loss_rec_grad(pred_params: &[f64], gt: &[RigidTransform], g: &FrameGeometry) -> Result<(f64, Vec<f64>)> {
    if pred_params.len() != 6 * gt.len() || gt.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} predicted parameters for {} target transforms",
            pred_params.len(),
            gt.len()
        )));
    }
    let corners = frame_corners(g);
    let norm = 1.0 / (gt.len() * corners.len()) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred_params.len()];
    for (k, t) in gt.iter().enumerate() {
        let p = &pred_params[6 * k..6 * k + 6];
        let rot = [p[0], p[1], p[2]];
        let r = euler_zyx(rot);
        let dr = euler_zyx_partials(rot);
        let trans = nalgebra::Vector3::new(p[3], p[4], p[5]);
        for c in &corners {
            let diff = r * c.coords + trans - t.apply(c).coords;
            let d = diff.norm();
            loss += d * norm;
            if d > 0.0 {
                let u = diff * (norm / d);
                let gk = &mut grad[6 * k..6 * k + 6];
                for i in 0..3 {
                    gk[i] += u.dot(&(dr[i] * c.coords));
                    gk[3 + i] += u[i];
                }
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiLevelConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Weight of the second-order term; only 0 is implemented.
    pub xi: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optimization steps per epoch; 0 means one pass over the training scans.
    pub steps_per_epoch: usize,
    /// Epochs between validation passes.
    pub val_every: usize,
}

impl Default for BiLevelConfig {
    fn default() -> Self {
        BiLevelConfig {
            inner_lr: 1e-3,
            outer_lr: 3e-4,
            xi: 0.0,
            batch_size: 8,
            max_epochs: 300,
            steps_per_epoch: 0,
            val_every: 1,
        }
    }
}

impl BiLevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.xi != 0.0 {
            return Err(Error::InvalidParameter(format!(
                "only the first-order update (xi = 0) is implemented, got xi = {}",
                self.xi
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.val_every == 0 {
            return Err(Error::InvalidParameter("batch size, epochs and validation cadence must be positive".into()));
        }
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::InvalidParameter("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Losses and gradients of a batch. The reconstruction term is averaged over
/// all samples, each cross-entropy over the samples carrying that label.
pub struct BatchResult {
    pub loss: LossBundle,
    pub grad: Gradients,
}

fn aux_targets(sample: &SequenceSample, model: &Model) -> Vec<Option<usize>> {
    match model.n_tasks() {
        0 => Vec::new(),
        _ => vec![sample.subject_class, Some(sample.protocol_class)],
    }
}

/// Total loss of a batch and, when `with_grad`, its gradient with respect to
/// all network parameters and descriptor logits.
pub fn batch_loss(model: &Model, batch: &[SequenceSample], g: &FrameGeometry, with_grad: bool) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let n_tasks = model.n_tasks();
    if n_tasks != 0 && n_tasks != 2 {
        return Err(Error::InvalidParameter(format!("expected 0 or 2 auxiliary tasks, model has {n_tasks}")));
    }
    let mut counts = vec![0usize; n_tasks];
    for s in batch {
        for (c, t) in counts.iter_mut().zip(aux_targets(s, model)) {
            *c += t.is_some() as usize;
        }
    }
    let b = batch.len() as f64;

    let per_sample: Vec<Result<([f64; 3], Option<Gradients>)>> = batch
        .par_iter()
        .map(|s| {
            let cache = model.forward_cached(s.frames(), n_tasks > 0)?;
            let out = &cache.output;
            let (rec, mut g_main) = loss_rec_grad(&out.main, &s.targets, g)?;
            g_main.iter_mut().for_each(|v| *v /= b);
            let mut ce = [0.0; 2];
            let mut g_mixed = Vec::with_capacity(n_tasks);
            for (task, target) in aux_targets(s, model).into_iter().enumerate() {
                let y = &out.mixed[task];
                let mut gy = vec![0.0; y.len()];
                if let Some(c) = target {
                    let t = crate::dataset::one_hot(c, y.len());
                    ce[task] = cross_entropy(y, &t)? / counts[task] as f64;
                    gy[c] = -1.0 / ((y[c] + CE_EPS) * counts[task] as f64);
                }
                g_mixed.push(gy);
            }
            let grad = with_grad.then(|| {
                let mut gr = Gradients::zeros(model);
                model.backward(&cache, &g_main, &g_mixed, &mut gr);
                gr
            });
            Ok(([rec / b, ce[0], ce[1]], grad))
        })
        .collect();

    let mut sums = [0.0; 3];
    let mut grad = Gradients::zeros(model);
    for r in per_sample {
        let (l, gr) = r?;
        for i in 0..3 {
            sums[i] += l[i];
        }
        if let Some(gr) = gr {
            add_gradients(&mut grad, &gr);
        }
    }
    Ok(BatchResult { loss: LossBundle::new(sums[0], sums[1], sums[2]), grad })
}

fn add_gradients(acc: &mut Gradients, g: &Gradients) {
    acc.params.iter_mut().zip(&g.params).for_each(|(a, b)| *a += b);
    for (a, b) in acc.alpha.iter_mut().zip(&g.alpha) {
        a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
    }
}

/// Gradient of the validation loss with respect to the descriptor logits,
/// network held fixed. Only the cross-entropy terms depend on `alpha`, so
/// no backward pass through the network is needed.
pub fn outer_gradient(model: &Model, batch: &[SequenceSample], g: &FrameGeometry) -> Result<(LossBundle, Vec<Vec<f64>>)> {
    let n_tasks = model.n_tasks();
    let mut counts = vec![0usize; n_tasks];
    for s in batch {
        for (c, t) in counts.iter_mut().zip(aux_targets(s, model)) {
            *c += t.is_some() as usize;
        }
    }
    let b = batch.len() as f64;
    let per_sample: Vec<Result<SampleOuter>> = batch
        .par_iter()
        .map(|s| {
            let out = model.forward(s.frames())?;
            let (rec, _) = loss_rec_grad(&out.main, &s.targets, g)?;
            let mut ce = [0.0; 2];
            let mut ga = Vec::with_capacity(n_tasks);
            for (task, target) in aux_targets(s, model).into_iter().enumerate() {
                let y = &out.mixed[task];
                let mut gy = vec![0.0; y.len()];
                if let Some(c) = target {
                    ce[task] = cross_entropy(y, &crate::dataset::one_hot(c, y.len()))? / counts[task] as f64;
                    gy[c] = -1.0 / ((y[c] + CE_EPS) * counts[task] as f64);
                }
                if model.descriptors[task].fixed.is_some() {
                    ga.push(vec![0.0; out.z[task].len()]);
                } else {
                    ga.push(descriptor::alpha_gradient(&out.z[task], &out.branch_probs[task], &gy));
                }
            }
            Ok(([rec / b, ce[0], ce[1]], ga))
        })
        .collect();
    let mut sums = [0.0; 3];
    let mut grad: Vec<Vec<f64>> = model.descriptors.iter().map(|d| vec![0.0; d.alpha.len()]).collect();
    for r in per_sample {
        let (l, ga) = r?;
        for i in 0..3 {
            sums[i] += l[i];
        }
        for (a, b) in grad.iter_mut().zip(&ga) {
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
    }
    Ok((LossBundle::new(sums[0], sums[1], sums[2]), grad))
}

/// Per-sample `[l_rec, l_ce_1, l_ce_2]` contributions and alpha gradients.
type SampleOuter = ([f64; 3], Vec<Vec<f64>>);

/// Best validation record so far; `val_rec` never increases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_rec: f64,
}

/// Mutable optimization state: the model (network parameters and descriptor
/// logits), both optimizers, and the training history.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub inner: Adam,
    pub outer: Vec<Adam>,
    pub epoch: usize,
    pub best: Option<BestRecord>,
    /// `[epoch][task][tap]` descriptor weights at the end of each epoch.
    pub descriptor_history: Vec<Vec<Vec<f64>>>,
}

impl TrainState {
    pub fn new(model: Model, cfg: &BiLevelConfig) -> Self {
        let inner = Adam::new(cfg.inner_lr, model.params.len());
        let outer = model.descriptors.iter().map(|d| Adam::new(cfg.outer_lr, d.alpha.len())).collect();
        TrainState { model, inner, outer, epoch: 0, best: None, descriptor_history: Vec::new() }
    }

    /// Records a validation result; returns whether it is a new best.
    pub fn record_validation(&mut self, epoch: usize, val_rec: f64) -> bool {
        let better = val_rec.is_finite() && self.best.as_ref().is_none_or(|b| val_rec < b.val_rec);
        if better {
            self.best = Some(BestRecord { epoch, val_rec });
        }
        better
    }

    fn searching(&self) -> bool {
        self.model.descriptors.iter().any(|d| d.fixed.is_none())
    }
}

/// Step 1: network parameters only, `z` constant.
pub fn inner_step(state: &mut TrainState, batch: &[SequenceSample], g: &FrameGeometry) -> Result<LossBundle> {
    let r = batch_loss(&state.model, batch, g, true)?;
    if !r.loss.is_finite() || !r.grad.params.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite training loss {}", r.loss.l_total)));
    }
    state.inner.step(&mut state.model.params, &r.grad.params);
    Ok(r.loss)
}

/// Step 2: descriptor logits only, network constant.
pub fn outer_step(state: &mut TrainState, batch: &[SequenceSample], g: &FrameGeometry) -> Result<LossBundle> {
    let (loss, grad) = outer_gradient(&state.model, batch, g)?;
    if !loss.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite validation loss {}", loss.l_total)));
    }
    for ((d, opt), ga) in state.model.descriptors.iter_mut().zip(&mut state.outer).zip(&grad) {
        if d.fixed.is_none() {
            opt.step(&mut d.alpha, ga);
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub train: LossBundle,
    pub val: Option<LossBundle>,
}

/// One bi-level step. The outer step is skipped when no descriptor is free
/// (main-task-only models, or after finalization).
pub fn bilevel_step(
    state: &mut TrainState,
    train_batch: &[SequenceSample],
    val_batch: &[SequenceSample],
    cfg: &BiLevelConfig,
    g: &FrameGeometry,
) -> Result<StepLosses> {
    cfg.validate()?;
    let train = inner_step(state, train_batch, g)?;
    let val = if state.searching() && !val_batch.is_empty() { Some(outer_step(state, val_batch, g)?) } else { None };
    Ok(StepLosses { train, val })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub model: Model,
    pub labels: Option<LabelSpace>,
}

impl Checkpoint {
    pub fn new(epoch: usize, model: Model, labels: Option<LabelSpace>) -> Self {
        Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, epoch, model, labels }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        if value.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(bad("not a checkpoint".into()));
        }
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(bad(format!("unsupported checkpoint version {version:?}")));
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        ck.model.config.validate()?;
        Ok(ck)
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
    /// Frames per window, `M`.
    pub seq_len: usize,
    /// Protocol task class count, 3 or 6.
    pub n_protocol: usize,
    pub variance_mode: VarianceMode,
    /// Train the main task alone, without auxiliary heads.
    pub no_branch: bool,
    /// Block widths; the branch count `I` is their number.
    pub channels: Vec<usize>,
    pub activation: Activation,
    pub main_hidden: usize,
    pub optim: BiLevelConfig,
    /// Epochs of one-hot fine-tuning after the branches are finalized.
    pub finetune_epochs: usize,
    /// Fixed windows per validation scan for model selection.
    pub val_windows_per_scan: usize,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            data_dir: None,
            seed: 0,
            seq_len: m.seq_len,
            n_protocol: 6,
            variance_mode: VarianceMode::All,
            no_branch: false,
            channels: m.channels,
            activation: m.activation,
            main_hidden: m.main_hidden,
            optim: BiLevelConfig::default(),
            finetune_epochs: 30,
            val_windows_per_scan: 2,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn n_branches(&self) -> usize {
        self.channels.len()
    }

    pub fn model_config(&self, labels: &LabelSpace, geometry: &FrameGeometry) -> ModelConfig {
        ModelConfig {
            seq_len: self.seq_len,
            frame_height: geometry.height_px,
            frame_width: geometry.width_px,
            channels: self.channels.clone(),
            activation: self.activation,
            main_hidden: self.main_hidden,
            aux_classes: if self.no_branch { Vec::new() } else { vec![labels.n_subjects(), labels.n_protocol] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.n_protocol != 3 && self.n_protocol != 6 {
            return Err(Error::InvalidParameter(format!("protocol classes must be 3 or 6, got {}", self.n_protocol)));
        }
        if self.val_windows_per_scan == 0 {
            return Err(Error::InvalidParameter("need at least one validation window per scan".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Training and validation scans for one run, already filtered by variance
/// mode, with the label space derived from the training scans.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: SamplingPool,
    pub val: SamplingPool,
    pub labels: LabelSpace,
    pub geometry: FrameGeometry,
}

impl TrainData {
    pub fn prepare(cfg: &RunConfig, train: &[Scan], val: &[Scan]) -> Result<TrainData> {
        let subset = apply_variance_mode(train, cfg.variance_mode, seeds::derive(cfg.seed, seeds::SUBSET, 0))?;
        let train = SamplingPool::new(&subset, cfg.seq_len);
        let val = SamplingPool::new(val, cfg.seq_len);
        if train.is_empty() || val.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no training or validation scan has {} frames",
                cfg.seq_len
            )));
        }
        let geometry = train.scans[0].geometry;
        if train.scans.iter().chain(&val.scans).any(|s| s.geometry != geometry) {
            return Err(Error::InvalidInput("scans differ in frame geometry".into()));
        }
        let labels = LabelSpace::from_training(&train.scans, cfg.n_protocol)?;
        Ok(TrainData { train, val, labels, geometry })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: String,
    pub train: LossBundle,
    pub val: Option<LossBundle>,
    pub val_rec: Option<f64>,
    pub z: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best soft-mixture checkpoint by validation reconstruction loss.
    pub best: Model,
    pub best_record: BestRecord,
    /// Finalized model: branches frozen one-hot and, if configured,
    /// fine-tuned. This is the reported configuration.
    pub headline: Model,
    /// 0-based tap chosen per task; empty without branches.
    pub branches: Vec<usize>,
    pub descriptor_history: Vec<Vec<Vec<f64>>>,
    pub log: Vec<EpochLog>,
}

fn validation_windows(val: &SamplingPool, labels: &LabelSpace, per_scan: usize) -> Result<Vec<SequenceSample>> {
    let mut out = Vec::new();
    for scan in &val.scans {
        let span = scan.n_frames() - val.m;
        let k = per_scan.min(span + 1);
        for i in 0..k {
            let start = if k == 1 { 0 } else { i * span / (k - 1) };
            out.push(sample_at(scan, start, val.m, labels)?);
        }
    }
    Ok(out)
}

fn mean_val_rec(model: &Model, windows: &[SequenceSample], g: &FrameGeometry) -> Result<f64> {
    let losses: Vec<Result<f64>> = windows
        .par_iter()
        .map(|s| {
            let out = model.forward_cached(s.frames(), false)?.output;
            Ok(loss_rec_grad(&out.main, &s.targets, g)?.0)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / windows.len() as f64)
}

struct Sampler {
    rng: ChaCha8Rng,
    val_cursor: usize,
}

impl Sampler {
    fn train_batch(&mut self, data: &TrainData, b: usize) -> Result<Vec<SequenceSample>> {
        (0..b)
            .map(|_| {
                let scan = &data.train.scans[self.rng.random_range(0..data.train.scans.len())];
                sample_subsequence(scan, data.train.m, &mut self.rng, &data.labels)
            })
            .collect()
    }

    /// Validation scans are visited round-robin.
    fn val_batch(&mut self, data: &TrainData, b: usize) -> Result<Vec<SequenceSample>> {
        (0..b)
            .map(|_| {
                let scan = &data.val.scans[self.val_cursor % data.val.scans.len()];
                self.val_cursor += 1;
                sample_subsequence(scan, data.val.m, &mut self.rng, &data.labels)
            })
            .collect()
    }
}

/// Writes checkpoints and logs as training progresses.
struct RunFiles {
    dir: PathBuf,
    csv: BufWriter<File>,
}

impl RunFiles {
    fn open(dir: &Path, model: &Model) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut csv = BufWriter::new(File::create(dir.join("epochs.csv"))?);
        let mut header = String::from("epoch,phase,l_rec,l_ce_1,l_ce_2,l_total,val_l_rec");
        for task in 0..model.n_tasks() {
            for tap in 0..model.n_taps() {
                header.push_str(&format!(",z_{}_{}", task + 1, tap + 1));
            }
        }
        writeln!(csv, "{header}")?;
        Ok(RunFiles { dir: dir.to_path_buf(), csv })
    }

    fn log(&mut self, row: &EpochLog) -> Result<()> {
        let t = &row.train;
        let mut line = format!(
            "{},{},{},{},{},{},{}",
            row.epoch,
            row.phase,
            t.l_rec,
            t.l_ce_1,
            t.l_ce_2,
            t.l_total,
            row.val_rec.map_or(String::new(), |v| v.to_string())
        );
        for v in row.z.iter().flatten() {
            line.push_str(&format!(",{v}"));
        }
        writeln!(self.csv, "{line}")?;
        self.csv.flush()?;
        Ok(())
    }
}

fn run_epochs(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &RunConfig,
    epochs: usize,
    phase: &str,
    sampler: &mut Sampler,
    val_windows: &[SequenceSample],
    files: &mut Option<RunFiles>,
    log: &mut Vec<EpochLog>,
) -> Result<Model> {
    let o = &cfg.optim;
    let steps = if o.steps_per_epoch > 0 { o.steps_per_epoch } else { data.train.scans.len().div_ceil(o.batch_size) };
    let mut best_model = state.model.clone();
    state.best = None;
    for e in 0..epochs {
        let epoch = e + 1;
        state.epoch = epoch;
        let mut train = LossBundle::default();
        let mut val_sum = LossBundle::default();
        let mut n_val = 0usize;
        for _ in 0..steps {
            let tb = sampler.train_batch(data, o.batch_size)?;
            let vb = if state.searching() { sampler.val_batch(data, o.batch_size)? } else { Vec::new() };
            let r = bilevel_step(state, &tb, &vb, o, &data.geometry).map_err(|e| abort(state, files, epoch, e))?;
            if r.train.l_total > DIVERGENCE_LIMIT {
                return Err(abort(state, files, epoch, Error::InvalidInput(format!("loss {} diverged", r.train.l_total))));
            }
            train = add_losses(&train, &r.train, 1.0 / steps as f64);
            if let Some(v) = r.val {
                val_sum = add_losses(&val_sum, &v, 1.0);
                n_val += 1;
            }
        }
        let val = (n_val > 0).then(|| add_losses(&LossBundle::default(), &val_sum, 1.0 / n_val as f64));
        let z = state.model.z();
        let val_rec = if epoch % o.val_every == 0 || epoch == epochs {
            let v = mean_val_rec(&state.model, val_windows, &data.geometry)?;
            if state.record_validation(epoch, v) {
                best_model = state.model.clone();
                if let Some(f) = files.as_ref() {
                    Checkpoint::new(epoch, best_model.clone(), Some(data.labels.clone()))
                        .save(&f.dir.join(format!("{phase}_best.ckpt.json")))?;
                }
            }
            Some(v)
        } else {
            None
        };
        if phase == "search" {
            state.descriptor_history.push(z.clone());
        }
        let row = EpochLog { epoch, phase: phase.into(), train, val, val_rec, z };
        if let Some(f) = files.as_mut() {
            f.log(&row)?;
        }
        log.push(row);
    }
    Ok(best_model)
}

fn add_losses(acc: &LossBundle, l: &LossBundle, w: f64) -> LossBundle {
    LossBundle::new(acc.l_rec + w * l.l_rec, acc.l_ce_1 + w * l.l_ce_1, acc.l_ce_2 + w * l.l_ce_2)
}

fn abort(state: &TrainState, files: &Option<RunFiles>, epoch: usize, cause: Error) -> Error {
    let checkpoint = files.as_ref().and_then(|f| {
        let path = f.dir.join("abort.ckpt.json");
        Checkpoint::new(epoch, state.model.clone(), None).save(&path).ok().map(|_| path)
    });
    Error::Aborted { epoch, reason: cause.to_string(), checkpoint }
}

/// Runs the search phase, selects the best checkpoint by validation
/// reconstruction loss, finalizes its branches and optionally fine-tunes the
/// finalized network. With `out_dir`, checkpoints and the per-epoch CSV log
/// are written there.
pub fn train(cfg: &RunConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config(&data.labels, &data.geometry), seeds::derive(cfg.seed, seeds::INIT, 0))?;
    let mut state = TrainState::new(model, &cfg.optim);
    let mut sampler = Sampler { rng: ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, seeds::SAMPLING, 0)), val_cursor: 0 };
    let val_windows = validation_windows(&data.val, &data.labels, cfg.val_windows_per_scan)?;
    let mut files = out_dir.map(|d| RunFiles::open(d, &state.model)).transpose()?;
    let mut log = Vec::new();

    let best = run_epochs(&mut state, data, cfg, cfg.optim.max_epochs, "search", &mut sampler, &val_windows, &mut files, &mut log)?;
    let best_record = state.best.clone().expect("validation runs on the last epoch");
    let descriptor_history = state.descriptor_history.clone();

    let mut finalized = best.clone();
    let branches = finalized.finalize_branches();
    let headline = if cfg.finetune_epochs > 0 && !branches.is_empty() {
        let mut ft = TrainState::new(finalized, &cfg.optim);
        ft.descriptor_history.clear();
        run_epochs(&mut ft, data, cfg, cfg.finetune_epochs, "finetune", &mut sampler, &val_windows, &mut files, &mut log)?
    } else {
        finalized
    };
    if let Some(f) = files.as_ref() {
        Checkpoint::new(best_record.epoch, headline.clone(), Some(data.labels.clone())).save(&f.dir.join("final.ckpt.json"))?;
    }
    Ok(TrainOutcome { best, best_record, headline, branches, descriptor_history, log })
}

/// Trace of the constructed two-branch problem: one branch frozen at the
/// correct labels, one frozen uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrace {
    /// `z` after every outer step.
    pub z: Vec<Vec<f64>>,
    /// First step (1-based) after which the correct branch has the larger weight.
    pub selected_at: Option<usize>,
    pub final_argmax: usize,
}

/// Outer-level descriptor search on frozen branch predictions: branch 0
/// always predicts uniform, branch 1 predicts the true label. Logits start
/// at random values; each step draws a batch of labels.
pub fn toy_descriptor_search(seed: u64, n_classes: usize, steps: usize, outer_lr: f64, batch: usize) -> ToyTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut desc = descriptor::TaskDescriptor::uniform(2);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    desc.alpha = (0..2).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
    let mut opt = Adam::new(outer_lr, 2);
    let uniform = vec![1.0 / n_classes as f64; n_classes];
    let mut trace = Vec::with_capacity(steps);
    let mut selected_at = None;
    for step in 1..=steps {
        let z = desc.weights();
        let mut grad = vec![0.0; 2];
        for _ in 0..batch {
            let c = rng.random_range(0..n_classes);
            let probs = vec![uniform.clone(), crate::dataset::one_hot(c, n_classes)];
            let y = descriptor::mix(&probs, &z);
            let mut gy = vec![0.0; n_classes];
            gy[c] = -1.0 / ((y[c] + CE_EPS) * batch as f64);
            let ga = descriptor::alpha_gradient(&z, &probs, &gy);
            grad.iter_mut().zip(&ga).for_each(|(a, b)| *a += b);
        }
        opt.step(&mut desc.alpha, &grad);
        let z = desc.weights();
        if selected_at.is_none() && descriptor::argmax(&z) == 1 {
            selected_at = Some(step);
        }
        trace.push(z);
    }
    let final_argmax = descriptor::argmax(&desc.weights());
    ToyTrace { z: trace, selected_at, final_argmax }
}
