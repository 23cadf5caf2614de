//! Adversarial contrastive pretraining, linear-probe fine-tuning and a
//! cross-entropy baseline, with the optimizers and schedule they share.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackContext, ModelView, ObjectiveMode};
use crate::data::{augment_batch, batch_iter, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::losses::{adv_contrastive, cross_entropy, ViewTriple, DEFAULT_TEMPERATURE};
use crate::model::{
    write_checkpoint, BnMode, BoundParams, Checkpoint, EncoderSpec, ModelParams, ParamEntry, Scope, BN_MOMENTUM,
    DEFAULT_PROJECTION_DIM,
};
use crate::tensor::{Element, Gradients, Tape, Tensor};

/// `lr0 · ½ · (1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine_lr: total_steps must be >= 1"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("cosine_lr: step {step} beyond total {total_steps}")));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter accumulators. SGD uses `first` as the velocity; Adam uses
/// `first`/`second` as the moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn sgd(params: &[ParamEntry<T>]) -> Self {
        Self {
            first: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn adam(params: &[ParamEntry<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

fn check_step_shapes<T: Element>(
    params: &[ParamEntry<T>],
    grads: &[Option<Tensor<T>>],
    slots: &[Tensor<T>],
) -> Result<()> {
    if grads.len() != params.len() || slots.len() != params.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!("{} params, {} grads, {} state slots", params.len(), grads.len(), slots.len()),
        ));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(slots) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() || s.shape() != p.value.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("{}: param {:?}, grad {:?}, state {:?}", p.name, p.value.shape(), g.shape(), s.shape()),
                ));
            }
        }
    }
    Ok(())
}

/// `v ← momentum·v + g; p ← p − lr·v` for every trainable entry with a
/// gradient. Frozen entries and buffers are never touched.
pub fn sgd_momentum_step<T: Element>(
    params: &mut [ParamEntry<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    lr: T,
    momentum: T,
) -> Result<()> {
    check_step_shapes(params, grads, &state.first)?;
    state.step += 1;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.first.iter_mut()) {
        let Some(g) = g else { continue };
        if !p.trainable() {
            continue;
        }
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *w = *w - lr * *vi;
        }
    }
    Ok(())
}

/// Bias-corrected Adam step for every trainable entry with a gradient.
pub fn adam_step<T: Element>(
    params: &mut [ParamEntry<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    lr: T,
    cfg: &AdamConfig,
) -> Result<()> {
    check_step_shapes(params, grads, &state.first)?;
    check_step_shapes(params, grads, &state.second)?;
    state.step += 1;
    let (b1, b2, eps) = (T::of(cfg.beta1), T::of(cfg.beta2), T::of(cfg.eps));
    let c1 = T::one() - T::of(cfg.beta1.powi(state.step as i32));
    let c2 = T::one() - T::of(cfg.beta2.powi(state.step as i32));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let Some(g) = g else { continue };
        if !p.trainable() {
            continue;
        }
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

fn collect_grads<T: Element>(tape: &Tape<T>, bound: &BoundParams, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
    bound
        .vars()
        .iter()
        .map(|&v| if tape.requires_grad(v) { grads.take(v) } else { None })
        .collect()
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-batch loss.
    pub loss: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pgd_views: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cw_views: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_json_lines(s: &str) -> Result<Self> {
        let records = s
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Report(format!("train log line {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json_lines().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// The log with wall-clock times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.seconds = 0.0;
        }
        out
    }
}

/// Optional side effects during training.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Directory for periodic checkpoints.
    pub checkpoint_dir: Option<&'a Path>,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

impl Hooks<'_> {
    fn epoch_done(&mut self, r: &EpochRecord) {
        if let Some(f) = self.on_epoch.as_mut() {
            f(r);
        }
    }
}

/// Independent seed for a (purpose, epoch) pair.
pub(crate) fn derive_seed(seed: u64, tag: u64, epoch: usize) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_TAG: u64 = 1;
const AUGMENT_TAG: u64 = 2;

/// One shuffled epoch of index groups for training with batch norm. A
/// trailing group of one image is merged into the previous group, since
/// batch statistics (and contrastive negatives) need two samples.
fn train_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if dataset.len() < 2 {
        return Err(Error::invalid("training needs at least two images"));
    }
    let order = batch_iter(dataset, batch_size, Some(seed))?.order().to_vec();
    let mut groups: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let tail = groups.pop().expect("non-empty");
        groups.last_mut().expect("non-empty").extend(tail);
    }
    Ok(groups)
}

fn train_steps_per_epoch(n: usize, batch_size: usize) -> usize {
    let k = n.div_ceil(batch_size);
    if k > 1 && n % batch_size == 1 { k - 1 } else { k }
}

fn nonfinite(stage: &str, epoch: usize, batch: usize, v: f64) -> Error {
    Error::NonFinite(format!("{stage}: loss is {v} at epoch {epoch}, batch {batch}"))
}

fn check_dataset(op: &'static str, dataset: &Dataset, spec: &EncoderSpec) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid(format!("{op}: dataset is empty")));
    }
    let want = [spec.in_channels, spec.image_size, spec.image_size];
    if dataset.image_shape() != want {
        return Err(Error::shape(
            op,
            format!("dataset images {:?}, model expects {want:?}", dataset.image_shape()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub temperature: f64,
    /// Attack producing the PGD view.
    pub pgd: AttackConfig,
    /// Attack producing the CW view.
    pub cw: AttackConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
    /// Write a checkpoint every k epochs (0 disables).
    pub checkpoint_every: usize,
    pub projection_dim: usize,
}

impl PretrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        let eps = 0.03;
        Self {
            epochs,
            batch_size: 512,
            lr0: 0.4,
            momentum: 0.9,
            temperature: DEFAULT_TEMPERATURE,
            pgd: AttackConfig {
                objective: ObjectiveMode::Contrastive,
                ..AttackConfig::pgd(eps)
            },
            cw: AttackConfig {
                objective: ObjectiveMode::EmbeddingMargin,
                ..AttackConfig::cw(eps)
            },
            augment: AugmentPolicy::default(),
            seed,
            checkpoint_every: 0,
            projection_dim: DEFAULT_PROJECTION_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("pretrain.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("pretrain.batch_size must be >= 1"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::invalid(format!("pretrain.lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("pretrain.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!("pretrain.temperature must be > 0, got {}", self.temperature)));
        }
        for (name, a) in [("pgd", &self.pgd), ("cw", &self.cw)] {
            a.validate().map_err(|e| e.context(format!("pretrain.{name} attack")))?;
            if a.objective.is_supervised() {
                return Err(Error::invalid(format!(
                    "pretrain.{name} attack needs an embedding objective, got {}",
                    a.objective.as_str()
                )));
            }
        }
        self.augment.validate()
    }
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub log: TrainLog,
}

impl TrainOutput {
    pub fn checkpoint(&self, stage: &str) -> Checkpoint {
        let mut metadata = BTreeMap::new();
        metadata.insert("stage".to_string(), stage.to_string());
        metadata.insert("epochs".to_string(), self.log.records.len().to_string());
        Checkpoint {
            params: self.params.clone(),
            metadata,
        }
    }
}

fn periodic_checkpoint(
    hooks: &Hooks<'_>,
    every: usize,
    epoch: usize,
    last: usize,
    stage: &str,
    params: &ModelParams<f32>,
) -> Result<()> {
    let Some(dir) = hooks.checkpoint_dir else { return Ok(()) };
    if every == 0 || epoch % every != 0 || epoch == last {
        return Ok(());
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("stage".to_string(), stage.to_string());
    metadata.insert("epochs".to_string(), epoch.to_string());
    let ckpt = Checkpoint {
        params: params.clone(),
        metadata,
    };
    write_checkpoint(&dir.join(format!("{stage}_epoch{epoch:03}.ckpt")), &ckpt)
}

/// Adversarial contrastive pretraining of encoder and projection head.
///
/// For every mini-batch: augment, attack the augmented images with the PGD
/// and CW view attacks against the current encoder, then minimise the
/// adversarial contrastive loss over (clean, PGD, CW) projections with SGD
/// momentum under a cosine schedule.
pub fn act_pretrain(
    dataset: &Dataset,
    spec: &EncoderSpec,
    cfg: &PretrainConfig,
    mut hooks: Hooks<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    spec.validate()?;
    check_dataset("act_pretrain", dataset, spec)?;
    let mut params = ModelParams::<f32>::init(spec, dataset.num_classes(), cfg.projection_dim, cfg.seed)?;
    params.set_freeze(Scope::Classifier, true);
    let mut state = OptimizerState::sgd(params.entries());
    let total = train_steps_per_epoch(dataset.len(), cfg.batch_size) * cfg.epochs;
    let tau = cfg.temperature as f32;
    let mut step = 0;
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, AUGMENT_TAG, epoch));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let (mut pgd_views, mut cw_views) = (0, 0);
        let mut lr = cfg.lr0;
        for (bi, idx) in train_batches(dataset, cfg.batch_size, derive_seed(cfg.seed, SHUFFLE_TAG, epoch))?.iter().enumerate() {
            let batch = dataset.batch(idx)?;
            let b = batch.len();
            let x = augment_batch(&batch.x, &cfg.augment, &mut rng)?;

            // Views are attacked against the current weights in training mode.
            let view = ModelView {
                params: &params,
                mode: BnMode::Train,
            };
            let reference = {
                let mut tape = Tape::new();
                let p = params.bind(&mut tape, false);
                let xv = tape.constant(x.clone());
                let e = params.encode_on(&mut tape, &p, xv, BnMode::Train)?;
                let z = params.project_on(&mut tape, &p, e, BnMode::Train)?;
                tape.value(z).clone()
            };
            let ctx = AttackContext::embedding(&reference, tau);
            let x_pgd = run_attack(&view, &x, &cfg.pgd, &ctx, &mut rng)?;
            let x_cw = run_attack(&view, &x, &cfg.cw, &ctx, &mut rng)?;
            assert_eq!(x_pgd.shape()[0], b, "one PGD view per image");
            assert_eq!(x_cw.shape()[0], b, "one CW view per image");
            pgd_views += b;
            cw_views += b;

            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let xs = [tape.constant(x), tape.constant(x_pgd), tape.constant(x_cw)];
            let all = tape.concat(&xs)?;
            let e = params.encode_on(&mut tape, &p, all, BnMode::Train)?;
            let z = params.project_on(&mut tape, &p, e, BnMode::Train)?;
            let views = ViewTriple {
                z_orig: tape.slice_rows(z, 0, b)?,
                z_pgd: tape.slice_rows(z, b, 2 * b)?,
                z_cw: tape.slice_rows(z, 2 * b, 3 * b)?,
            };
            let loss = adv_contrastive(&mut tape, views, tau)?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(nonfinite("act_pretrain", epoch, bi + 1, value));
            }
            let mut grads = tape.backward(loss)?;
            let g = collect_grads(&tape, &p, &mut grads);
            lr = cosine_lr(step, total, cfg.lr0)?;
            sgd_momentum_step(params.entries_mut(), &g, &mut state, lr as f32, cfg.momentum as f32)?;
            params.update_running_stats(tape.bn_stats(), BN_MOMENTUM as f32)?;
            step += 1;
            loss_sum += value;
            batches += 1;
        }
        assert_eq!(pgd_views, dataset.len());
        assert_eq!(cw_views, dataset.len());
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            pgd_views: Some(pgd_views),
            cw_views: Some(cw_views),
        };
        hooks.epoch_done(&rec);
        log.records.push(rec);
        periodic_checkpoint(&hooks, cfg.checkpoint_every, epoch, cfg.epochs, "pretrain", &params)?;
    }
    params.set_freeze(Scope::Classifier, false);
    Ok(TrainOutput { params, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 128,
            lr: 1e-4,
            adam: AdamConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("finetune.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("finetune.batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("finetune.lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Embeddings of every image under the eval-mode encoder, in chunks.
pub fn embed_dataset(params: &ModelParams<f32>, dataset: &Dataset, chunk: usize) -> Result<Tensor<f32>> {
    let d = params.embedding_dim();
    let mut out = Vec::with_capacity(dataset.len() * d);
    for b in batch_iter(dataset, chunk.max(1), None)? {
        out.extend_from_slice(params.encode(&b.x)?.data());
    }
    Tensor::from_vec([dataset.len(), d], out)
}

/// Trains only the linear classifier on top of the frozen encoder with
/// cross-entropy and Adam. The projection head is not on the forward path.
pub fn finetune(dataset: &Dataset, checkpoint: &ModelParams<f32>, cfg: &FinetuneConfig, mut hooks: Hooks<'_>) -> Result<TrainOutput> {
    cfg.validate()?;
    check_dataset("finetune", dataset, &checkpoint.spec)?;
    if checkpoint.num_classes != dataset.num_classes() {
        return Err(Error::shape(
            "finetune",
            format!(
                "checkpoint classifier has {} classes, dataset has {}",
                checkpoint.num_classes,
                dataset.num_classes()
            ),
        ));
    }
    let mut params = checkpoint.clone();
    params.set_freeze(Scope::Encoder, true);
    params.set_freeze(Scope::Projection, true);
    params.set_freeze(Scope::Classifier, false);

    let emb = embed_dataset(&params, dataset, 256)?;
    let d = params.embedding_dim();
    let mut state = OptimizerState::adam(params.entries());
    let mut log = TrainLog::default();
    let lr = cfg.lr as f32;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, batch) in batch_iter(dataset, cfg.batch_size, Some(derive_seed(cfg.seed, SHUFFLE_TAG, epoch)))?.enumerate() {
            let rows: Vec<f32> = batch
                .indices
                .iter()
                .flat_map(|&i| emb.data()[i * d..(i + 1) * d].iter().copied())
                .collect();
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let e = tape.constant(Tensor::from_vec([batch.len(), d], rows)?);
            let logits = params.classify_on(&mut tape, &p, e)?;
            let loss = cross_entropy(&mut tape, logits, &batch.labels)?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(nonfinite("finetune", epoch, bi + 1, value));
            }
            let mut grads = tape.backward(loss)?;
            let g = collect_grads(&tape, &p, &mut grads);
            adam_step(params.entries_mut(), &g, &mut state, lr, &cfg.adam)?;
            loss_sum += value;
            batches += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            lr: cfg.lr,
            seconds: started.elapsed().as_secs_f64(),
            pgd_views: None,
            cw_views: None,
        };
        hooks.epoch_done(&rec);
        log.records.push(rec);
    }
    Ok(TrainOutput { params, log })
}

/// End-to-end cross-entropy training (the undefended baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub augment: AugmentPolicy,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub projection_dim: usize,
}

impl SupervisedConfig {
    /// Same optimizer, schedule, augmentation and budget as `cfg`.
    pub fn matching(cfg: &PretrainConfig) -> Self {
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr0: cfg.lr0,
            momentum: cfg.momentum,
            augment: cfg.augment,
            seed: cfg.seed,
            checkpoint_every: cfg.checkpoint_every,
            projection_dim: cfg.projection_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("baseline epochs and batch_size must be >= 1"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::invalid(format!("baseline lr0 must be > 0, got {}", self.lr0)));
        }
        self.augment.validate()
    }
}

pub fn train_supervised(
    dataset: &Dataset,
    spec: &EncoderSpec,
    cfg: &SupervisedConfig,
    mut hooks: Hooks<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    spec.validate()?;
    check_dataset("train_supervised", dataset, spec)?;
    let mut params = ModelParams::<f32>::init(spec, dataset.num_classes(), cfg.projection_dim, cfg.seed)?;
    params.set_freeze(Scope::Projection, true);
    let mut state = OptimizerState::sgd(params.entries());
    let total = train_steps_per_epoch(dataset.len(), cfg.batch_size) * cfg.epochs;
    let mut step = 0;
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, AUGMENT_TAG, epoch));
        let (mut loss_sum, mut batches, mut lr) = (0.0, 0, cfg.lr0);
        for (bi, idx) in train_batches(dataset, cfg.batch_size, derive_seed(cfg.seed, SHUFFLE_TAG, epoch))?.iter().enumerate() {
            let batch = dataset.batch(idx)?;
            let x = augment_batch(&batch.x, &cfg.augment, &mut rng)?;
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let e = params.encode_on(&mut tape, &p, xv, BnMode::Train)?;
            let logits = params.classify_on(&mut tape, &p, e)?;
            let loss = cross_entropy(&mut tape, logits, &batch.labels)?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(nonfinite("train_supervised", epoch, bi + 1, value));
            }
            let mut grads = tape.backward(loss)?;
            let g = collect_grads(&tape, &p, &mut grads);
            lr = cosine_lr(step, total, cfg.lr0)?;
            sgd_momentum_step(params.entries_mut(), &g, &mut state, lr as f32, cfg.momentum as f32)?;
            params.update_running_stats(tape.bn_stats(), BN_MOMENTUM as f32)?;
            step += 1;
            loss_sum += value;
            batches += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            pgd_views: None,
            cw_views: None,
        };
        hooks.epoch_done(&rec);
        log.records.push(rec);
        periodic_checkpoint(&hooks, cfg.checkpoint_every, epoch, cfg.epochs, "baseline", &params)?;
    }
    params.set_freeze(Scope::Projection, false);
    Ok(TrainOutput { params, log })
}
