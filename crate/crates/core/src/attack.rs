//! White-box L∞ attacks: FGSM, PGD and a CW-margin variant of PGD.
//!
//! Every attack ascends a scalar objective w.r.t. the input, moves by the
//! sign of the input gradient (`sign(0) = 0`) and projects back onto the
//! intersection of the ε-ball around the clean input and the pixel range
//! `[0, 1]`. Model parameters are only read.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cross_entropy_per_sample, one_hot};
use crate::model::{BnMode, ModelParams};
use crate::tensor::{Element, Tape, Tensor, Var};

const MASKED: f64 = -1.0e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Cw,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fgsm" => Some(AttackKind::Fgsm),
            "pgd" => Some(AttackKind::Pgd),
            "cw" => Some(AttackKind::Cw),
            _ => None,
        }
    }
}

/// What an attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Cross-entropy of the logits against the true label.
    SupervisedCe,
    /// Carlini–Wagner logit margin `min(max_{j≠y} Z_j − Z_y, κ)`.
    SupervisedMargin,
    /// Negated cosine between the perturbed and the reference projection.
    EmbeddingRepel,
    /// Margin form in embedding space:
    /// `min(max_{j≠i} cos(z_i, r_j) − cos(z_i, r_i), κ)`.
    EmbeddingMargin,
    /// InfoNCE with the perturbed projection as anchor, its own reference
    /// as positive and the other references as negatives.
    Contrastive,
}

impl ObjectiveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveMode::SupervisedCe => "supervised_ce",
            ObjectiveMode::SupervisedMargin => "supervised_margin",
            ObjectiveMode::EmbeddingRepel => "embedding_repel",
            ObjectiveMode::EmbeddingMargin => "embedding_margin",
            ObjectiveMode::Contrastive => "contrastive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ObjectiveMode::SupervisedCe,
            ObjectiveMode::SupervisedMargin,
            ObjectiveMode::EmbeddingRepel,
            ObjectiveMode::EmbeddingMargin,
            ObjectiveMode::Contrastive,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, ObjectiveMode::SupervisedCe | ObjectiveMode::SupervisedMargin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ budget in pixel units.
    pub epsilon: f32,
    /// Per-iteration step in pixel units; FGSM always steps by ε.
    pub step_size: f32,
    pub num_steps: usize,
    pub random_start: bool,
    pub objective: ObjectiveMode,
    pub kappa: f32,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f32) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            step_size: epsilon,
            num_steps: 1,
            random_start: false,
            objective: ObjectiveMode::SupervisedCe,
            kappa: 0.0,
        }
    }

    /// 10 steps of ε/4 from a uniform random start.
    pub fn pgd(epsilon: f32) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            step_size: epsilon / 4.0,
            num_steps: 10,
            random_start: true,
            objective: ObjectiveMode::SupervisedCe,
            kappa: 0.0,
        }
    }

    /// 10 steps of ε/4 on the logit margin, κ = 0.
    pub fn cw(epsilon: f32) -> Self {
        Self {
            kind: AttackKind::Cw,
            epsilon,
            step_size: epsilon / 4.0,
            num_steps: 10,
            random_start: false,
            objective: ObjectiveMode::SupervisedMargin,
            kappa: 0.0,
        }
    }

    /// Evaluation default for `kind` at budget `epsilon`.
    pub fn for_kind(kind: AttackKind, epsilon: f32) -> Self {
        match kind {
            AttackKind::Fgsm => Self::fgsm(epsilon),
            AttackKind::Pgd => Self::pgd(epsilon),
            AttackKind::Cw => Self::cw(epsilon),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.num_steps == 0 {
            return Err(Error::invalid("num_steps must be >= 1"));
        }
        if self.kind != AttackKind::Fgsm && !(self.step_size > 0.0) {
            return Err(Error::invalid(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::invalid(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        Ok(())
    }
}

/// Labels and/or reference embeddings an objective needs.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a, T = f32> {
    pub labels: Option<&'a [usize]>,
    /// (B, D) unit-norm projections of the clean inputs.
    pub reference: Option<&'a Tensor<T>>,
    pub temperature: T,
}

impl<'a, T: Element> AttackContext<'a, T> {
    pub fn supervised(labels: &'a [usize]) -> Self {
        Self {
            labels: Some(labels),
            reference: None,
            temperature: T::of(crate::losses::DEFAULT_TEMPERATURE),
        }
    }

    pub fn embedding(reference: &'a Tensor<T>, temperature: T) -> Self {
        Self {
            labels: None,
            reference: Some(reference),
            temperature,
        }
    }
}

/// Differentiable forward passes an attack may ascend through.
pub trait AttackModel<T: Element> {
    fn logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
    fn projection(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

/// A model used with a fixed batch-norm mode.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a, T = f32> {
    pub params: &'a ModelParams<T>,
    pub mode: BnMode,
}

impl<'a, T: Element> ModelView<'a, T> {
    pub fn eval(params: &'a ModelParams<T>) -> Self {
        Self {
            params,
            mode: BnMode::Eval,
        }
    }
}

impl<T: Element> AttackModel<T> for ModelView<'_, T> {
    fn logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let p = self.params.bind(tape, false);
        let e = self.params.encode_on(tape, &p, x, self.mode)?;
        self.params.classify_on(tape, &p, e)
    }

    fn projection(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let p = self.params.bind(tape, false);
        let e = self.params.encode_on(tape, &p, x, self.mode)?;
        self.params.project_on(tape, &p, e, self.mode)
    }
}

fn row_sums<T: Element>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    let cols = tape.value(m).shape()[1];
    let ones = tape.constant(Tensor::ones([cols, 1]));
    tape.matmul(m, ones)
}

/// `min(other − own, κ)` per row, written as `κ − relu(own − other + κ)`.
fn margin<T: Element>(tape: &mut Tape<T>, own: Var, other: Var, kappa: T) -> Result<Var> {
    let d = tape.sub(own, other)?;
    let d = tape.add_scalar(d, kappa);
    let r = tape.relu(d);
    let neg = tape.scale(r, -T::one());
    Ok(tape.add_scalar(neg, kappa))
}

/// Records the objective for input `x` on `tape`; returns `(total, per_sample)`
/// where `per_sample` has shape (B, 1) and `total` is its sum.
pub fn objective_on<T: Element, M: AttackModel<T> + ?Sized>(
    model: &M,
    tape: &mut Tape<T>,
    x: Var,
    mode: ObjectiveMode,
    kappa: T,
    ctx: &AttackContext<'_, T>,
) -> Result<(Var, Var)> {
    let batch = tape.value(x).shape().first().copied().unwrap_or(0);
    let per = match mode {
        ObjectiveMode::SupervisedCe | ObjectiveMode::SupervisedMargin => {
            let labels = ctx
                .labels
                .ok_or_else(|| Error::invalid(format!("{} objective needs labels", mode.as_str())))?;
            if labels.len() != batch {
                return Err(Error::shape("attack_objective", format!("{} labels for {batch} inputs", labels.len())));
            }
            let logits = model.logits(tape, x)?;
            if mode == ObjectiveMode::SupervisedCe {
                cross_entropy_per_sample(tape, logits, labels)?
            } else {
                let classes = tape.value(logits).shape()[1];
                let oh = one_hot::<T>(labels, classes)?;
                let blocked = oh.map(|v| v * T::of(MASKED));
                let oh = tape.constant(oh);
                let picked = tape.mul(logits, oh)?;
                let own = row_sums(tape, picked)?;
                let blocked = tape.constant(blocked);
                let others = tape.add(logits, blocked)?;
                let other = tape.max_rows(others)?;
                margin(tape, own, other, kappa)?
            }
        }
        ObjectiveMode::EmbeddingRepel | ObjectiveMode::EmbeddingMargin | ObjectiveMode::Contrastive => {
            let reference = ctx
                .reference
                .ok_or_else(|| Error::invalid(format!("{} objective needs reference embeddings", mode.as_str())))?;
            let z = model.projection(tape, x)?;
            if tape.value(z).shape() != reference.shape() {
                return Err(Error::shape(
                    "attack_objective",
                    format!("projection {:?} vs reference {:?}", tape.value(z).shape(), reference.shape()),
                ));
            }
            // Margin and contrastive forms need at least one other sample.
            let mode = if batch < 2 { ObjectiveMode::EmbeddingRepel } else { mode };
            match mode {
                ObjectiveMode::EmbeddingRepel => {
                    let r = tape.constant(reference.clone());
                    let prod = tape.mul(z, r)?;
                    let cos = row_sums(tape, prod)?;
                    tape.scale(cos, -T::one())
                }
                ObjectiveMode::EmbeddingMargin => {
                    let rt = tape.constant(transpose(reference));
                    let sims = tape.matmul(z, rt)?;
                    let eye = Tensor::<T>::eye(batch);
                    let blocked = tape.constant(eye.map(|v| v * T::of(MASKED)));
                    let eye = tape.constant(eye);
                    let diag = tape.mul(sims, eye)?;
                    let own = row_sums(tape, diag)?;
                    let others = tape.add(sims, blocked)?;
                    let other = tape.max_rows(others)?;
                    margin(tape, own, other, kappa)?
                }
                _ => {
                    if !(ctx.temperature > T::zero()) {
                        return Err(Error::invalid("contrastive objective needs a positive temperature"));
                    }
                    let rt = tape.constant(transpose(reference));
                    let sims = tape.matmul(z, rt)?;
                    let logits = tape.scale(sims, T::one() / ctx.temperature);
                    let logp = tape.log_softmax(logits)?;
                    let eye = tape.constant(Tensor::eye(batch));
                    let diag = tape.mul(logp, eye)?;
                    let own = row_sums(tape, diag)?;
                    tape.scale(own, -T::one())
                }
            }
        }
    };
    let total = tape.sum(per);
    Ok((total, per))
}

fn transpose<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn([c, r], |k| t.data()[(k % r) * c + k / r])
}

/// Scalar objective value at `x` (the quantity attacks ascend).
pub fn attack_objective<T: Element, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    mode: ObjectiveMode,
    kappa: T,
    ctx: &AttackContext<'_, T>,
) -> Result<T> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (total, _) = objective_on(model, &mut tape, xv, mode, kappa, ctx)?;
    tape.value(total).item()
}

/// Objective value per sample and gradient w.r.t. the input.
fn value_and_grad<T: Element, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    cfg: &AttackConfig,
    ctx: &AttackContext<'_, T>,
) -> Result<(Vec<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let (total, per) = objective_on(model, &mut tape, xv, cfg.objective, T::of(cfg.kappa as f64), ctx)?;
    let value = tape.value(total).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{} attack objective is {value}", cfg.kind.as_str())));
    }
    let mut grads = tape.backward(total)?;
    let g = grads.take(xv).expect("input is a gradient leaf");
    if !g.all_finite() {
        return Err(Error::NonFinite(format!("{} attack produced a non-finite input gradient", cfg.kind.as_str())));
    }
    Ok((tape.value(per).data().to_vec(), g))
}

fn per_sample_values<T: Element, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    cfg: &AttackConfig,
    ctx: &AttackContext<'_, T>,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (_, per) = objective_on(model, &mut tape, xv, cfg.objective, T::of(cfg.kappa as f64), ctx)?;
    Ok(tape.value(per).data().to_vec())
}

fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Elementwise `clamp(x_adv, x_ref − ε, x_ref + ε)` followed by `clamp(·, 0, 1)`.
pub fn project_linf<T: Element>(x_adv: &Tensor<T>, x_ref: &Tensor<T>, epsilon: T) -> Result<Tensor<T>> {
    x_adv.zip_map(x_ref, |a, r| {
        let v = a.max(r - epsilon).min(r + epsilon);
        v.max(T::zero()).min(T::one())
    })
}

fn step<T: Element>(x: &Tensor<T>, grad: &Tensor<T>, size: T) -> Result<Tensor<T>> {
    x.zip_map(grad, |v, g| v + size * sign(g))
}

fn check_kind(cfg: &AttackConfig, want: AttackKind) -> Result<()> {
    cfg.validate()?;
    if cfg.kind != want {
        return Err(Error::invalid(format!(
            "{} called with a {} config",
            want.as_str(),
            cfg.kind.as_str()
        )));
    }
    Ok(())
}

/// `clip₀₁(x + ε · sign(∇ₓ objective))`.
pub fn fgsm<T: Element, M: AttackModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    cfg: &AttackConfig,
    ctx: &AttackContext<'_, T>,
) -> Result<Tensor<T>> {
    check_kind(cfg, AttackKind::Fgsm)?;
    let eps = T::of(cfg.epsilon as f64);
    let (_, g) = value_and_grad(model, x, cfg, ctx)?;
    let stepped = step(x, &g, eps)?;
    project_linf(&stepped, x, eps)
}

/// Projected sign-gradient ascent. Returns, per sample, the iterate with the
/// highest objective among the iterates produced by the steps.
pub fn pgd<T: Element, M: AttackModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    cfg: &AttackConfig,
    ctx: &AttackContext<'_, T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_kind(cfg, AttackKind::Pgd)?;
    iterate(model, x, cfg, ctx, rng)
}

/// Projected sign-gradient ascent on a margin objective (the logit margin
/// for evaluation, the embedding margin during pretraining).
pub fn cw<T: Element, M: AttackModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    cfg: &AttackConfig,
    ctx: &AttackContext<'_, T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_kind(cfg, AttackKind::Cw)?;
    iterate(model, x, cfg, ctx, rng)
}

/// Runs whichever attack `cfg.kind` names.
pub fn run_attack<T: Element, M: AttackModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    cfg: &AttackConfig,
    ctx: &AttackContext<'_, T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, cfg, ctx),
        AttackKind::Pgd => pgd(model, x, cfg, ctx, rng),
        AttackKind::Cw => cw(model, x, cfg, ctx, rng),
    }
}

fn iterate<T: Element, M: AttackModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    cfg: &AttackConfig,
    ctx: &AttackContext<'_, T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let eps = T::of(cfg.epsilon as f64);
    let alpha = T::of(cfg.step_size as f64);
    let batch = x.shape().first().copied().unwrap_or(0);
    if batch == 0 {
        return Ok(x.clone());
    }
    let per = x.len() / batch;

    let mut cur = if cfg.random_start && eps > T::zero() {
        let noise = Tensor::from_fn(x.shape().to_vec(), |_| T::of(rng.random_range(-1.0..=1.0f64)) * eps);
        let start = x.zip_map(&noise, |a, b| a + b)?;
        project_linf(&start, x, eps)?
    } else {
        x.clone()
    };

    let mut best = x.clone();
    let mut best_val = vec![T::neg_infinity(); batch];
    let mut keep = |cand: &Tensor<T>, vals: &[T], best: &mut Tensor<T>| {
        for (i, &v) in vals.iter().enumerate() {
            if v > best_val[i] || best_val[i] == T::neg_infinity() {
                best_val[i] = v;
                best.data_mut()[i * per..(i + 1) * per].copy_from_slice(&cand.data()[i * per..(i + 1) * per]);
            }
        }
    };

    for t in 0..cfg.num_steps {
        let (vals, g) = value_and_grad(model, &cur, cfg, ctx)?;
        if t > 0 {
            keep(&cur, &vals, &mut best);
        }
        cur = project_linf(&step(&cur, &g, alpha)?, x, eps)?;
    }
    let vals = per_sample_values(model, &cur, cfg, ctx)?;
    keep(&cur, &vals, &mut best);
    Ok(best)
}
