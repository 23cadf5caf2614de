//! Similarity and loss functions recorded on the tape.
//!
//! Contrastive losses take unit-norm embedding rows. Negatives are in-batch:
//! for anchor `i`, every view of every other image `j != i`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Large negative logit used to exclude entries from a softmax.
const MASKED: f64 = -1.0e30;

const UNIT_TOLERANCE: f64 = 1e-5;

/// Cosine similarity of two nonzero vectors.
pub fn cosine_sim<T: Element>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", format!("lengths {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(na > T::zero() && nb > T::zero()) {
        return Err(Error::invalid("cosine_sim of a zero vector"));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

fn check_temperature<T: Element>(tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_unit_rows<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.ndim() != 2 {
        return Err(Error::shape(op, format!("expected (B,D) embeddings, got {:?}", t.shape())));
    }
    for i in 0..t.shape()[0] {
        let n = t.row(i).iter().map(|&v| v * v).sum::<T>().sqrt().as_f64();
        // Zero rows come from normalizing a dead embedding; they have zero
        // similarity to everything.
        if (n - 1.0).abs() > UNIT_TOLERANCE && n > UNIT_TOLERANCE {
            return Err(Error::invalid(format!("{op}: row {i} has norm {n}, expected unit or zero rows")));
        }
    }
    Ok(())
}

/// InfoNCE over an explicit key set.
///
/// For anchor `i` the softmax runs over keys `j` with `allowed[i * M + j]`,
/// and `positive[i]` names the key treated as the positive (it must be
/// allowed). Returns the mean over anchors of `-log p(positive)`.
pub fn masked_info_nce<T: Element>(
    tape: &mut Tape<T>,
    anchors: Var,
    keys: Var,
    positive: &[usize],
    allowed: &[bool],
    tau: T,
) -> Result<Var> {
    check_temperature(tau)?;
    check_unit_rows("info_nce", tape.value(anchors))?;
    check_unit_rows("info_nce", tape.value(keys))?;
    let (b, m) = (tape.value(anchors).shape()[0], tape.value(keys).shape()[0]);
    if b == 0 {
        return Err(Error::shape("info_nce", "empty anchor set"));
    }
    if positive.len() != b || allowed.len() != b * m {
        return Err(Error::shape(
            "info_nce",
            format!("{b} anchors, {m} keys, {} positives, mask of {}", positive.len(), allowed.len()),
        ));
    }
    let mut mask = Tensor::zeros([b, m]);
    let mut pick = Tensor::zeros([b, m]);
    for i in 0..b {
        let p = positive[i];
        if p >= m || !allowed[i * m + p] {
            return Err(Error::invalid(format!("info_nce: positive {p} for anchor {i} is not an allowed key")));
        }
        pick.data_mut()[i * m + p] = T::one();
        for j in 0..m {
            if !allowed[i * m + j] {
                mask.data_mut()[i * m + j] = T::of(MASKED);
            }
        }
    }
    let kt = tape.transpose(keys)?;
    let sims = tape.matmul(anchors, kt)?;
    let logits = tape.scale(sims, T::one() / tau);
    let mask = tape.constant(mask);
    let logits = tape.add(logits, mask)?;
    let logp = tape.log_softmax(logits)?;
    let pick = tape.constant(pick);
    let picked = tape.mul(logp, pick)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -T::one() / T::of(b as f64)))
}

/// One positive per anchor against a shared set of negatives.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// (B, D) unit rows.
    pub anchors: Var,
    /// (B, D) unit rows; row `i` is the positive of anchor `i`.
    pub positives: Var,
    /// (M, D) unit rows.
    pub negatives: Var,
    /// Optional (B × M) mask of which negatives count for each anchor; all
    /// of them when absent.
    pub negative_mask: Option<Vec<bool>>,
}

/// InfoNCE: mean over anchors of
/// `-log(exp(s⁺/τ) / (exp(s⁺/τ) + Σ_j exp(s⁻_j/τ)))` with cosine similarities.
pub fn info_nce<T: Element>(tape: &mut Tape<T>, batch: &ContrastiveBatch, tau: T) -> Result<Var> {
    let b = tape.value(batch.anchors).shape().first().copied().unwrap_or(0);
    let pb = tape.value(batch.positives).shape().first().copied().unwrap_or(0);
    if b != pb {
        return Err(Error::shape("info_nce", format!("{b} anchors but {pb} positives")));
    }
    let m = tape.value(batch.negatives).shape().first().copied().unwrap_or(0);
    if let Some(mask) = &batch.negative_mask {
        if mask.len() != b * m {
            return Err(Error::shape("info_nce", format!("negative mask of {} for {b}x{m}", mask.len())));
        }
    }
    let keys = tape.concat(&[batch.positives, batch.negatives])?;
    let width = b + m;
    let mut allowed = vec![false; b * width];
    for i in 0..b {
        allowed[i * width + i] = true;
        for j in 0..m {
            allowed[i * width + b + j] = batch.negative_mask.as_ref().is_none_or(|mk| mk[i * m + j]);
        }
    }
    let positive: Vec<usize> = (0..b).collect();
    masked_info_nce(tape, batch.anchors, keys, &positive, &allowed, tau)
}

/// Projections of the clean, PGD-perturbed and CW-perturbed view of each
/// image in a batch.
#[derive(Debug, Clone, Copy)]
pub struct ViewTriple {
    pub z_orig: Var,
    pub z_pgd: Var,
    pub z_cw: Var,
}

/// Average of two InfoNCE terms anchored at the clean view: one with the PGD
/// view as positive, one with the CW view as positive. Negatives are all
/// three views of every other image in the batch.
pub fn adv_contrastive<T: Element>(tape: &mut Tape<T>, views: ViewTriple, tau: T) -> Result<Var> {
    let b = tape.value(views.z_orig).shape().first().copied().unwrap_or(0);
    for v in [views.z_pgd, views.z_cw] {
        if tape.value(v).shape() != tape.value(views.z_orig).shape() {
            return Err(Error::shape(
                "adv_contrastive",
                format!("{:?} vs {:?}", tape.value(views.z_orig).shape(), tape.value(v).shape()),
            ));
        }
    }
    let keys = tape.concat(&[views.z_orig, views.z_pgd, views.z_cw])?;
    let m = 3 * b;
    let mut terms = Vec::with_capacity(2);
    for view in [1, 2] {
        let mut allowed = vec![false; b * m];
        for i in 0..b {
            for u in 0..3 {
                for j in 0..b {
                    allowed[i * m + u * b + j] = j != i;
                }
            }
            allowed[i * m + view * b + i] = true;
        }
        let positive: Vec<usize> = (0..b).map(|i| view * b + i).collect();
        terms.push(masked_info_nce(tape, views.z_orig, keys, &positive, &allowed, tau)?);
    }
    let total = tape.add(terms[0], terms[1])?;
    Ok(tape.scale(total, T::of(0.5)))
}

pub(crate) fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros([labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + y] = T::one();
    }
    Ok(t)
}

/// Per-sample `-log softmax(logits)[label]`, shape (B, 1).
pub fn cross_entropy_per_sample<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
    }
    let onehot = one_hot::<T>(labels, s[1])?;
    let logp = tape.log_softmax(logits)?;
    let onehot = tape.constant(onehot);
    let picked = tape.mul(logp, onehot)?;
    let ones = tape.constant(Tensor::ones([s[1], 1]));
    let rows = tape.matmul(picked, ones)?;
    Ok(tape.scale(rows, -T::one()))
}

/// Mean cross-entropy of `logits` (B, C) against integer labels.
pub fn cross_entropy<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::shape("cross_entropy", "empty batch"));
    }
    let per = cross_entropy_per_sample(tape, logits, labels)?;
    tape.mean(per)
}
