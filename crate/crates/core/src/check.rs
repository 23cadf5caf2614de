//! Finite-difference verification of whole-model gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{cross_entropy, info_nce, ContrastiveBatch};
use crate::model::{BnMode, BoundParams, EncoderSpec, ModelParams};
use crate::tensor::{max_relative_error, Tape, Tensor, Var};

/// Largest relative error over the coordinates of one array.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArrayCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
}

/// Loss exercising every head: cross-entropy on the classifier plus
/// InfoNCE between the projections of the first and second half of `x`.
fn check_loss(params: &ModelParams<f64>, tape: &mut Tape<f64>, p: &BoundParams, x: Var, labels: &[usize]) -> Result<Var> {
    let n = labels.len();
    let e = params.encode_on(tape, p, x, BnMode::Train)?;
    let logits = params.classify_on(tape, p, e)?;
    let ce = cross_entropy(tape, logits, labels)?;
    let z = params.project_on(tape, p, e, BnMode::Train)?;
    let half = n / 2;
    let anchors = tape.slice_rows(z, 0, half)?;
    let keys = tape.slice_rows(z, half, 2 * half)?;
    let mask = (0..half * half).map(|k| k / half != k % half).collect();
    let nce = info_nce(
        tape,
        &ContrastiveBatch {
            anchors,
            positives: keys,
            negatives: keys,
            negative_mask: Some(mask),
        },
        0.5,
    )?;
    tape.add(ce, nce)
}

fn loss_value(params: &ModelParams<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let l = check_loss(params, &mut tape, &p, xv, labels)?;
    let v = tape.value(l).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("gradient check loss is {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of every trainable array and of the input with
/// central differences of step `h`. `labels.len()` must be even.
pub fn model_grad_check(params: &ModelParams<f64>, x: &Tensor<f64>, labels: &[usize], h: f64) -> Result<Vec<ArrayCheck>> {
    if labels.len() < 2 || labels.len() % 2 != 0 {
        return Err(Error::invalid("model_grad_check needs an even batch of at least 2"));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let xv = tape.leaf(x.clone(), true);
    let loss = check_loss(params, &mut tape, &p, xv, labels)?;
    let grads = tape.backward(loss)?;

    let mut out = Vec::new();
    let mut probe = params.clone();
    for (k, &v) in p.vars().iter().enumerate() {
        if !tape.requires_grad(v) {
            continue;
        }
        let analytic = grads.get(v).expect("trainable leaf has a gradient").clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.entries()[k].value.data()[i];
            probe.entries_mut()[k].value.data_mut()[i] = orig + h;
            let up = loss_value(&probe, x, labels)?;
            probe.entries_mut()[k].value.data_mut()[i] = orig - h;
            let down = loss_value(&probe, x, labels)?;
            probe.entries_mut()[k].value.data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        out.push(ArrayCheck {
            name: params.entries()[k].name.clone(),
            len: numeric.len(),
            max_rel_err: max_relative_error(analytic.data(), &numeric),
        });
    }

    let analytic = grads.get(xv).expect("input is a gradient leaf").clone();
    let mut numeric = vec![0.0; x.len()];
    let mut xp = x.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let up = loss_value(params, &xp, labels)?;
        xp.data_mut()[i] = orig - h;
        let down = loss_value(params, &xp, labels)?;
        xp.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    out.push(ArrayCheck {
        name: "input".into(),
        len: numeric.len(),
        max_rel_err: max_relative_error(analytic.data(), &numeric),
    });
    Ok(out)
}

/// A small random float64 network (toy or residual encoder plus heads)
/// with random inputs and labels, for gradient checking.
pub fn random_check_case(seed: u64, residual: bool) -> Result<(ModelParams<f64>, Tensor<f64>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 8;
    let spec = if residual {
        EncoderSpec::resnet_small([4, 6], 1, size)
    } else {
        EncoderSpec::toy_conv([4, 6, 8], size)
    };
    let classes = 3;
    let mut params = ModelParams::<f64>::init(&spec, classes, 8, rng.random())?;
    // Perturb every parameter so biases and norm scales are not at their
    // symmetric initial values.
    for e in params.entries_mut() {
        if !e.buffer {
            for v in e.value.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }
    let n = 4;
    let x = Tensor::from_fn([n, 3, size, size], |_| rng.random_range(0.0..1.0));
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Ok((params, x, labels))
}
