use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use advclr::attack::{project_linf, run_attack, AttackConfig, AttackContext, AttackKind, ModelView, ObjectiveMode};
use advclr::data::{augment, augment_batch, batch_iter, synthetic, AugmentPolicy, Split, SyntheticConfig};
use advclr::losses::{adv_contrastive, info_nce, ContrastiveBatch, ViewTriple};
use advclr::model::{decode_checkpoint, encode_checkpoint, BnMode, Checkpoint, EncoderSpec, ModelParams};
use advclr::tensor::grad_check;
use advclr::train::{cosine_lr, EpochRecord, TrainLog};
use advclr::{Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

/// Values bounded away from zero so relu kinks are never within `H`.
fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.random_range(0.05..1.0);
        if r.random_bool(0.5) { m } else { -m }
    })
}

/// Distinct values spaced well apart in shuffled order, so every max is
/// strict by far more than `H`.
fn spaced(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    v.shuffle(&mut rng(seed));
    Tensor::from_vec(shape.to_vec(), v).unwrap()
}

/// `Σ w ⊙ y` with a fixed random `w`, turning any output into a scalar with
/// a generic gradient.
fn weighted(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(normal(tape.value(y).shape(), seed ^ 0xABCD));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut t = normal(&[n, d], seed);
    for i in 0..n {
        let row = &mut t.data_mut()[i * d..(i + 1) * d];
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= nrm);
    }
    t
}

fn nce_value(a: &Tensor<f64>, p: &Tensor<f64>, n: &Tensor<f64>, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let (a, p, n) = (tape.constant(a.clone()), tape.constant(p.clone()), tape.constant(n.clone()));
    let l = info_nce(
        &mut tape,
        &ContrastiveBatch {
            anchors: a,
            positives: p,
            negatives: n,
            negative_mask: None,
        },
        tau,
    )
    .unwrap();
    tape.value(l).item().unwrap()
}

fn adv_value(o: &Tensor<f64>, p: &Tensor<f64>, c: &Tensor<f64>, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let views = ViewTriple {
        z_orig: tape.constant(o.clone()),
        z_pgd: tape.constant(p.clone()),
        z_cw: tape.constant(c.clone()),
    };
    let l = adv_contrastive(&mut tape, views, tau).unwrap();
    tape.value(l).item().unwrap()
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = t.shape()[1];
    let data = perm.iter().flat_map(|&i| t.data()[i * d..(i + 1) * d].to_vec()).collect();
    Tensor::from_vec(t.shape().to_vec(), data).unwrap()
}

fn image_tensor(n: usize, s: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_fn([n, 3, s, s], |_| r.random_range(0.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops_match_finite_differences(r in 1usize..4, c in 1usize..5, seed in any::<u64>()) {
        let other = normal(&[r, c], seed.wrapping_add(1));
        let x = off_zero(&[r, c], seed);
        let ops: [(&str, fn(&mut Tape<f64>, Var, Var) -> Result<Var>); 6] = [
            ("add", |t, x, o| t.add(x, o)),
            ("sub_left", |t, x, o| t.sub(x, o)),
            ("sub_right", |t, x, o| t.sub(o, x)),
            ("mul", |t, x, o| t.mul(x, o)),
            ("scale_shift", |t, x, _| { let s = t.scale(x, -1.7); Ok(t.add_scalar(s, 0.3)) }),
            ("relu", |t, x, _| Ok(t.relu(x))),
        ];
        for (name, op) in ops {
            let err = grad_check(|t, x| { let o = t.constant(other.clone()); let y = op(t, x, o)?; weighted(t, y, seed) }, &x, H).unwrap();
            prop_assert!(err <= TOL, "{name}: {err}");
        }
    }

    #[test]
    fn matmul_and_layout_ops_match_finite_differences(m in 1usize..4, k in 1usize..5, n in 1usize..4, seed in any::<u64>()) {
        let a = normal(&[m, k], seed);
        let b = normal(&[k, n], seed.wrapping_add(7));
        let (bc, ac) = (b.clone(), a.clone());
        let left = grad_check(|t, x| { let b = t.constant(bc.clone()); let y = t.matmul(x, b)?; weighted(t, y, seed) }, &a, H).unwrap();
        let right = grad_check(|t, x| { let a = t.constant(ac.clone()); let y = t.matmul(a, x)?; weighted(t, y, seed) }, &b, H).unwrap();
        let tr = grad_check(|t, x| { let y = t.transpose(x)?; weighted(t, y, seed) }, &a, H).unwrap();
        let rs = grad_check(|t, x| { let y = t.reshape(x, &[m * k])?; weighted(t, y, seed) }, &a, H).unwrap();
        let mean = grad_check(|t, x| { let y = t.mean(x)?; Ok(t.scale(y, 2.0)) }, &a, H).unwrap();
        for (name, err) in [("matmul lhs", left), ("matmul rhs", right), ("transpose", tr), ("reshape", rs), ("mean", mean)] {
            prop_assert!(err <= TOL, "{name}: {err}");
        }
    }

    #[test]
    fn row_ops_match_finite_differences(r in 2usize..5, c in 1usize..5, seed in any::<u64>()) {
        let x = normal(&[r, c], seed);
        let split = r / 2;
        let other = normal(&[3, c], seed ^ 5);
        let concat = grad_check(|t, x| { let o = t.constant(other.clone()); let y = t.concat(&[o, x, o])?; weighted(t, y, seed) }, &x, H).unwrap();
        let slice = grad_check(|t, x| { let y = t.slice_rows(x, split, r)?; weighted(t, y, seed) }, &x, H).unwrap();
        let lsm = grad_check(|t, x| { let s = t.scale(x, 3.0); let y = t.log_softmax(s)?; weighted(t, y, seed) }, &x, H).unwrap();
        let norm = grad_check(|t, x| { let y = t.l2_normalize(x)?; weighted(t, y, seed) }, &x.map(|v| v + 0.5), H).unwrap();
        let mx = grad_check(|t, x| { let y = t.max_rows(x)?; weighted(t, y, seed) }, &spaced(&[r, c], seed), H).unwrap();
        for (name, err) in [("concat", concat), ("slice_rows", slice), ("log_softmax", lsm), ("l2_normalize", norm), ("max_rows", mx)] {
            prop_assert!(err <= TOL, "{name}: {err}");
        }
    }

    #[test]
    fn conv2d_matches_finite_differences(
        n in 1usize..3, cin in 1usize..3, cout in 1usize..3, hw in 3usize..6,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        let x = normal(&[n, cin, hw, hw], seed);
        let w = normal(&[cout, cin, k, k], seed ^ 9);
        let (xc, wc) = (x.clone(), w.clone());
        let dx = grad_check(|t, x| { let w = t.constant(wc.clone()); let y = t.conv2d(x, w, stride, pad)?; weighted(t, y, seed) }, &x, H).unwrap();
        let dw = grad_check(|t, w| { let x = t.constant(xc.clone()); let y = t.conv2d(x, w, stride, pad)?; weighted(t, y, seed) }, &w, H).unwrap();
        prop_assert!(dx <= TOL, "input: {dx}");
        prop_assert!(dw <= TOL, "kernel: {dw}");
    }

    #[test]
    fn pooling_matches_finite_differences(n in 1usize..3, c in 1usize..3, hw in 2usize..6, seed in any::<u64>()) {
        let x = spaced(&[n, c, hw, hw], seed);
        let mp = grad_check(|t, x| { let y = t.max_pool2(x)?; weighted(t, y, seed) }, &x, H).unwrap();
        let gp = grad_check(|t, x| { let y = t.global_avg_pool(x)?; weighted(t, y, seed) }, &normal(&[n, c, hw, hw], seed), H).unwrap();
        prop_assert!(mp <= TOL, "max_pool2: {mp}");
        prop_assert!(gp <= TOL, "global_avg_pool: {gp}");
    }

    #[test]
    fn channel_ops_match_finite_differences(n in 2usize..4, c in 1usize..4, hw in 1usize..4, spatial in any::<bool>(), seed in any::<u64>()) {
        let shape: Vec<usize> = if spatial { vec![n, c, hw, hw] } else { vec![n, c] };
        let x = normal(&shape, seed);
        let g = normal(&[c], seed ^ 3).map(|v| v + 1.5);
        let b = normal(&[c], seed ^ 4);
        let (xc, gc, bc) = (x.clone(), g.clone(), b.clone());
        let errs = [
            ("affine input", grad_check(|t, x| { let g = t.constant(gc.clone()); let b = t.constant(bc.clone()); let y = t.channel_affine(x, Some(g), b)?; weighted(t, y, seed) }, &x, H).unwrap()),
            ("affine scale", grad_check(|t, g| { let x = t.constant(xc.clone()); let b = t.constant(bc.clone()); let y = t.channel_affine(x, Some(g), b)?; weighted(t, y, seed) }, &g, H).unwrap()),
            ("bias", grad_check(|t, b| { let x = t.constant(xc.clone()); let y = t.add_bias(x, b)?; weighted(t, y, seed) }, &b, H).unwrap()),
            ("bn input", grad_check(|t, x| { let g = t.constant(gc.clone()); let b = t.constant(bc.clone()); let y = t.batch_norm(x, g, b, 1e-5)?; weighted(t, y, seed) }, &x, H).unwrap()),
            ("bn gamma", grad_check(|t, g| { let x = t.constant(xc.clone()); let b = t.constant(bc.clone()); let y = t.batch_norm(x, g, b, 1e-5)?; weighted(t, y, seed) }, &g, H).unwrap()),
            ("bn beta", grad_check(|t, b| { let x = t.constant(xc.clone()); let g = t.constant(gc.clone()); let y = t.batch_norm(x, g, b, 1e-5)?; weighted(t, y, seed) }, &b, H).unwrap()),
        ];
        for (name, err) in errs {
            prop_assert!(err <= TOL, "{name}: {err}");
        }
    }

    #[test]
    fn contrastive_losses_match_finite_differences(b in 2usize..4, d in 2usize..5, seed in any::<u64>()) {
        let p = unit_rows(b, d, seed ^ 1);
        let c = unit_rows(b, d, seed ^ 2);
        let raw = normal(&[b, d], seed ^ 3).map(|v| v + 0.2);
        let (pc, cc) = (p.clone(), c.clone());
        let err = grad_check(|t, x| {
            let z = t.l2_normalize(x)?;
            let views = ViewTriple { z_orig: z, z_pgd: t.constant(pc.clone()), z_cw: t.constant(cc.clone()) };
            adv_contrastive(t, views, 0.5)
        }, &raw, H).unwrap();
        prop_assert!(err <= TOL, "adv_contrastive: {err}");
    }

    #[test]
    fn l2_normalize_gives_unit_rows(r in 1usize..6, c in 1usize..8, seed in any::<u64>()) {
        let x = off_zero(&[r, c], seed);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.l2_normalize(v).unwrap();
        for i in 0..r {
            let n: f64 = tape.value(y).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn info_nce_is_positive_and_rewards_aligned_positives(b in 1usize..5, m in 1usize..6, d in 2usize..6, seed in any::<u64>()) {
        let a = unit_rows(b, d, seed);
        let p = unit_rows(b, d, seed ^ 1);
        let n = unit_rows(m, d, seed ^ 2);
        let base = nce_value(&a, &p, &n, 0.2);
        prop_assert!(base > 0.0);
        // Moving every positive onto its anchor can only lower the loss.
        let aligned = nce_value(&a, &a, &n, 0.2);
        prop_assert!(aligned <= base + 1e-12, "{aligned} > {base}");
        prop_assert!(aligned > 0.0);
    }

    #[test]
    fn adv_contrastive_symmetric_and_permutation_invariant(b in 2usize..5, d in 2usize..6, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let o = unit_rows(b, d, seed);
        let p = unit_rows(b, d, seed ^ 1);
        let c = unit_rows(b, d, seed ^ 2);
        let l = adv_value(&o, &p, &c, 0.3);
        prop_assert!(l > 0.0);
        let swapped = adv_value(&o, &c, &p, 0.3);
        prop_assert!((l - swapped).abs() < 1e-10);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng(seed));
        let permuted = adv_value(&permute_rows(&o, &perm), &permute_rows(&p, &perm), &permute_rows(&c, &perm), 0.3);
        prop_assert!((l - permuted).abs() < 1e-10);
    }

    #[test]
    fn projection_lands_in_ball_and_is_idempotent(n in 1usize..40, eps in 0.0f64..0.5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::from_fn([n], |_| r.random_range(0.0..1.0));
        let adv = Tensor::from_fn([n], |_| r.random_range(-1.0..2.0));
        let p = project_linf(&adv, &x, eps).unwrap();
        for (&v, &o) in p.data().iter().zip(x.data()) {
            prop_assert!((v - o).abs() <= eps + 1e-12 && (0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(project_linf(&p, &x, eps).unwrap(), p);
    }

    #[test]
    fn cosine_schedule_is_non_increasing(total in 1usize..500, lr0 in 1e-4f64..1.0) {
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, lr0).unwrap();
            prop_assert!(lr <= prev + 1e-15 && (0.0..=lr0 + 1e-15).contains(&lr));
            prev = lr;
        }
        prop_assert!((cosine_lr(0, total, lr0).unwrap() - lr0).abs() < 1e-15);
        prop_assert!(cosine_lr(total, total, lr0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn batches_cover_every_index_once(per_class in 1usize..12, bs in 1usize..17, seed in proptest::option::of(any::<u64>())) {
        let d = synthetic(&SyntheticConfig::new(2, per_class, 4, 1), Split::Train).unwrap();
        let it = batch_iter(&d, bs, seed).unwrap();
        let nb = it.num_batches();
        let mut seen = Vec::new();
        let mut count = 0;
        for b in it {
            prop_assert!(b.len() <= bs && !b.is_empty());
            for (k, &i) in b.indices.iter().enumerate() {
                prop_assert_eq!(b.labels[k], d.labels()[i]);
            }
            seen.extend(b.indices);
            count += 1;
        }
        prop_assert_eq!(count, nb);
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..d.len()).collect::<Vec<_>>());
    }

    #[test]
    fn augmentation_only_rearranges_pixels(pad in 0usize..4, flip in 0.0f64..=1.0, seed in any::<u64>()) {
        let d = synthetic(&SyntheticConfig::new(2, 3, 6, seed), Split::Train).unwrap();
        let policy = AugmentPolicy { enabled: true, crop_pad: pad, hflip_prob: flip };
        let mut r = rng(seed);
        for i in 0..d.len() {
            let img = d.get(i);
            let out = augment(&img, &policy, &mut r).unwrap();
            prop_assert_eq!(out.label, img.label);
            prop_assert_eq!(out.pixels.len(), img.pixels.len());
            // Every output pixel copies some input pixel of the same channel.
            let plane = 36;
            for c in 0..3 {
                let src = &img.pixels.data()[c * plane..(c + 1) * plane];
                for v in &out.pixels.data()[c * plane..(c + 1) * plane] {
                    prop_assert!(src.contains(v));
                }
            }
        }
        let x = d.as_batch().x;
        let y = augment_batch(&x, &policy, &mut r).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_roundtrip_is_lossless(seed in any::<u64>(), residual in any::<bool>(), frozen in any::<bool>()) {
        let spec = if residual { EncoderSpec::resnet_small([4, 6], 1, 8) } else { EncoderSpec::toy_conv([4, 6], 8) };
        let mut params = ModelParams::<f32>::init(&spec, 3, 5, seed).unwrap();
        params.set_freeze(advclr::model::Scope::Encoder, frozen);
        let mut metadata = BTreeMap::new();
        metadata.insert("stage".to_string(), format!("s{seed}"));
        let ck = Checkpoint { params, metadata };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn train_log_roundtrip(losses in prop::collection::vec(0.0f64..10.0, 1..8)) {
        let log = TrainLog {
            records: losses.iter().enumerate().map(|(i, &l)| EpochRecord {
                epoch: i + 1, loss: l, lr: 0.1 / (i + 1) as f64, seconds: 1.5, pgd_views: Some(4), cw_views: Some(4),
            }).collect(),
        };
        prop_assert_eq!(TrainLog::from_json_lines(&log.to_json_lines()).unwrap(), log);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn attacks_stay_in_budget_and_leave_parameters_alone(
        kind in prop::sample::select(vec![AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Cw]),
        eps in 0.0f32..0.1, steps in 1usize..4, random_start in any::<bool>(),
        train_bn in any::<bool>(), seed in any::<u64>(),
    ) {
        let params = ModelParams::<f32>::init(&EncoderSpec::toy_conv([4, 6], 8), 3, 5, seed).unwrap();
        let before = params.clone();
        let view = ModelView { params: &params, mode: if train_bn { BnMode::Train } else { BnMode::Eval } };
        let x = image_tensor(4, 8, seed);
        let labels = [0usize, 1, 2, 1];
        let cfg = AttackConfig { num_steps: steps, random_start: random_start && kind != AttackKind::Fgsm, step_size: eps / 2.0, ..AttackConfig::for_kind(kind, eps) };
        let out = run_attack(&view, &x, &cfg, &AttackContext::supervised(&labels), &mut rng(seed)).unwrap();
        prop_assert_eq!(out.shape(), x.shape());
        for (&a, &o) in out.data().iter().zip(x.data()) {
            prop_assert!((a - o).abs() <= eps + 1e-6, "{a} vs {o}");
            prop_assert!((0.0..=1.0).contains(&a));
        }
        prop_assert_eq!(&params, &before);

        // Embedding objectives obey the same budget.
        let z = params.project(&params.encode(&x).unwrap()).unwrap();
        let objective = if kind == AttackKind::Cw { ObjectiveMode::EmbeddingMargin } else { ObjectiveMode::Contrastive };
        let ecfg = AttackConfig { objective, ..cfg };
        let out = run_attack(&view, &x, &ecfg, &AttackContext::embedding(&z, 0.1), &mut rng(seed)).unwrap();
        for (&a, &o) in out.data().iter().zip(x.data()) {
            prop_assert!((a - o).abs() <= eps + 1e-6 && (0.0..=1.0).contains(&a));
        }
    }
}
