use advclr::attack::ModelView;
use advclr::data::{synthetic, AugmentPolicy, Dataset, Split, SyntheticConfig};
use advclr::eval::clean_accuracy;
use advclr::model::{encode_checkpoint, EncoderSpec, ModelParams, Scope};
use advclr::train::{act_pretrain, finetune, train_supervised, FinetuneConfig, Hooks, PretrainConfig, SupervisedConfig};

fn small_data(seed: u64) -> (Dataset, Dataset) {
    let train = synthetic(&SyntheticConfig::new(4, 16, 8, seed), Split::Train).unwrap();
    let test = synthetic(&SyntheticConfig::new(4, 16, 8, seed + 5000), Split::Test).unwrap();
    (train, test)
}

/// Enough images per class for a linear probe to be meaningful.
fn probe_data(seed: u64) -> (Dataset, Dataset) {
    let train = synthetic(&SyntheticConfig::new(4, 64, 8, seed), Split::Train).unwrap();
    let test = synthetic(&SyntheticConfig::new(4, 16, 8, seed + 5000), Split::Test).unwrap();
    (train, test)
}

fn spec() -> EncoderSpec {
    EncoderSpec::toy_conv([8, 16], 8)
}

fn small_pretrain(epochs: usize, seed: u64) -> PretrainConfig {
    let mut cfg = PretrainConfig::new(epochs, seed);
    cfg.batch_size = 32;
    cfg.lr0 = 0.05;
    cfg.projection_dim = 16;
    cfg.augment = AugmentPolicy { enabled: true, crop_pad: 1, hflip_prob: 0.5 };
    for a in [&mut cfg.pgd, &mut cfg.cw] {
        a.num_steps = 3;
    }
    cfg
}

#[test]
fn pretraining_is_deterministic() {
    let (train, _) = small_data(0);
    let cfg = small_pretrain(2, 11);
    let a = act_pretrain(&train, &spec(), &cfg, Hooks::default()).unwrap();
    let b = act_pretrain(&train, &spec(), &cfg, Hooks::default()).unwrap();
    assert_eq!(
        encode_checkpoint(&a.checkpoint("pretrain")).unwrap(),
        encode_checkpoint(&b.checkpoint("pretrain")).unwrap()
    );
    assert_eq!(a.log.without_timing(), b.log.without_timing());

    let c = act_pretrain(&train, &spec(), &small_pretrain(2, 12), Hooks::default()).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn pretraining_loss_goes_down() {
    let (train, _) = small_data(1);
    let mut cfg = small_pretrain(5, 1);
    cfg.augment = AugmentPolicy::disabled();
    let out = act_pretrain(&train, &spec(), &cfg, Hooks::default()).unwrap();
    let losses: Vec<f64> = out.log.records.iter().map(|r| r.loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
    assert!(losses[4] < losses[0], "{losses:?}");
    // Every batch produced both adversarial views.
    for r in &out.log.records {
        assert_eq!(r.pgd_views, Some(train.len()));
        assert_eq!(r.cw_views, Some(train.len()));
    }
}

#[test]
fn pretraining_leaves_classifier_untouched_and_writes_periodic_checkpoints() {
    let (train, _) = small_data(2);
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_pretrain(3, 5);
    cfg.checkpoint_every = 1;
    let init = ModelParams::<f32>::init(&spec(), train.num_classes(), cfg.projection_dim, cfg.seed).unwrap();
    let mut seen = Vec::new();
    let mut cb = |r: &advclr::train::EpochRecord| seen.push(r.epoch);
    let out = act_pretrain(&train, &spec(), &cfg, Hooks { checkpoint_dir: Some(tmp.path()), on_epoch: Some(&mut cb) }).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert!(tmp.path().join("pretrain_epoch001.ckpt").exists());
    assert!(tmp.path().join("pretrain_epoch002.ckpt").exists());
    // The final weights are the caller's to save.
    assert!(!tmp.path().join("pretrain_epoch003.ckpt").exists());
    assert_eq!(out.params.scope_values(Scope::Classifier), init.scope_values(Scope::Classifier));
    assert_ne!(out.params.scope_values(Scope::Encoder), init.scope_values(Scope::Encoder));
}

#[test]
fn finetune_trains_only_the_classifier() {
    let (train, test) = probe_data(3);
    let pre = act_pretrain(&train, &spec(), &probe_pretrain(3), Hooks::default()).unwrap();
    let out = finetune(&train, &pre.params, &probe_finetune(3), Hooks::default()).unwrap();
    for scope in [Scope::Encoder, Scope::Projection] {
        let (a, b) = (pre.params.scope_values(scope), out.params.scope_values(scope));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{scope:?} changed");
    }
    // Running statistics are part of the frozen backbone too.
    for (e, f) in pre.params.entries().iter().zip(out.params.entries()) {
        if e.buffer {
            assert_eq!(e.value, f.value, "{}", e.name);
        }
    }
    assert_ne!(out.params.scope_values(Scope::Classifier), pre.params.scope_values(Scope::Classifier));
    let acc = clean_accuracy(&ModelView::eval(&out.params), &test).unwrap();
    assert!(acc >= 0.8, "probe accuracy {acc}");
}

fn probe_pretrain(seed: u64) -> PretrainConfig {
    let mut cfg = small_pretrain(10, seed);
    cfg.batch_size = 16;
    cfg
}

fn probe_finetune(seed: u64) -> FinetuneConfig {
    let mut ft = FinetuneConfig::new(30, seed);
    ft.lr = 1e-2;
    ft
}

#[test]
fn pretrained_probe_beats_random_encoder_probe() {
    for seed in [1, 2] {
        let (train, test) = probe_data(seed);
        let cfg = probe_pretrain(seed);
        let pre = act_pretrain(&train, &spec(), &cfg, Hooks::default()).unwrap();
        let random = ModelParams::<f32>::init(&spec(), train.num_classes(), cfg.projection_dim, seed).unwrap();
        let acc = |p: &ModelParams<f32>| {
            let out = finetune(&train, p, &probe_finetune(seed), Hooks::default()).unwrap();
            clean_accuracy(&ModelView::eval(&out.params), &test).unwrap()
        };
        let (a, b) = (acc(&pre.params), acc(&random));
        assert!(a > b, "seed {seed}: pretrained {a} vs random {b}");
    }
}

#[test]
fn finetune_rejects_mismatched_classes() {
    let (train, _) = small_data(4);
    let params = ModelParams::<f32>::init(&spec(), 7, 16, 0).unwrap();
    assert!(finetune(&train, &params, &FinetuneConfig::new(1, 0), Hooks::default()).is_err());
}

#[test]
fn untrained_model_is_near_chance() {
    let (_, test) = small_data(5);
    let params = ModelParams::<f32>::init(&spec(), 4, 16, 99).unwrap();
    let acc = clean_accuracy(&ModelView::eval(&params), &test).unwrap();
    assert!(acc <= 0.5, "untrained accuracy {acc}");
}

#[test]
fn supervised_baseline_learns() {
    let (train, test) = small_data(6);
    let mut cfg = SupervisedConfig::matching(&small_pretrain(20, 6));
    cfg.batch_size = 16;
    cfg.lr0 = 0.1;
    cfg.augment = AugmentPolicy::disabled();
    let out = train_supervised(&train, &spec(), &cfg, Hooks::default()).unwrap();
    let acc = clean_accuracy(&ModelView::eval(&out.params), &test).unwrap();
    assert!(acc > 0.8, "baseline accuracy {acc}");
}

#[test]
fn wrong_image_size_is_rejected() {
    let (train, _) = small_data(7);
    let err = act_pretrain(&train, &EncoderSpec::toy_conv([8, 16], 16), &small_pretrain(1, 0), Hooks::default()).unwrap_err();
    assert!(err.to_string().contains("model expects"), "{err}");
}
