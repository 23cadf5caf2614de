//! Pretrain, fine-tune and evaluate on the synthetic dataset, next to a
//! cross-entropy baseline of the same architecture.
//!
//! cargo run --release --example toy_pipeline -- [seed]

use std::time::Instant;

use advclr::attack::{AttackKind, ModelView};
use advclr::data::{synthetic, AugmentPolicy, Split, SyntheticConfig};
use advclr::eval::{clean_accuracy, robust_accuracy, EvalAttack};
use advclr::model::EncoderSpec;
use advclr::train::{act_pretrain, finetune, train_supervised, FinetuneConfig, Hooks, PretrainConfig, SupervisedConfig};

fn main() -> advclr::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let train = synthetic(&SyntheticConfig::new(10, 500, 16, seed), Split::Train)?;
    let test = synthetic(&SyntheticConfig::new(10, 100, 16, seed + 5000), Split::Test)?;
    let spec = EncoderSpec::toy_conv([16, 32, 64], 16);

    let mut cfg = PretrainConfig::new(5, seed);
    cfg.batch_size = 128;
    cfg.lr0 = 0.1;
    cfg.augment = AugmentPolicy {
        enabled: true,
        crop_pad: 1,
        hflip_prob: 0.5,
    };
    for a in [&mut cfg.pgd, &mut cfg.cw] {
        a.epsilon = 0.06;
        a.num_steps = 5;
        a.step_size = 0.03;
    }
    let t = Instant::now();
    let mut print = |r: &advclr::train::EpochRecord| println!("  epoch {} loss {:.4} ({:.1}s)", r.epoch, r.loss, r.seconds);
    let pre = act_pretrain(&train, &spec, &cfg, Hooks { checkpoint_dir: None, on_epoch: Some(&mut print) })?;
    println!("pretrain {:.1}s", t.elapsed().as_secs_f64());
    let mut ft = FinetuneConfig::new(20, seed);
    ft.lr = 1e-2;
    let act = finetune(&train, &pre.params, &ft, Hooks::default())?;
    let base = train_supervised(&train, &spec, &SupervisedConfig::matching(&cfg), Hooks::default())?;
    println!("total {:.1}s", t.elapsed().as_secs_f64());

    let pgd = EvalAttack::default_for(AttackKind::Pgd).config(0.03);
    for (name, p) in [("act", &act.params), ("baseline", &base.params)] {
        let v = ModelView::eval(p);
        println!(
            "{name}: clean {:.3} pgd {:.3}",
            clean_accuracy(&v, &test)?,
            robust_accuracy(&v, &test, &pgd, seed)?
        );
    }
    println!("total {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
