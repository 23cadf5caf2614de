use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advclr::eval::{parse_csv, ReportDocument};
use advclr::model::read_checkpoint;
use advclr::train::TrainLog;

const TINY: &str = r#"
seed = 3

[data]
dataset = "synthetic"
num_classes = 4
train_per_class = 16
test_per_class = 8
image_size = 8

[model]
kind = "toy_conv"
widths = [8, 16]

[pretrain]
epochs = 2
batch_size = 32
lr0 = 0.05

[finetune]
epochs = 3
lr = 0.01

[eval]
epsilons = [0.0, 0.03]
"#;

fn advclr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advclr"))
        .args(args)
        .env_remove("ADVCLR_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("output_dir = \"{}\"\n{body}", dir.join("runs").display())).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero_for_every_command() {
    for cmd in [vec!["--help"], vec!["pretrain", "--help"], vec!["finetune", "--help"], vec!["evaluate", "--help"],
                vec!["gradcheck", "--help"], vec!["report", "--help"], vec!["ingest-check", "--help"]] {
        let o = advclr(&cmd);
        assert_eq!(o.status.code(), Some(0), "{cmd:?}");
        assert!(stdout(&o).contains("Usage"), "{cmd:?}");
    }
}

#[test]
fn pretrain_finetune_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (pre, ft, ev) = (tmp.path().join("pre"), tmp.path().join("ft"), tmp.path().join("ev"));

    let o = advclr(&["ingest-check", "-c", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("train: 64 images"));

    let o = advclr(&["pretrain", "-c", s(&cfg), "--run-dir", s(&pre)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = TrainLog::from_json_lines(&std::fs::read_to_string(pre.join("train_log.jsonl")).unwrap()).unwrap();
    assert_eq!(log.records.len(), 2);
    let ckpt = pre.join("checkpoint.ckpt");
    let ckpt_bytes = std::fs::read(&ckpt).unwrap();
    assert_eq!(read_checkpoint(&ckpt).unwrap().metadata["stage"], "pretrain");

    let o = advclr(&["finetune", "-c", s(&cfg), "--run-dir", s(&ft), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(ft.join("finetune_log.jsonl").exists());
    let model = format!("act={}", ft.join("checkpoint.ckpt").display());

    let o = advclr(&["evaluate", "-c", s(&cfg), "--run-dir", s(&ev), "--model", &model]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = ReportDocument::read(&ev.join("report.json")).unwrap();
    assert_eq!(doc.reports.len(), 1);
    let r = &doc.reports[0];
    assert_eq!(r.model_id, "act");
    // Three default attacks at two budgets.
    assert_eq!(r.cells.len(), 6);
    for c in r.cells.iter().filter(|c| c.epsilon == 0.0) {
        assert_eq!(c.robust_accuracy, r.clean_accuracy, "{:?}", c.attack);
    }
    let rows = parse_csv(&std::fs::read_to_string(ev.join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);

    let o = advclr(&["report", s(&ev)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("act"));

    // Inputs are left untouched.
    assert_eq!(std::fs::read(&ckpt).unwrap(), ckpt_bytes);
}

#[test]
fn zero_epsilon_robust_equals_clean() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let pre = tmp.path().join("pre");
    let o = advclr(&["pretrain", "-c", s(&cfg), "--baseline", "--run-dir", s(&pre), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let model = format!("base={}", pre.join("checkpoint.ckpt").display());
    let ev = tmp.path().join("ev");
    let o = advclr(&["evaluate", "-c", s(&cfg), "--run-dir", s(&ev), "--model", &model, "--epsilon", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = ReportDocument::read(&ev.join("report.json")).unwrap();
    let r = &doc.reports[0];
    assert_eq!(r.cells.len(), 3);
    assert!(r.cells.iter().all(|c| c.robust_accuracy == r.clean_accuracy));
}

#[test]
fn identical_invocations_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let mut outputs = Vec::new();
    for k in 0..2 {
        let dir = tmp.path().join(format!("pre{k}"));
        let o = advclr(&["pretrain", "-c", s(&cfg), "--run-dir", s(&dir)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let log = TrainLog::from_json_lines(&std::fs::read_to_string(dir.join("train_log.jsonl")).unwrap()).unwrap();
        outputs.push((std::fs::read(dir.join("checkpoint.ckpt")).unwrap(), log.without_timing()));
    }
    assert_eq!(outputs[0], outputs[1]);

    // A different seed changes the weights.
    let dir = tmp.path().join("pre_seed");
    let o = advclr(&["pretrain", "-c", s(&cfg), "--run-dir", s(&dir), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(std::fs::read(dir.join("checkpoint.ckpt")).unwrap(), outputs[0].0);
    let effective = std::fs::read_to_string(dir.join("config.json")).unwrap();
    assert!(effective.contains("\"seed\": 9") || effective.contains("\"seed\":9"), "{effective}");
}

#[test]
fn default_run_dirs_do_not_clobber() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    for _ in 0..2 {
        let o = advclr(&["pretrain", "-c", s(&cfg), "--epochs", "1"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let dirs: Vec<_> = std::fs::read_dir(tmp.path().join("runs")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(dirs.len(), 2);
    assert!(dirs.iter().all(|d| d.to_string_lossy().starts_with("pretrain-")));
}

#[test]
fn gradcheck_passes() {
    let o = advclr(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.trim_end().ends_with("PASS"));
    let line = out.lines().find(|l| l.starts_with("max relative error")).unwrap();
    let v: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(v <= 1e-4);
}

#[test]
fn exit_codes_name_the_failure_class() {
    let tmp = tempfile::tempdir().unwrap();

    let typo = write_config(tmp.path(), &TINY.replace("lr0 = 0.05", "lr0 = 0.05\n[attacks.pgd_view]\nepsilonn = 0.1"));
    let o = advclr(&["ingest-check", "-c", s(&typo)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("did you mean `epsilon`"), "{}", stderr(&o));

    let o = advclr(&["ingest-check", "-c", s(&tmp.path().join("absent.toml"))]);
    assert_eq!(o.status.code(), Some(5));

    let cifar = write_config(tmp.path(), &TINY.replace("dataset = \"synthetic\"", "dataset = \"cifar10\"").replace("image_size = 8\n", ""));
    let o = advclr(&["ingest-check", "-c", s(&cifar), "--data-dir", s(&tmp.path().join("nowhere"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = advclr(&["report", s(&tmp.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(5));

    let o = advclr(&["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_toy_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let o = advclr(&["ingest-check", "-c", s(&path)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("train: 5000 images"));
}
