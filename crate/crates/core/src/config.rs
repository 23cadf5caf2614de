//! Run configuration: a sectioned `key = value` file (TOML syntax) plus
//! command-line and environment overrides.
//!
//! ```toml
//! seed = 1
//!
//! [data]
//! dataset = "synthetic"      # or "cifar10"
//!
//! [model]
//! kind = "toy_conv"
//! widths = [16, 32, 64]
//! ```
//!
//! Every other key is optional; see `README.md` for the full list.
//! Unknown keys are rejected with a suggestion, syntax errors carry the line
//! number.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::attack::{AttackConfig, AttackKind, ObjectiveMode};
use crate::data::{load_cifar10, synthetic, AugmentPolicy, Dataset, Split, SyntheticConfig, DATA_DIR_ENV};
use crate::error::{Error, Result};
use crate::eval::EvalAttack;
use crate::losses::DEFAULT_TEMPERATURE;
use crate::model::{EncoderKind, EncoderSpec, DEFAULT_PROJECTION_DIM};
use crate::train::{AdamConfig, FinetuneConfig, PretrainConfig, SupervisedConfig};

/// Offset between the synthetic train seed and the synthetic test seed.
pub const TEST_SEED_OFFSET: u64 = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub dir: Option<PathBuf>,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub pattern_seed: u64,
    pub amplitude: f32,
    pub noise: f32,
    /// Keep only the first n training / test images.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: String,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub projection_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub momentum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSection {
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub attacks: Vec<EvalAttack>,
    pub epsilons: Vec<f32>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub augment: AugmentPolicy,
    pub pgd_view: AttackConfig,
    pub cw_view: AttackConfig,
    pub baseline: BaselineSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

/// Values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub pretrain_epochs: Option<usize>,
    pub finetune_epochs: Option<usize>,
    pub epsilons: Option<Vec<f32>>,
}

// ---------------------------------------------------------------------------
// Reading

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Best-effort line of `key` inside `[section]` (`""` for the top level).
fn locate(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[') {
            current = h.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
            if section.is_empty() && current == key {
                return Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some(rest) = t.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn suggest<'a>(key: &str, known: &[&'a str]) -> Option<&'a str> {
    known
        .iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .filter(|&(d, k)| d <= 2.max(k.len() / 3))
        .min()
        .map(|(_, k)| k)
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

struct Section<'s> {
    path: String,
    table: Table,
    src: &'s str,
}

impl<'s> Section<'s> {
    fn new(path: &str, table: Table, src: &'s str, known: &[&str]) -> Result<Self> {
        let s = Self {
            path: path.to_string(),
            table,
            src,
        };
        for key in s.table.keys() {
            if !known.contains(&key.as_str()) {
                let mut msg = format!("unknown key `{}`", s.qualified(key));
                if let Some(line) = locate(src, path, key) {
                    msg = format!("line {line}: {msg}");
                }
                if let Some(k) = suggest(key, known) {
                    msg.push_str(&format!(" (did you mean `{k}`?)"));
                }
                return Err(Error::Config(msg));
            }
        }
        Ok(s)
    }

    fn qualified(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn mismatch(&self, key: &str, want: &str, got: &Value) -> Error {
        let mut msg = format!("`{}`: expected {want}, found {}", self.qualified(key), type_name(got));
        if let Some(line) = locate(self.src, &self.path, key) {
            msg = format!("line {line}: {msg}");
        }
        Error::Config(msg)
    }

    fn invalid(&self, key: &str, detail: impl std::fmt::Display) -> Error {
        let mut msg = format!("`{}`: {detail}", self.qualified(key));
        if let Some(line) = locate(self.src, &self.path, key) {
            msg = format!("line {line}: {msg}");
        }
        Error::Config(msg)
    }

    fn required<T>(&self, key: &str, v: Option<T>) -> Result<T> {
        v.ok_or_else(|| {
            if self.path.is_empty() {
                Error::Config(format!("missing required key `{key}`"))
            } else {
                Error::Config(format!("missing required key `{key}` in section [{}]", self.path))
            }
        })
    }

    fn sub(&mut self, key: &str, known: &[&str]) -> Result<Section<'s>> {
        let path = self.qualified(key);
        match self.table.remove(key) {
            None => Section::new(&path, Table::new(), self.src, known),
            Some(Value::Table(t)) => Section::new(&path, t, self.src, known),
            Some(v) => Err(self.mismatch(key, "a section", &v)),
        }
    }

    fn uint(&mut self, key: &str) -> Result<Option<u64>> {
        match self.table.remove(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if i >= 0 => Ok(Some(i as u64)),
            Some(Value::Integer(i)) => Err(self.invalid(key, format!("must be >= 0, got {i}"))),
            Some(v) => Err(self.mismatch(key, "integer", &v)),
        }
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.uint(key)?.map(|v| v as usize))
    }

    fn float(&mut self, key: &str) -> Result<Option<f64>> {
        match self.table.remove(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(f)),
            Some(Value::Integer(i)) => Ok(Some(i as f64)),
            Some(v) => Err(self.mismatch(key, "number", &v)),
        }
    }

    fn boolean(&mut self, key: &str) -> Result<Option<bool>> {
        match self.table.remove(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(b)),
            Some(v) => Err(self.mismatch(key, "boolean", &v)),
        }
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        match self.table.remove(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(self.mismatch(key, "string", &v)),
        }
    }

    fn list<T>(&mut self, key: &str, want: &str, f: impl Fn(&Value) -> Option<T>) -> Result<Option<Vec<T>>> {
        match self.table.remove(key) {
            None => Ok(None),
            Some(Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for v in &a {
                    out.push(f(v).ok_or_else(|| self.mismatch(key, &format!("array of {want}"), v))?);
                }
                Ok(Some(out))
            }
            Some(v) => Err(self.mismatch(key, &format!("array of {want}"), &v)),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "seed",
    "output_dir",
    "data",
    "model",
    "pretrain",
    "augment",
    "attacks",
    "baseline",
    "finetune",
    "eval",
];
const DATA_KEYS: &[&str] = &[
    "dataset",
    "dir",
    "num_classes",
    "train_per_class",
    "test_per_class",
    "image_size",
    "pattern_seed",
    "amplitude",
    "noise",
    "train_limit",
    "test_limit",
];
const MODEL_KEYS: &[&str] = &["kind", "widths", "blocks_per_stage", "projection_dim"];
const PRETRAIN_KEYS: &[&str] = &["epochs", "batch_size", "lr0", "momentum", "temperature", "checkpoint_every"];
const AUGMENT_KEYS: &[&str] = &["enabled", "crop_pad", "hflip_prob"];
const ATTACKS_KEYS: &[&str] = &["pgd_view", "cw_view"];
const ATTACK_KEYS: &[&str] = &["kind", "epsilon", "step_size", "steps", "random_start", "objective", "kappa"];
const BASELINE_KEYS: &[&str] = &["epochs", "batch_size", "lr0", "momentum"];
const FINETUNE_KEYS: &[&str] = &["epochs", "batch_size", "lr", "beta1", "beta2", "adam_eps"];
const EVAL_KEYS: &[&str] = &["attacks", "epsilons", "steps", "step_ratio", "random_start", "kappa", "limit"];

fn read_attack(mut s: Section<'_>, default: AttackConfig) -> Result<AttackConfig> {
    let mut a = default;
    if let Some(k) = s.string("kind")? {
        a.kind = AttackKind::parse(&k).ok_or_else(|| s.invalid("kind", format!("unknown attack `{k}` (fgsm, pgd, cw)")))?;
    }
    if let Some(e) = s.float("epsilon")? {
        a.epsilon = e as f32;
        a.step_size = default.step_size / default.epsilon * a.epsilon;
    }
    if let Some(v) = s.float("step_size")? {
        a.step_size = v as f32;
    }
    if let Some(v) = s.usize("steps")? {
        a.num_steps = v;
    }
    if let Some(v) = s.boolean("random_start")? {
        a.random_start = v;
    }
    if let Some(o) = s.string("objective")? {
        a.objective = ObjectiveMode::parse(&o).ok_or_else(|| s.invalid("objective", format!("unknown objective `{o}`")))?;
    }
    if let Some(v) = s.float("kappa")? {
        a.kappa = v as f32;
    }
    a.validate().map_err(|e| s.invalid("kind", e))?;
    Ok(a)
}

impl RunConfig {
    /// Parses configuration text. `overrides` are applied afterwards, then
    /// `ADVCLR_DATA_DIR` if no explicit data directory override was given.
    pub fn parse(src: &str, overrides: &Overrides) -> Result<Self> {
        let table: Table = src.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| line_of_offset(src, s.start));
            let msg = e.message().trim().to_string();
            match line {
                Some(l) => Error::Config(format!("syntax error at line {l}: {msg}")),
                None => Error::Config(format!("syntax error: {msg}")),
            }
        })?;
        let mut top = Section::new("", table, src, TOP_KEYS)?;

        let seed = top.uint("seed")?;
        let seed = match overrides.seed {
            Some(s) => s,
            None => top.required("seed", seed)?,
        };
        let output_dir = top.string("output_dir")?.map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));

        let mut d = top.sub("data", DATA_KEYS)?;
        let dataset = match d.string("dataset")? {
            Some(s) if s == "synthetic" => DatasetKind::Synthetic,
            Some(s) if s == "cifar10" => DatasetKind::Cifar10,
            Some(s) => return Err(d.invalid("dataset", format!("unknown dataset `{s}` (synthetic, cifar10)"))),
            None => return Err(d.required("dataset", None::<()>).unwrap_err()),
        };
        let default_size = if dataset == DatasetKind::Cifar10 { 32 } else { 16 };
        let data = DataConfig {
            dataset,
            dir: d.string("dir")?.map(PathBuf::from),
            num_classes: d.usize("num_classes")?.unwrap_or(10),
            train_per_class: d.usize("train_per_class")?.unwrap_or(500),
            test_per_class: d.usize("test_per_class")?.unwrap_or(100),
            image_size: d.usize("image_size")?.unwrap_or(default_size),
            pattern_seed: d.uint("pattern_seed")?.unwrap_or(crate::data::DEFAULT_PATTERN_SEED),
            amplitude: d.float("amplitude")?.unwrap_or(0.35) as f32,
            noise: d.float("noise")?.unwrap_or(0.08) as f32,
            train_limit: d.usize("train_limit")?,
            test_limit: d.usize("test_limit")?,
        };
        if dataset == DatasetKind::Cifar10 && data.image_size != 32 {
            return Err(d.invalid("image_size", "CIFAR-10 images are 32x32"));
        }

        let mut m = top.sub("model", MODEL_KEYS)?;
        let kind = m.string("kind")?;
        let kind = m.required("kind", kind)?;
        let model = ModelConfig {
            widths: m
                .list("widths", "integers", |v| v.as_integer().filter(|&i| i > 0).map(|i| i as usize))?
                .unwrap_or_else(|| vec![16, 32, 64]),
            blocks_per_stage: m.usize("blocks_per_stage")?.unwrap_or(1),
            projection_dim: m.usize("projection_dim")?.unwrap_or(DEFAULT_PROJECTION_DIM),
            kind,
        };
        if model.kind != "toy_conv" && model.kind != "resnet_small" {
            return Err(m.invalid("kind", format!("unknown encoder `{}` (toy_conv, resnet_small)", model.kind)));
        }

        let mut p = top.sub("pretrain", PRETRAIN_KEYS)?;
        let pretrain = PretrainSection {
            epochs: overrides.pretrain_epochs.or(p.usize("epochs")?),
            batch_size: p.usize("batch_size")?.unwrap_or(512),
            lr0: p.float("lr0")?.unwrap_or(0.4),
            momentum: p.float("momentum")?.unwrap_or(0.9),
            temperature: p.float("temperature")?.unwrap_or(DEFAULT_TEMPERATURE),
            checkpoint_every: p.usize("checkpoint_every")?.unwrap_or(0),
        };

        let mut a = top.sub("augment", AUGMENT_KEYS)?;
        let augment = AugmentPolicy {
            enabled: a.boolean("enabled")?.unwrap_or(true),
            crop_pad: a.usize("crop_pad")?.unwrap_or(4),
            hflip_prob: a.float("hflip_prob")?.unwrap_or(0.5),
        };
        augment.validate().map_err(|e| a.invalid("hflip_prob", e))?;

        let defaults = PretrainConfig::new(1, seed);
        let mut at = top.sub("attacks", ATTACKS_KEYS)?;
        let pv = at.sub("pgd_view", ATTACK_KEYS)?;
        let pgd_view = read_attack(pv, defaults.pgd)?;
        let cv = at.sub("cw_view", ATTACK_KEYS)?;
        let cw_view = read_attack(cv, defaults.cw)?;

        let mut b = top.sub("baseline", BASELINE_KEYS)?;
        let baseline = BaselineSection {
            epochs: overrides.pretrain_epochs.or(b.usize("epochs")?),
            batch_size: b.usize("batch_size")?,
            lr0: b.float("lr0")?,
            momentum: b.float("momentum")?,
        };

        let mut f = top.sub("finetune", FINETUNE_KEYS)?;
        let adam_default = AdamConfig::default();
        let finetune = FinetuneSection {
            epochs: overrides.finetune_epochs.or(f.usize("epochs")?),
            batch_size: f.usize("batch_size")?.unwrap_or(128),
            lr: f.float("lr")?.unwrap_or(1e-4),
            adam: AdamConfig {
                beta1: f.float("beta1")?.unwrap_or(adam_default.beta1),
                beta2: f.float("beta2")?.unwrap_or(adam_default.beta2),
                eps: f.float("adam_eps")?.unwrap_or(adam_default.eps),
            },
        };

        let mut e = top.sub("eval", EVAL_KEYS)?;
        let names = e
            .list("attacks", "strings", |v| v.as_str().map(str::to_string))?
            .unwrap_or_else(|| vec!["fgsm".into(), "pgd".into(), "cw".into()]);
        let steps = e.usize("steps")?;
        let step_ratio = e.float("step_ratio")?;
        let random_start = e.boolean("random_start")?;
        let kappa = e.float("kappa")?;
        let mut attacks = Vec::with_capacity(names.len());
        for n in &names {
            let kind = AttackKind::parse(n).ok_or_else(|| e.invalid("attacks", format!("unknown attack `{n}` (fgsm, pgd, cw)")))?;
            let mut ea = EvalAttack::default_for(kind);
            if kind != AttackKind::Fgsm {
                ea.num_steps = steps.unwrap_or(ea.num_steps);
                ea.step_ratio = step_ratio.map_or(ea.step_ratio, |v| v as f32);
                ea.kappa = kappa.map_or(ea.kappa, |v| v as f32);
            }
            if kind == AttackKind::Pgd {
                ea.random_start = random_start.unwrap_or(ea.random_start);
            }
            attacks.push(ea);
        }
        let epsilons = match &overrides.epsilons {
            Some(v) => v.clone(),
            None => e
                .list("epsilons", "numbers", |v| v.as_float().or(v.as_integer().map(|i| i as f64)).map(|f| f as f32))?
                .unwrap_or_else(|| vec![0.0, 0.03, 0.06, 0.08]),
        };
        let eval = EvalSection {
            attacks,
            epsilons,
            limit: e.usize("limit")?,
        };

        let mut cfg = RunConfig {
            seed,
            output_dir,
            data,
            model,
            pretrain,
            augment,
            pgd_view,
            cw_view,
            baseline,
            finetune,
            eval,
        };
        if let Some(dir) = overrides
            .data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        {
            cfg.data.dir = Some(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src, overrides).map_err(|e| e.context(format!("{}", path.display())))
    }

    fn validate(&self) -> Result<()> {
        self.encoder_spec()?;
        for &e in &self.eval.epsilons {
            if !(e >= 0.0) || !e.is_finite() {
                return Err(Error::Config(format!("`eval.epsilons`: {e} is not a valid budget")));
            }
        }
        if self.eval.epsilons.is_empty() || self.eval.attacks.is_empty() {
            return Err(Error::Config("`eval.attacks` and `eval.epsilons` must be nonempty".into()));
        }
        if self.data.num_classes < 2 {
            return Err(Error::Config("`data.num_classes` must be >= 2".into()));
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        let spec = EncoderSpec {
            kind: match self.model.kind.as_str() {
                "toy_conv" => EncoderKind::ToyConv,
                _ => EncoderKind::ResnetSmall {
                    blocks_per_stage: self.model.blocks_per_stage,
                },
            },
            widths: self.model.widths.clone(),
            in_channels: 3,
            image_size: self.data.image_size,
        };
        spec.validate().map_err(|e| Error::Config(format!("[model]: {e}")))?;
        Ok(spec)
    }

    fn epochs(v: Option<usize>, key: &str) -> Result<usize> {
        v.ok_or_else(|| Error::Config(format!("missing required key `{key}` (or pass --epochs)")))
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let cfg = PretrainConfig {
            epochs: Self::epochs(self.pretrain.epochs, "pretrain.epochs")?,
            batch_size: self.pretrain.batch_size,
            lr0: self.pretrain.lr0,
            momentum: self.pretrain.momentum,
            temperature: self.pretrain.temperature,
            pgd: self.pgd_view,
            cw: self.cw_view,
            augment: self.augment,
            seed: self.seed,
            checkpoint_every: self.pretrain.checkpoint_every,
            projection_dim: self.model.projection_dim,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Cross-entropy baseline; unset keys follow `[pretrain]`.
    pub fn baseline_config(&self) -> Result<SupervisedConfig> {
        let cfg = SupervisedConfig {
            epochs: Self::epochs(self.baseline.epochs.or(self.pretrain.epochs), "baseline.epochs")?,
            batch_size: self.baseline.batch_size.unwrap_or(self.pretrain.batch_size),
            lr0: self.baseline.lr0.unwrap_or(self.pretrain.lr0),
            momentum: self.baseline.momentum.unwrap_or(self.pretrain.momentum),
            augment: self.augment,
            seed: self.seed,
            checkpoint_every: self.pretrain.checkpoint_every,
            projection_dim: self.model.projection_dim,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig> {
        let cfg = FinetuneConfig {
            epochs: Self::epochs(self.finetune.epochs, "finetune.epochs")?,
            batch_size: self.finetune.batch_size,
            lr: self.finetune.lr,
            adam: self.finetune.adam,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Train and test splits as configured.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.data.dataset {
            DatasetKind::Synthetic => {
                let mk = |per_class, seed, split| {
                    let mut c = SyntheticConfig::new(self.data.num_classes, per_class, self.data.image_size, seed);
                    c.pattern_seed = self.data.pattern_seed;
                    c.amplitude = self.data.amplitude;
                    c.noise = self.data.noise;
                    synthetic(&c, split)
                };
                (
                    mk(self.data.train_per_class, self.seed, Split::Train)?,
                    mk(self.data.test_per_class, self.seed.wrapping_add(TEST_SEED_OFFSET), Split::Test)?,
                )
            }
            DatasetKind::Cifar10 => {
                let dir = self.data.dir.as_deref().ok_or_else(|| {
                    Error::Config(format!("cifar10 needs `data.dir`, --data-dir or {DATA_DIR_ENV}"))
                })?;
                load_cifar10(dir)?
            }
        };
        let cut = |d: Dataset, n: Option<usize>| match n {
            Some(n) => d.take(n),
            None => d,
        };
        Ok((cut(train, self.data.train_limit), cut(test, self.data.test_limit)))
    }

    /// Canonical JSON of the resolved configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}
