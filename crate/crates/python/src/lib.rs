//! Python bindings. Built as the `advclr` extension module by maturin.

use std::collections::BTreeMap;
use std::path::PathBuf;

use advclr::attack::{run_attack, AttackConfig as CoreAttack, AttackContext, AttackKind, ModelView, ObjectiveMode};
use advclr::check::{model_grad_check, random_check_case};
use advclr::config::{Overrides, RunConfig as CoreRunConfig};
use advclr::data::{load_cifar10, synthetic, AugmentPolicy, Dataset as CoreDataset, Split, SyntheticConfig};
use advclr::eval::{self, EvalAttack, ReportDocument};
use advclr::losses::{self, ContrastiveBatch, ViewTriple};
use advclr::model::{read_checkpoint, write_checkpoint, Checkpoint, EncoderSpec as CoreSpec, ModelParams, Scope};
use advclr::train::{self, FinetuneConfig as CoreFinetune, Hooks, PretrainConfig as CorePretrain, SupervisedConfig, TrainLog};
use advclr::{Error, ErrorCategory, Tape, Tensor as CoreTensor};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(advclr, AdvclrError, PyException, "Base class of every advclr failure.");
create_exception!(advclr, ConfigError, AdvclrError, "Invalid configuration or argument.");
create_exception!(advclr, DataError, AdvclrError, "Malformed data or mismatched shapes.");
create_exception!(advclr, NumericError, AdvclrError, "Non-finite values or a failed numerical check.");
create_exception!(advclr, IoError, AdvclrError, "File, checkpoint or report failure.");

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.category() {
        ErrorCategory::Config => ConfigError::new_err(msg),
        ErrorCategory::Data => DataError::new_err(msg),
        ErrorCategory::Numeric => NumericError::new_err(msg),
        ErrorCategory::Io => IoError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for advclr::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn invalid(msg: impl Into<String>) -> PyErr {
    to_py(Error::InvalidArgument(msg.into()))
}

/// Dense float32 array in row-major order.
#[pyclass(module = "advclr", frozen)]
pub struct Tensor {
    inner: CoreTensor<f32>,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: CoreTensor::from_vec(shape, data).py()? })
    }

    /// Copies any object with `.shape` and `.ravel()`, such as a numpy array.
    #[staticmethod]
    fn from_numpy(array: &Bound<'_, PyAny>) -> PyResult<Self> {
        let shape: Vec<usize> = array.getattr("shape")?.extract()?;
        let data: Vec<f32> = array.call_method0("ravel")?.call_method0("tolist")?.extract()?;
        Self::new(data, shape)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    /// A float32 numpy array of the same shape.
    fn numpy<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let np = py.import("numpy")?;
        let flat = np.call_method1("asarray", (self.inner.data().to_vec(), "float32"))?;
        flat.call_method1("reshape", (self.inner.shape().to_vec(),))
    }

    fn max_abs(&self) -> f32 {
        self.inner.max_abs()
    }

    fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(1)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Labelled images of one shape with pixels in [0, 1].
#[pyclass(module = "advclr", frozen)]
pub struct Dataset {
    inner: CoreDataset,
}

fn parse_split(split: &str) -> PyResult<Split> {
    match split {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(invalid(format!("split must be `train` or `test`, got `{other}`"))),
    }
}

#[pymethods]
impl Dataset {
    /// Class-conditional blob images; the same seed gives the same images.
    #[staticmethod]
    #[pyo3(signature = (num_classes, per_class, image_size, seed, split = "train"))]
    fn synthetic(num_classes: usize, per_class: usize, image_size: usize, seed: u64, split: &str) -> PyResult<Self> {
        let cfg = SyntheticConfig::new(num_classes, per_class, image_size, seed);
        Ok(Self { inner: synthetic(&cfg, parse_split(split)?).py()? })
    }

    /// CIFAR-10 binary batches in `dir`; returns `(train, test)`.
    #[staticmethod]
    fn cifar10(dir: PathBuf) -> PyResult<(Self, Self)> {
        let (train, test) = load_cifar10(&dir).py()?;
        Ok((Self { inner: train }, Self { inner: test }))
    }

    /// Builds a dataset from an `(N, C, H, W)` tensor and labels.
    #[staticmethod]
    #[pyo3(signature = (images, labels, num_classes, split = "train"))]
    fn from_tensor(images: &Tensor, labels: Vec<usize>, num_classes: usize, split: &str) -> PyResult<Self> {
        let s = images.inner.shape();
        if s.len() != 4 {
            return Err(to_py(Error::Shape { op: "Dataset.from_tensor", detail: format!("expected (N, C, H, W), got {s:?}") }));
        }
        let names = (0..num_classes).map(|c| format!("class{c}")).collect();
        let inner = CoreDataset::from_parts([s[1], s[2], s[3]], images.inner.data().to_vec(), labels, names, parse_split(split)?)
            .py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    /// All images as one `(N, C, H, W)` tensor.
    fn images(&self) -> Tensor {
        Tensor { inner: self.inner.as_batch().x }
    }

    /// The first `n` images.
    fn take(&self, n: usize) -> Self {
        Self { inner: self.inner.take(n) }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(len={}, classes={}, shape={:?})", self.inner.len(), self.inner.num_classes(), self.inner.image_shape())
    }
}

/// Encoder architecture.
#[pyclass(module = "advclr", frozen)]
pub struct EncoderSpec {
    inner: CoreSpec,
}

#[pymethods]
impl EncoderSpec {
    #[staticmethod]
    fn toy_conv(widths: Vec<usize>, image_size: usize) -> PyResult<Self> {
        let inner = CoreSpec::toy_conv(widths, image_size);
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn resnet_small(widths: Vec<usize>, blocks_per_stage: usize, image_size: usize) -> PyResult<Self> {
        let inner = CoreSpec::resnet_small(widths, blocks_per_stage, image_size);
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("spec serializes")
    }

    fn __repr__(&self) -> String {
        format!("EncoderSpec({})", self.to_json())
    }
}

/// Encoder, projection head and linear classifier with checkpoint metadata.
#[pyclass(module = "advclr")]
pub struct Model {
    params: ModelParams<f32>,
    #[pyo3(get, set)]
    metadata: BTreeMap<String, String>,
}

impl Model {
    fn wrap(params: ModelParams<f32>, metadata: BTreeMap<String, String>) -> Self {
        Self { params, metadata }
    }
}

fn parse_scope(s: &str) -> PyResult<Scope> {
    [Scope::Encoder, Scope::Projection, Scope::Classifier]
        .into_iter()
        .find(|sc| sc.as_str() == s)
        .ok_or_else(|| invalid(format!("scope must be encoder, projection or classifier, got `{s}`")))
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (spec, num_classes, projection_dim = 128, seed = 0))]
    fn init(spec: &EncoderSpec, num_classes: usize, projection_dim: usize, seed: u64) -> PyResult<Self> {
        let params = ModelParams::init(&spec.inner, num_classes, projection_dim, seed).py()?;
        Ok(Self::wrap(params, BTreeMap::new()))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = read_checkpoint(&path).py()?;
        Ok(Self::wrap(ckpt.params, ckpt.metadata))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint { params: self.params.clone(), metadata: self.metadata.clone() };
        write_checkpoint(&path, &ckpt).py()
    }

    #[getter]
    fn spec(&self) -> EncoderSpec {
        EncoderSpec { inner: self.params.spec.clone() }
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.params.num_classes
    }

    #[getter]
    fn projection_dim(&self) -> usize {
        self.params.projection_dim
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.params.embedding_dim()
    }

    fn param_names(&self) -> Vec<String> {
        self.params.entries().iter().map(|e| e.name.clone()).collect()
    }

    /// A copy of one named array.
    fn get(&self, name: &str) -> PyResult<Tensor> {
        let e = self.params.get(name).ok_or_else(|| invalid(format!("no parameter named `{name}`")))?;
        Ok(Tensor { inner: e.value.clone() })
    }

    /// Flat values of every array in `scope`.
    fn scope_values(&self, scope: &str) -> PyResult<Vec<f32>> {
        Ok(self.params.scope_values(parse_scope(scope)?))
    }

    /// Embeddings of `(N, C, H, W)` images, batch norm in eval mode.
    fn encode(&self, x: &Tensor) -> PyResult<Tensor> {
        Ok(Tensor { inner: self.params.encode(&x.inner).py()? })
    }

    /// Unit-norm projections of embeddings.
    fn project(&self, embeddings: &Tensor) -> PyResult<Tensor> {
        Ok(Tensor { inner: self.params.project(&embeddings.inner).py()? })
    }

    fn logits(&self, x: &Tensor) -> PyResult<Tensor> {
        let e = self.params.encode(&x.inner).py()?;
        Ok(Tensor { inner: self.params.classify(&e).py()? })
    }

    /// Argmax class per image.
    fn predict(&self, x: &Tensor) -> PyResult<Vec<usize>> {
        let logits = self.logits(x)?.inner;
        let k = self.params.num_classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best }))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(spec={}, classes={})", serde_json::to_string(&self.params.spec).unwrap_or_default(), self.params.num_classes)
    }
}

/// L∞ attack settings. `kind` is fgsm, pgd or cw.
#[pyclass(module = "advclr")]
pub struct AttackConfig {
    inner: CoreAttack,
}

#[pymethods]
impl AttackConfig {
    /// Defaults for `kind` at budget `epsilon`; keyword arguments override them.
    #[new]
    #[pyo3(signature = (kind, epsilon, step_size = None, num_steps = None, random_start = None, objective = None, kappa = None))]
    fn new(
        kind: &str,
        epsilon: f32,
        step_size: Option<f32>,
        num_steps: Option<usize>,
        random_start: Option<bool>,
        objective: Option<&str>,
        kappa: Option<f32>,
    ) -> PyResult<Self> {
        let kind = AttackKind::parse(kind).ok_or_else(|| invalid(format!("unknown attack `{kind}`")))?;
        let mut a = CoreAttack::for_kind(kind, epsilon);
        if let Some(v) = step_size {
            a.step_size = v;
        }
        if let Some(v) = num_steps {
            a.num_steps = v;
        }
        if let Some(v) = random_start {
            a.random_start = v;
        }
        if let Some(o) = objective {
            a.objective = ObjectiveMode::parse(o).ok_or_else(|| invalid(format!("unknown objective `{o}`")))?;
        }
        if let Some(v) = kappa {
            a.kappa = v;
        }
        a.validate().py()?;
        Ok(Self { inner: a })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.as_str()
    }
    #[getter]
    fn epsilon(&self) -> f32 {
        self.inner.epsilon
    }
    #[getter]
    fn step_size(&self) -> f32 {
        self.inner.step_size
    }
    #[getter]
    fn num_steps(&self) -> usize {
        self.inner.num_steps
    }
    #[getter]
    fn random_start(&self) -> bool {
        self.inner.random_start
    }
    #[getter]
    fn objective(&self) -> &'static str {
        self.inner.objective.as_str()
    }
    #[getter]
    fn kappa(&self) -> f32 {
        self.inner.kappa
    }

    fn __repr__(&self) -> String {
        format!("AttackConfig({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

fn config_to_json<C: serde::Serialize>(c: &C) -> String {
    serde_json::to_string_pretty(c).expect("config serializes")
}

fn config_from_json<C: serde::de::DeserializeOwned>(s: &str) -> PyResult<C> {
    serde_json::from_str(s).map_err(|e| invalid(e.to_string()))
}

/// Adversarial contrastive pretraining settings.
#[pyclass(module = "advclr")]
pub struct PretrainConfig {
    inner: CorePretrain,
}

#[pymethods]
impl PretrainConfig {
    fn to_json(&self) -> String {
        config_to_json(&self.inner)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: config_from_json(s)? })
    }

    #[new]
    #[pyo3(signature = (epochs, seed = 0))]
    fn new(epochs: usize, seed: u64) -> Self {
        Self { inner: CorePretrain::new(epochs, seed) }
    }

    #[getter]
    fn get_epochs(&self) -> usize {
        self.inner.epochs
    }
    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }
    #[getter]
    fn get_batch_size(&self) -> usize {
        self.inner.batch_size
    }
    #[setter]
    fn set_batch_size(&mut self, v: usize) {
        self.inner.batch_size = v;
    }
    #[getter]
    fn get_lr0(&self) -> f64 {
        self.inner.lr0
    }
    #[setter]
    fn set_lr0(&mut self, v: f64) {
        self.inner.lr0 = v;
    }
    #[getter]
    fn get_momentum(&self) -> f64 {
        self.inner.momentum
    }
    #[setter]
    fn set_momentum(&mut self, v: f64) {
        self.inner.momentum = v;
    }
    #[getter]
    fn get_temperature(&self) -> f64 {
        self.inner.temperature
    }
    #[setter]
    fn set_temperature(&mut self, v: f64) {
        self.inner.temperature = v;
    }
    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.seed
    }
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }
    #[getter]
    fn get_projection_dim(&self) -> usize {
        self.inner.projection_dim
    }
    #[setter]
    fn set_projection_dim(&mut self, v: usize) {
        self.inner.projection_dim = v;
    }
    #[getter]
    fn get_pgd(&self) -> AttackConfig {
        AttackConfig { inner: self.inner.pgd }
    }
    #[setter]
    fn set_pgd(&mut self, a: PyRef<'_, AttackConfig>) {
        self.inner.pgd = a.inner;
    }
    #[getter]
    fn get_cw(&self) -> AttackConfig {
        AttackConfig { inner: self.inner.cw }
    }
    #[setter]
    fn set_cw(&mut self, a: PyRef<'_, AttackConfig>) {
        self.inner.cw = a.inner;
    }

    /// Random crop with `crop_pad` reflection padding and horizontal flips
    /// with probability `hflip_prob`; `enabled=False` turns both off.
    #[pyo3(signature = (enabled = true, crop_pad = 4, hflip_prob = 0.5))]
    fn set_augment(&mut self, enabled: bool, crop_pad: usize, hflip_prob: f64) -> PyResult<()> {
        let a = AugmentPolicy { enabled, crop_pad, hflip_prob };
        a.validate().py()?;
        self.inner.augment = a;
        Ok(())
    }
}

/// Linear-probe settings.
#[pyclass(module = "advclr")]
pub struct FinetuneConfig {
    inner: CoreFinetune,
}

#[pymethods]
impl FinetuneConfig {
    fn to_json(&self) -> String {
        config_to_json(&self.inner)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: config_from_json(s)? })
    }

    #[new]
    #[pyo3(signature = (epochs, seed = 0, lr = None, batch_size = None))]
    fn new(epochs: usize, seed: u64, lr: Option<f64>, batch_size: Option<usize>) -> Self {
        let mut inner = CoreFinetune::new(epochs, seed);
        if let Some(v) = lr {
            inner.lr = v;
        }
        if let Some(v) = batch_size {
            inner.batch_size = v;
        }
        Self { inner }
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }
    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }
    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }
}

/// Resolved run configuration parsed from TOML text.
#[pyclass(module = "advclr", frozen)]
pub struct RunConfig {
    inner: CoreRunConfig,
}

#[pymethods]
impl RunConfig {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreRunConfig::parse(text, &Overrides::default()).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreRunConfig::load(&path, &Overrides::default()).py()? })
    }

    fn encoder_spec(&self) -> PyResult<EncoderSpec> {
        Ok(EncoderSpec { inner: self.inner.encoder_spec().py()? })
    }

    fn pretrain_config(&self) -> PyResult<PretrainConfig> {
        Ok(PretrainConfig { inner: self.inner.pretrain_config().py()? })
    }

    fn finetune_config(&self) -> PyResult<FinetuneConfig> {
        Ok(FinetuneConfig { inner: self.inner.finetune_config().py()? })
    }

    /// `(train, test)` as configured.
    fn load_datasets(&self) -> PyResult<(Dataset, Dataset)> {
        let (train, test) = self.inner.load_datasets().py()?;
        Ok((Dataset { inner: train }, Dataset { inner: test }))
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }
}

fn log_to_py(log: &TrainLog) -> Vec<String> {
    log.to_json_lines().lines().map(str::to_string).collect()
}

/// Adversarial contrastive pretraining. Returns the model and one JSON
/// string per epoch.
#[pyfunction]
#[pyo3(signature = (dataset, spec, config, checkpoint_dir = None))]
fn pretrain(
    py: Python<'_>,
    dataset: &Dataset,
    spec: &EncoderSpec,
    config: &PretrainConfig,
    checkpoint_dir: Option<PathBuf>,
) -> PyResult<(Model, Vec<String>)> {
    let out = py
        .detach(|| {
            let hooks = Hooks { checkpoint_dir: checkpoint_dir.as_deref(), on_epoch: None };
            train::act_pretrain(&dataset.inner, &spec.inner, &config.inner, hooks)
        })
        .py()?;
    let log = log_to_py(&out.log);
    let ckpt = out.checkpoint("pretrain");
    Ok((Model::wrap(ckpt.params, ckpt.metadata), log))
}

/// Cross-entropy training of the whole network with the optimizer, schedule
/// and augmentation of `config`.
#[pyfunction]
fn train_baseline(py: Python<'_>, dataset: &Dataset, spec: &EncoderSpec, config: &PretrainConfig) -> PyResult<(Model, Vec<String>)> {
    let cfg = SupervisedConfig::matching(&config.inner);
    let out = py.detach(|| train::train_supervised(&dataset.inner, &spec.inner, &cfg, Hooks::default())).py()?;
    let log = log_to_py(&out.log);
    let ckpt = out.checkpoint("baseline");
    Ok((Model::wrap(ckpt.params, ckpt.metadata), log))
}

/// Trains only the classifier of `model` on frozen embeddings.
#[pyfunction]
fn finetune(py: Python<'_>, dataset: &Dataset, model: &Model, config: &FinetuneConfig) -> PyResult<(Model, Vec<String>)> {
    let out = py.detach(|| train::finetune(&dataset.inner, &model.params, &config.inner, Hooks::default())).py()?;
    let log = log_to_py(&out.log);
    let ckpt = out.checkpoint("finetune");
    Ok((Model::wrap(ckpt.params, ckpt.metadata), log))
}

/// Adversarial copies of `x`. Supervised objectives need `labels`; the
/// embedding objectives need `reference` projections instead.
#[pyfunction]
#[pyo3(signature = (model, x, config, labels = None, reference = None, temperature = 0.5, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn attack(
    py: Python<'_>,
    model: &Model,
    x: &Tensor,
    config: &AttackConfig,
    labels: Option<Vec<usize>>,
    reference: Option<PyRef<'_, Tensor>>,
    temperature: f32,
    seed: u64,
) -> PyResult<Tensor> {
    let reference = reference.map(|r| r.inner.clone());
    let adv = py.detach(|| {
        let view = ModelView::eval(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = if config.inner.objective.is_supervised() {
            let labels = labels.as_deref().ok_or_else(|| Error::InvalidArgument("supervised attacks need labels".into()))?;
            AttackContext::supervised(labels)
        } else {
            let r = reference
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("embedding attacks need reference projections".into()))?;
            return run_attack(&view, &x.inner, &config.inner, &AttackContext::embedding(r, temperature), &mut rng);
        };
        run_attack(&view, &x.inner, &config.inner, &ctx, &mut rng)
    });
    Ok(Tensor { inner: adv.py()? })
}

#[pyfunction]
fn clean_accuracy(py: Python<'_>, model: &Model, dataset: &Dataset) -> PyResult<f64> {
    py.detach(|| eval::clean_accuracy(&ModelView::eval(&model.params), &dataset.inner)).py()
}

#[pyfunction]
#[pyo3(signature = (model, dataset, config, seed = 0))]
fn robust_accuracy(py: Python<'_>, model: &Model, dataset: &Dataset, config: &AttackConfig, seed: u64) -> PyResult<f64> {
    py.detach(|| eval::robust_accuracy(&ModelView::eval(&model.params), &dataset.inner, &config.inner, seed)).py()
}

fn scalar_loss(f: impl FnOnce(&mut Tape<f64>) -> advclr::Result<advclr::Var>) -> PyResult<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape).py()?;
    tape.value(v).item().py()
}

/// InfoNCE of unit-norm anchors against their positives and shared negatives.
#[pyfunction]
#[pyo3(signature = (anchors, positives, negatives, temperature = 0.5))]
fn info_nce(anchors: &Tensor, positives: &Tensor, negatives: &Tensor, temperature: f64) -> PyResult<f64> {
    scalar_loss(|t| {
        let batch = ContrastiveBatch {
            anchors: t.constant(anchors.inner.cast()),
            positives: t.constant(positives.inner.cast()),
            negatives: t.constant(negatives.inner.cast()),
            negative_mask: None,
        };
        losses::info_nce(t, &batch, temperature)
    })
}

/// Contrastive loss over clean, PGD and CW projections of one batch.
#[pyfunction]
#[pyo3(signature = (z_orig, z_pgd, z_cw, temperature = 0.5))]
fn adv_contrastive(z_orig: &Tensor, z_pgd: &Tensor, z_cw: &Tensor, temperature: f64) -> PyResult<f64> {
    scalar_loss(|t| {
        let views = ViewTriple {
            z_orig: t.constant(z_orig.inner.cast()),
            z_pgd: t.constant(z_pgd.inner.cast()),
            z_cw: t.constant(z_cw.inner.cast()),
        };
        losses::adv_contrastive(t, views, temperature)
    })
}

/// Robustness results for one or more models.
#[pyclass(module = "advclr", frozen)]
pub struct Report {
    inner: ReportDocument,
}

#[pymethods]
impl Report {
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: ReportDocument::from_json(s).py()? })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ReportDocument::read(&path).py()? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).py()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn table(&self) -> String {
        self.inner.render_table()
    }

    /// `{model_id: clean_accuracy}`.
    fn clean(&self) -> BTreeMap<String, f64> {
        self.inner.reports.iter().map(|r| (r.model_id.clone(), r.clean_accuracy)).collect()
    }

    /// Robust accuracy of `model_id` under `attack` at `epsilon`, if evaluated.
    fn robust(&self, model_id: &str, attack: &str, epsilon: f32) -> PyResult<Option<f64>> {
        let kind = AttackKind::parse(attack).ok_or_else(|| invalid(format!("unknown attack `{attack}`")))?;
        Ok(self
            .inner
            .reports
            .iter()
            .find(|r| r.model_id == model_id)
            .and_then(|r| r.cell(kind, epsilon))
            .map(|c| c.robust_accuracy))
    }
}

/// Evaluates `{id: model}` under each named attack (default settings) at
/// every budget.
#[pyfunction]
#[pyo3(signature = (models, dataset, epsilons, attacks = vec!["fgsm".to_string(), "pgd".to_string(), "cw".to_string()], seed = 0))]
fn evaluate(
    py: Python<'_>,
    models: BTreeMap<String, PyRef<'_, Model>>,
    dataset: &Dataset,
    epsilons: Vec<f32>,
    attacks: Vec<String>,
    seed: u64,
) -> PyResult<Report> {
    let attacks = attacks
        .iter()
        .map(|a| AttackKind::parse(a).map(EvalAttack::default_for).ok_or_else(|| invalid(format!("unknown attack `{a}`"))))
        .collect::<PyResult<Vec<_>>>()?;
    let params: Vec<(String, ModelParams<f32>)> = models.iter().map(|(k, m)| (k.clone(), m.params.clone())).collect();
    let reports = py
        .detach(|| {
            let refs: Vec<(&str, &ModelParams<f32>)> = params.iter().map(|(k, p)| (k.as_str(), p)).collect();
            eval::eval_table(&refs, &attacks, &epsilons, &dataset.inner, seed)
        })
        .py()?;
    Ok(Report { inner: ReportDocument::new(reports) })
}

/// Largest relative gap between tape and finite-difference gradients over
/// random small networks of both encoder kinds.
#[pyfunction]
#[pyo3(signature = (seed = 0, cases = 1))]
fn gradcheck(py: Python<'_>, seed: u64, cases: u64) -> PyResult<f64> {
    py.detach(|| {
        let mut worst: f64 = 0.0;
        for case in 0..cases {
            for residual in [false, true] {
                let (p, x, y) = random_check_case(seed.wrapping_add(case), residual)?;
                for r in model_grad_check(&p, &x, &y, 1e-5)? {
                    worst = worst.max(r.max_rel_err);
                }
            }
        }
        Ok(worst)
    })
    .py()
}

#[pymodule]
#[pyo3(name = "advclr")]
fn advclr_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("AdvclrError", py.get_type::<AdvclrError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add("IoError", py.get_type::<IoError>())?;
    m.add_class::<Tensor>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<EncoderSpec>()?;
    m.add_class::<Model>()?;
    m.add_class::<AttackConfig>()?;
    m.add_class::<PretrainConfig>()?;
    m.add_class::<FinetuneConfig>()?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Report>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(train_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(clean_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(robust_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(adv_contrastive, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
