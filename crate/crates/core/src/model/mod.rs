//! Encoders, the projection head and the linear classifier head.
//!
//! Parameters are kept as an ordered list of named tensors. The forward
//! structure is a [`Layout`] of indices into that list, derived from the
//! [`EncoderSpec`], so a checkpoint only needs the spec and the arrays.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BnBatchStats, Element, Tape, Tensor, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

pub const DEFAULT_PROJECTION_DIM: usize = 128;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    /// One stride-2 conv/batch-norm/relu block per width.
    ToyConv,
    /// A 3×3 stem followed by residual stages, one per width; every stage
    /// after the first halves the resolution.
    ResnetSmall { blocks_per_stage: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    #[serde(flatten)]
    pub kind: EncoderKind,
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub image_size: usize,
}

impl EncoderSpec {
    pub fn toy_conv(widths: impl Into<Vec<usize>>, image_size: usize) -> Self {
        Self {
            kind: EncoderKind::ToyConv,
            widths: widths.into(),
            in_channels: 3,
            image_size,
        }
    }

    pub fn resnet_small(widths: impl Into<Vec<usize>>, blocks_per_stage: usize, image_size: usize) -> Self {
        Self {
            kind: EncoderKind::ResnetSmall { blocks_per_stage },
            widths: widths.into(),
            in_channels: 3,
            image_size,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid(format!("encoder widths must be nonempty and positive: {:?}", self.widths)));
        }
        if self.in_channels == 0 || self.image_size == 0 {
            return Err(Error::invalid("encoder input channels and image size must be positive"));
        }
        if let EncoderKind::ResnetSmall { blocks_per_stage } = self.kind {
            if blocks_per_stage == 0 {
                return Err(Error::invalid("resnet_small needs at least one block per stage"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Encoder,
    Projection,
    Classifier,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Encoder => "encoder",
            Scope::Projection => "projection",
            Scope::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T = f32> {
    pub name: String,
    pub scope: Scope,
    /// Running statistics; never touched by optimizers.
    pub buffer: bool,
    pub frozen: bool,
    pub value: Tensor<T>,
}

impl<T: Element> ParamEntry<T> {
    pub fn trainable(&self) -> bool {
        !self.buffer && !self.frozen
    }
}

/// Batch-norm behaviour for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with running statistics; samples are independent.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvBn {
    conv: usize,
    stride: usize,
    pad: usize,
    bn: BnIdx,
}

#[derive(Debug, Clone, PartialEq)]
enum Block {
    Plain(ConvBn),
    Residual {
        first: ConvBn,
        second: ConvBn,
        shortcut: Option<ConvBn>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    blocks: Vec<Block>,
    proj_hidden: Dense,
    proj_bn: BnIdx,
    proj_out: Dense,
    classifier: Dense,
}

/// Shapes and init scales of every parameter, in storage order.
struct Builder {
    entries: Vec<(String, Scope, bool, Vec<usize>, Init)>,
}

#[derive(Clone, Copy)]
enum Init {
    /// N(0, std²)
    Normal(f64),
    Const(f64),
}

impl Builder {
    fn push(&mut self, name: String, scope: Scope, buffer: bool, shape: Vec<usize>, init: Init) -> usize {
        self.entries.push((name, scope, buffer, shape, init));
        self.entries.len() - 1
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let fan_in = (cin * k * k) as f64;
        let conv = self.push(
            format!("{name}.conv.weight"),
            Scope::Encoder,
            false,
            vec![cout, cin, k, k],
            Init::Normal((2.0 / fan_in).sqrt()),
        );
        ConvBn {
            conv,
            stride,
            pad: k / 2,
            bn: self.bn(&format!("{name}.bn"), Scope::Encoder, cout),
        }
    }

    fn bn(&mut self, name: &str, scope: Scope, c: usize) -> BnIdx {
        BnIdx {
            gamma: self.push(format!("{name}.gamma"), scope, false, vec![c], Init::Const(1.0)),
            beta: self.push(format!("{name}.beta"), scope, false, vec![c], Init::Const(0.0)),
            mean: self.push(format!("{name}.running_mean"), scope, true, vec![c], Init::Const(0.0)),
            var: self.push(format!("{name}.running_var"), scope, true, vec![c], Init::Const(1.0)),
        }
    }

    fn dense(&mut self, name: &str, scope: Scope, fan_in: usize, fan_out: usize, gain: f64) -> Dense {
        let weight = self.push(
            format!("{name}.weight"),
            scope,
            false,
            vec![fan_in, fan_out],
            Init::Normal((gain / fan_in as f64).sqrt()),
        );
        let bias = self.push(format!("{name}.bias"), scope, false, vec![fan_out], Init::Const(0.0));
        Dense { weight, bias }
    }
}

fn build_layout(spec: &EncoderSpec, num_classes: usize, projection_dim: usize) -> Result<(Layout, Builder)> {
    spec.validate()?;
    if num_classes == 0 || projection_dim == 0 {
        return Err(Error::invalid("num_classes and projection_dim must be positive"));
    }
    let mut b = Builder { entries: Vec::new() };
    let mut blocks = Vec::new();
    match spec.kind {
        EncoderKind::ToyConv => {
            let mut cin = spec.in_channels;
            for (i, &w) in spec.widths.iter().enumerate() {
                blocks.push(Block::Plain(b.conv_bn(&format!("encoder.block{i}"), cin, w, 3, 2)));
                cin = w;
            }
        }
        EncoderKind::ResnetSmall { blocks_per_stage } => {
            let stem_w = spec.widths[0];
            blocks.push(Block::Plain(b.conv_bn("encoder.stem", spec.in_channels, stem_w, 3, 1)));
            let mut cin = stem_w;
            for (s, &w) in spec.widths.iter().enumerate() {
                for k in 0..blocks_per_stage {
                    let stride = if s > 0 && k == 0 { 2 } else { 1 };
                    let name = format!("encoder.stage{s}.block{k}");
                    let first = b.conv_bn(&format!("{name}.a"), cin, w, 3, stride);
                    let second = b.conv_bn(&format!("{name}.b"), w, w, 3, 1);
                    let shortcut = (stride != 1 || cin != w).then(|| b.conv_bn(&format!("{name}.shortcut"), cin, w, 1, stride));
                    blocks.push(Block::Residual { first, second, shortcut });
                    cin = w;
                }
            }
        }
    }
    let e = spec.embedding_dim();
    let proj_hidden = b.dense("projection.hidden", Scope::Projection, e, e, 2.0);
    let proj_bn = b.bn("projection.hidden.bn", Scope::Projection, e);
    let proj_out = b.dense("projection.out", Scope::Projection, e, projection_dim, 1.0);
    let classifier = b.dense("classifier", Scope::Classifier, e, num_classes, 1.0);
    Ok((
        Layout {
            blocks,
            proj_hidden,
            proj_bn,
            proj_out,
            classifier,
        },
        b,
    ))
}

/// Weights of encoder, projection head and classifier, plus the freeze mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub spec: EncoderSpec,
    pub num_classes: usize,
    pub projection_dim: usize,
    pub seed: u64,
    entries: Vec<ParamEntry<T>>,
    layout: Layout,
}

/// Tape handles for one binding of a model's parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn init_params(spec: &EncoderSpec, num_classes: usize, seed: u64) -> Result<ModelParams<f32>> {
    ModelParams::init(spec, num_classes, DEFAULT_PROJECTION_DIM, seed)
}

impl<T: Element> ModelParams<T> {
    /// Fan-in scaled normal weights, zero biases, unit batch-norm scale.
    /// Deterministic for a given seed.
    pub fn init(spec: &EncoderSpec, num_classes: usize, projection_dim: usize, seed: u64) -> Result<Self> {
        let (layout, builder) = build_layout(spec, num_classes, projection_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = builder
            .entries
            .into_iter()
            .map(|(name, scope, buffer, shape, init)| {
                let value = match init {
                    Init::Const(c) => Tensor::full(shape, T::of(c)),
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        Tensor::from_fn(shape, |_| T::of(dist.sample(&mut rng)))
                    }
                };
                ParamEntry {
                    name,
                    scope,
                    buffer,
                    frozen: false,
                    value,
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            num_classes,
            projection_dim,
            seed,
            entries,
            layout,
        })
    }

    /// Rebuilds parameters from stored entries, checking names and shapes
    /// against the layout implied by the spec.
    pub fn from_entries(
        spec: &EncoderSpec,
        num_classes: usize,
        projection_dim: usize,
        seed: u64,
        entries: Vec<ParamEntry<T>>,
    ) -> Result<Self> {
        let (layout, builder) = build_layout(spec, num_classes, projection_dim)?;
        if builder.entries.len() != entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays for this spec, found {}",
                builder.entries.len(),
                entries.len()
            )));
        }
        for ((name, scope, buffer, shape, _), e) in builder.entries.iter().zip(&entries) {
            if &e.name != name || e.value.shape() != shape.as_slice() || e.scope != *scope || e.buffer != *buffer {
                return Err(Error::Checkpoint(format!(
                    "array {} {:?} does not match expected {name} {shape:?}",
                    e.name,
                    e.value.shape()
                )));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            num_classes,
            projection_dim,
            seed,
            entries,
            layout,
        })
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            spec: self.spec.clone(),
            num_classes: self.num_classes,
            projection_dim: self.projection_dim,
            seed: self.seed,
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    scope: e.scope,
                    buffer: e.buffer,
                    frozen: e.frozen,
                    value: e.value.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim()
    }

    pub fn freeze_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.frozen).collect()
    }

    /// Marks every parameter in `scope` as frozen (or trainable).
    pub fn set_freeze(&mut self, scope: Scope, frozen: bool) -> &mut Self {
        for e in self.entries.iter_mut().filter(|e| e.scope == scope) {
            e.frozen = frozen;
        }
        self
    }

    pub fn scope_len(&self, scope: Scope) -> usize {
        self.entries
            .iter()
            .filter(|e| e.scope == scope && !e.buffer)
            .map(|e| e.value.len())
            .sum()
    }

    /// Concatenated values of every array in `scope`, buffers included.
    pub fn scope_values(&self, scope: Scope) -> Vec<T> {
        self.entries
            .iter()
            .filter(|e| e.scope == scope)
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    /// Registers all parameters on `tape`. With `with_grad`, trainable
    /// parameters become gradient leaves; everything else is constant.
    pub fn bind(&self, tape: &mut Tape<T>, with_grad: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), with_grad && e.trainable()))
            .collect();
        BoundParams { vars }
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.value(x).shape();
        let want = [self.spec.in_channels, self.spec.image_size, self.spec.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape("encode", format!("input {s:?}, model expects (N, {want:?})")));
        }
        Ok(())
    }

    fn batch_norm(&self, tape: &mut Tape<T>, p: &BoundParams, y: Var, bn: BnIdx, mode: BnMode) -> Result<Var> {
        let (gamma, beta) = (p.vars[bn.gamma], p.vars[bn.beta]);
        match mode {
            BnMode::Train => tape.batch_norm(y, gamma, beta, T::of(BN_EPS)),
            BnMode::Eval => {
                let rm = self.entries[bn.mean].value.data();
                let rv = self.entries[bn.var].value.data();
                let inv: Vec<T> = rv.iter().map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt()).collect();
                let c = inv.len();
                let inv_t = tape.constant(Tensor::from_vec([c], inv.clone())?);
                let scale = tape.mul(gamma, inv_t)?;
                let m_inv = tape.constant(Tensor::from_vec([c], rm.iter().zip(&inv).map(|(&m, &i)| m * i).collect())?);
                let g_m = tape.mul(gamma, m_inv)?;
                let shift = tape.sub(beta, g_m)?;
                tape.channel_affine(y, Some(scale), shift)
            }
        }
    }

    fn conv_bn(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var, cb: &ConvBn, mode: BnMode) -> Result<Var> {
        let y = tape.conv2d(x, p.vars[cb.conv], cb.stride, cb.pad)?;
        self.batch_norm(tape, p, y, cb.bn, mode)
    }

    /// Encoder forward: (N, C, H, W) -> (N, embedding_dim).
    pub fn encode_on(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var, mode: BnMode) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut h = x;
        for block in &self.layout.blocks {
            h = match block {
                Block::Plain(cb) => {
                    let y = self.conv_bn(tape, p, h, cb, mode)?;
                    tape.relu(y)
                }
                Block::Residual { first, second, shortcut } => {
                    let a = self.conv_bn(tape, p, h, first, mode)?;
                    let a = tape.relu(a);
                    let b = self.conv_bn(tape, p, a, second, mode)?;
                    let skip = match shortcut {
                        Some(sc) => self.conv_bn(tape, p, h, sc, mode)?,
                        None => h,
                    };
                    let sum = tape.add(b, skip)?;
                    tape.relu(sum)
                }
            };
        }
        tape.global_avg_pool(h)
    }

    fn dense(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var, d: Dense) -> Result<Var> {
        let y = tape.matmul(x, p.vars[d.weight])?;
        tape.add_bias(y, p.vars[d.bias])
    }

    /// Projection head: dense, batch norm, relu, dense, then row-wise L2
    /// normalization.
    pub fn project_on(&self, tape: &mut Tape<T>, p: &BoundParams, emb: Var, mode: BnMode) -> Result<Var> {
        let h = self.dense(tape, p, emb, self.layout.proj_hidden)?;
        let h = self.batch_norm(tape, p, h, self.layout.proj_bn, mode)?;
        let h = tape.relu(h);
        let z = self.dense(tape, p, h, self.layout.proj_out)?;
        tape.l2_normalize(z)
    }

    /// Linear classifier head on encoder embeddings.
    pub fn classify_on(&self, tape: &mut Tape<T>, p: &BoundParams, emb: Var) -> Result<Var> {
        self.dense(tape, p, emb, self.layout.classifier)
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let e = self.encode_on(&mut tape, &p, xv, BnMode::Eval)?;
        let out = tape.value(e).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite("encoder produced a non-finite embedding".into()));
        }
        Ok(out)
    }

    pub fn project(&self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_embeddings("project", embeddings)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let e = tape.constant(embeddings.clone());
        let z = self.project_on(&mut tape, &p, e, BnMode::Eval)?;
        Ok(tape.value(z).clone())
    }

    pub fn classify(&self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_embeddings("classify", embeddings)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let e = tape.constant(embeddings.clone());
        let z = self.classify_on(&mut tape, &p, e)?;
        Ok(tape.value(z).clone())
    }

    fn check_embeddings(&self, op: &'static str, e: &Tensor<T>) -> Result<()> {
        if e.ndim() != 2 || e.shape()[1] != self.embedding_dim() {
            return Err(Error::shape(
                op,
                format!("embeddings {:?}, expected (B, {})", e.shape(), self.embedding_dim()),
            ));
        }
        Ok(())
    }

    /// Folds batch statistics from one training-mode forward pass into the
    /// running estimates: `r ← (1 − m)·r + m·batch`. `stats` covers the
    /// encoder, optionally followed by the projection head.
    pub fn update_running_stats(&mut self, stats: &[BnBatchStats<T>], momentum: T) -> Result<()> {
        let mut bns: Vec<BnIdx> = self
            .layout
            .blocks
            .iter()
            .flat_map(|b| match b {
                Block::Plain(cb) => vec![cb.bn],
                Block::Residual { first, second, shortcut } => {
                    let mut v = vec![first.bn, second.bn];
                    v.extend(shortcut.map(|s| s.bn));
                    v
                }
            })
            .collect();
        if stats.len() == bns.len() + 1 {
            bns.push(self.layout.proj_bn);
        }
        if stats.len() != bns.len() {
            return Err(Error::invalid(format!(
                "expected statistics for {} batch-norm layers, got {}",
                bns.len(),
                stats.len()
            )));
        }
        // Shortcut batch norms are recorded after the second conv of a block,
        // matching the order of `bns` above.
        for (bn, st) in bns.iter().zip(stats) {
            for (idx, src) in [(bn.mean, &st.mean), (bn.var, &st.var)] {
                let dst = self.entries[idx].value.data_mut();
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d = (T::one() - momentum) * *d + momentum * s;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelParams<f32> {
        init_params(&EncoderSpec::toy_conv([16, 32, 64], 8), 10, 3).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = EncoderSpec::toy_conv([4, 8], 8);
        let a = init_params(&spec, 10, 5).unwrap();
        let b = init_params(&spec, 10, 5).unwrap();
        let c = init_params(&spec, 10, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.entries()[0].value, c.entries()[0].value);
    }

    #[test]
    fn toy_conv_embedding_shape() {
        let m = toy();
        let x = Tensor::full([2, 3, 8, 8], 0.5f32);
        assert_eq!(m.encode(&x).unwrap().shape(), &[2, 64]);
    }

    #[test]
    fn resnet_small_embedding_shape() {
        let m = init_params(&EncoderSpec::resnet_small([8, 16], 2, 8), 10, 1).unwrap();
        let x = Tensor::full([3, 3, 8, 8], 0.25f32);
        assert_eq!(m.encode(&x).unwrap().shape(), &[3, 16]);
    }

    #[test]
    fn encode_rejects_wrong_image_size() {
        let m = toy();
        let err = m.encode(&Tensor::zeros([1, 3, 16, 16])).unwrap_err();
        assert!(err.to_string().contains("encode"));
    }

    #[test]
    fn eval_encode_has_no_cross_batch_coupling() {
        let m = toy();
        let x = Tensor::from_fn([4, 3, 8, 8], |i| ((i * 7) % 23) as f32 / 23.0);
        let all = m.encode(&x).unwrap();
        let one = m.encode(&x.slice_rows(2, 3).unwrap()).unwrap();
        assert_eq!(all.row(2), one.row(0));
    }

    #[test]
    fn zero_image_gives_finite_embedding() {
        let m = toy();
        assert!(m.encode(&Tensor::zeros([1, 3, 8, 8])).unwrap().all_finite());
    }

    #[test]
    fn projection_rows_are_unit_and_scale_invariant() {
        let m = toy();
        let e = Tensor::from_fn([5, 64], |i| ((i * 13) % 17) as f32 / 17.0 - 0.3);
        let z = m.project(&e).unwrap();
        for i in 0..5 {
            let n: f32 = z.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(z.shape(), &[5, DEFAULT_PROJECTION_DIM]);
        let z5 = m.project(&e.map(|v| v * 5.0)).unwrap();
        for (a, b) in z.data().iter().zip(z5.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dead_projection_maps_to_zero_row() {
        let mut m = toy();
        // Zero the head so a zero embedding maps to a zero vector.
        for e in m.entries_mut().iter_mut().filter(|e| e.scope == Scope::Projection) {
            e.value = Tensor::zeros(e.value.shape().to_vec());
        }
        let z = m.project(&Tensor::zeros([1, 64])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_is_affine() {
        let mut m = toy();
        let e = Tensor::from_fn([3, 64], |i| (i as f32 * 0.37).sin());
        let l1 = m.classify(&e).unwrap();
        let l2 = m.classify(&e.map(|v| 2.0 * v)).unwrap();
        let bias = m.get("classifier.bias").unwrap().value.clone();
        for i in 0..3 {
            for j in 0..10 {
                let a = l1.row(i)[j] - bias.data()[j];
                let b = l2.row(i)[j] - bias.data()[j];
                assert!((b - 2.0 * a).abs() < 1e-5);
            }
        }
        for e in m.entries_mut().iter_mut().filter(|e| e.scope == Scope::Classifier) {
            e.value = Tensor::zeros(e.value.shape().to_vec());
        }
        assert!(m.classify(&e).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_parameter_count() {
        let m = toy();
        assert_eq!(m.scope_len(Scope::Classifier), 64 * 10 + 10);
    }

    #[test]
    fn set_freeze_marks_scope_only() {
        let mut m = toy();
        m.set_freeze(Scope::Encoder, true);
        for e in m.entries() {
            assert_eq!(e.frozen, e.scope == Scope::Encoder);
        }
        m.set_freeze(Scope::Encoder, false);
        assert!(m.freeze_mask().iter().all(|&f| !f));
    }
}
