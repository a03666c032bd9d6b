//! Network constructors and model instances.
//!
//! A [`ModelSpec`] is pure data (serializable, hashable); a [`Model`] pairs
//! one with parameter tensors and batch-norm buffers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::kinematics::JOINTS;
use crate::nn::ops::{Mode, RunningStats};
use crate::nn::{
    check_function_sampled, project_to_scalar, Checkpoint, GradCheckReport, LayerSpec, NnError, NodeId, Rng, Scalar, Tape,
    Tensor,
};
use crate::synthgen::SceneConfig;

pub const SIZE_CLASSES: usize = 4;
pub const SHAPE_CLASSES: usize = 2;
pub const HIDDEN: usize = 32;
pub const EMBED_DIM: usize = 8;
pub const PROPRIO_FILTERS: [usize; 4] = [16, 32, 64, 64];
/// Init bound multiplier for convolutions feeding a batch-norm layer. Their
/// output scale is normalized away, so a small start only raises the
/// relative size of early Adam steps.
pub const BN_CONV_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedLayer {
    pub name: String,
    #[serde(flatten)]
    pub spec: LayerSpec,
}

fn layer(name: impl Into<String>, spec: LayerSpec) -> NamedLayer {
    NamedLayer { name: name.into(), spec }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Topology {
    Sequential { layers: Vec<NamedLayer> },
    /// The main input runs through `angle_path`, the one-hot label through
    /// `label_path`; `merge` (concat or incorporator) joins them and `head`
    /// produces the output.
    Merge { angle_path: Vec<NamedLayer>, label_path: Vec<NamedLayer>, merge: NamedLayer, head: Vec<NamedLayer> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample shape of the main input.
    pub input: Vec<usize>,
    /// Number of label classes fed alongside the main input, if any.
    pub label_classes: Option<usize>,
    /// Width of the flat output.
    pub outputs: usize,
    pub topology: Topology,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn spec_err<T>(m: impl Into<String>) -> Result<T, ModelError> {
    Err(ModelError::Spec(m.into()))
}

/// Per-sample output shape of `layer` applied to `input`.
fn infer(layer: &NamedLayer, input: &[usize], label: Option<&[usize]>) -> Result<Vec<usize>, ModelError> {
    layer.spec.validate()?;
    let fail = |m: String| spec_err(format!("{} ({}): {m}", layer.name, layer.spec.kind()));
    match layer.spec {
        LayerSpec::Conv2d { in_channels, filters, kernel, stride, padding } => {
            let [c, h, w] = input[..] else { return fail(format!("needs [C,H,W], got {input:?}")) };
            if c != in_channels {
                return fail(format!("expects {in_channels} channels, got {c}"));
            }
            if h + 2 * padding < kernel || w + 2 * padding < kernel {
                return fail(format!("{h}x{w} input is smaller than kernel {kernel}"));
            }
            Ok(vec![filters, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1])
        }
        LayerSpec::Batchnorm { channels } => {
            if input.first() != Some(&channels) {
                return fail(format!("expects {channels} channels, got {input:?}"));
            }
            Ok(input.to_vec())
        }
        LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
        LayerSpec::Softmax => {
            if input.len() != 1 {
                return fail(format!("needs a flat input, got {input:?}"));
            }
            Ok(input.to_vec())
        }
        LayerSpec::Maxpool2d { kernel, stride } => {
            let [c, h, w] = input[..] else { return fail(format!("needs [C,H,W], got {input:?}")) };
            if h < kernel || w < kernel {
                return fail(format!("{h}x{w} input is smaller than pool {kernel}"));
            }
            Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
        }
        LayerSpec::Linear { inputs, units } => {
            let n: usize = input.iter().product();
            if n != inputs {
                return fail(format!("expects {inputs} features, got {input:?}"));
            }
            Ok(vec![units])
        }
        LayerSpec::Concat => {
            let (Some(&a), Some(b)) = (input.first(), label) else { return fail("needs two inputs".into()) };
            if input.len() != 1 || b.len() != 1 {
                return fail("concat joins flat features".into());
            }
            Ok(vec![a + b[0]])
        }
        LayerSpec::Incorporator { classes, features, .. } => {
            if input != [features] {
                return fail(format!("feature must be [{features}], got {input:?}"));
            }
            if label != Some(&[classes][..]) {
                return fail(format!("label must be one-hot over {classes} classes"));
            }
            Ok(input.to_vec())
        }
    }
}

fn infer_chain(layers: &[NamedLayer], mut shape: Vec<usize>) -> Result<Vec<usize>, ModelError> {
    for l in layers {
        shape = infer(l, &shape, None)?;
    }
    Ok(shape)
}

impl ModelSpec {
    /// Checks shape compatibility along every path and unique layer names.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut names = std::collections::BTreeSet::new();
        for l in self.layers() {
            if !names.insert(l.name.as_str()) {
                return spec_err(format!("duplicate layer name {}", l.name));
            }
        }
        let out = match &self.topology {
            Topology::Sequential { layers } => {
                if self.label_classes.is_some() {
                    return spec_err("sequential models take no label");
                }
                infer_chain(layers, self.input.clone())?
            }
            Topology::Merge { angle_path, label_path, merge, head } => {
                let Some(k) = self.label_classes else { return spec_err("merge models need a label input") };
                let a = infer_chain(angle_path, self.input.clone())?;
                let b = infer_chain(label_path, vec![k])?;
                let m = infer(merge, &a, Some(&b))?;
                if !matches!(merge.spec, LayerSpec::Concat | LayerSpec::Incorporator { .. }) {
                    return spec_err("merge layer must be concat or incorporator");
                }
                infer_chain(head, m)?
            }
        };
        if out.iter().product::<usize>() != self.outputs {
            return spec_err(format!("network produces {out:?}, spec declares {} outputs", self.outputs));
        }
        Ok(())
    }

    /// All layers in execution order: angle path, label path, merge, head.
    pub fn layers(&self) -> Vec<&NamedLayer> {
        match &self.topology {
            Topology::Sequential { layers } => layers.iter().collect(),
            Topology::Merge { angle_path, label_path, merge, head } => {
                angle_path.iter().chain(label_path).chain(std::iter::once(merge)).chain(head).collect()
            }
        }
    }

    /// Parameter names and shapes in declaration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .iter()
            .flat_map(|l| l.spec.param_shapes().into_iter().map(move |(p, s)| (format!("{}.{p}", l.name), s)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// SHA-256 of the JSON serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }
}

fn conv_bn_relu(out: &mut Vec<NamedLayer>, i: usize, cin: usize, filters: usize) {
    out.push(layer(
        format!("conv{i}"),
        LayerSpec::Conv2d { in_channels: cin, filters, kernel: 3, stride: 2, padding: 1 },
    ));
    out.push(layer(format!("bn{i}"), LayerSpec::Batchnorm { channels: filters }));
    out.push(layer(format!("relu{i}"), LayerSpec::Relu));
}

/// Four Conv-BN-ReLU blocks (3x3, stride 2, padding 1) and a final
/// convolution spanning the remaining extent, with a sigmoid, giving the six
/// joint targets.
pub fn build_proprio_cnn(cameras: usize, cfg: &SceneConfig) -> Result<ModelSpec, ModelError> {
    if !(1..=2).contains(&cameras) {
        return spec_err(format!("cameras must be 1 or 2, got {cameras}"));
    }
    if cfg.height < 16 || cfg.width < 16 {
        return spec_err(format!("{}x{} image is too small for four stride-2 layers", cfg.height, cfg.width));
    }
    let mut layers = Vec::new();
    let mut cin = cameras;
    let (mut h, mut w) = (cfg.height, cfg.width);
    for (i, &f) in PROPRIO_FILTERS.iter().enumerate() {
        conv_bn_relu(&mut layers, i + 1, cin, f);
        cin = f;
        h = (h + 1) / 2;
        w = (w + 1) / 2;
    }
    if h != w {
        return spec_err(format!("final feature map {h}x{w} is not square"));
    }
    layers.push(layer("head", LayerSpec::Conv2d { in_channels: cin, filters: JOINTS, kernel: h, stride: 1, padding: 0 }));
    layers.push(layer("out", LayerSpec::Sigmoid));
    let spec = ModelSpec {
        name: format!("proprio_cnn_{cameras}cam"),
        input: vec![cameras, cfg.height, cfg.width],
        label_classes: None,
        outputs: JOINTS,
        topology: Topology::Sequential { layers },
    };
    spec.validate()?;
    Ok(spec)
}

/// Two 5x5 conv / ReLU / 2x2 max-pool stages, a 120-unit ReLU layer and a
/// softmax over box and cylinder.
pub fn build_tactile_lenet(window: usize) -> Result<ModelSpec, ModelError> {
    let mut layers = Vec::new();
    let mut side = window;
    let mut cin = 1;
    for (i, f) in [6usize, 16].into_iter().enumerate() {
        layers.push(layer(
            format!("conv{}", i + 1),
            LayerSpec::Conv2d { in_channels: cin, filters: f, kernel: 5, stride: 1, padding: 0 },
        ));
        layers.push(layer(format!("relu{}", i + 1), LayerSpec::Relu));
        layers.push(layer(format!("pool{}", i + 1), LayerSpec::Maxpool2d { kernel: 2, stride: 2 }));
        if side < 5 {
            return spec_err(format!("tactile window {window} is too small for LeNet"));
        }
        side = (side - 4) / 2;
        cin = f;
        if side == 0 {
            return spec_err(format!("tactile window {window} is too small for LeNet"));
        }
    }
    layers.push(layer("fc1", LayerSpec::Linear { inputs: cin * side * side, units: 120 }));
    layers.push(layer("relu3", LayerSpec::Relu));
    layers.push(layer("fc2", LayerSpec::Linear { inputs: 120, units: SHAPE_CLASSES }));
    layers.push(layer("out", LayerSpec::Softmax));
    let spec = ModelSpec {
        name: "tactile_lenet".into(),
        input: vec![1, window, window],
        label_classes: None,
        outputs: SHAPE_CLASSES,
        topology: Topology::Sequential { layers },
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeArch {
    /// One MLP over angles concatenated with the one-hot label.
    Mlp,
    /// Separate angle and label MLPs, concatenated, then a head.
    TwoPath,
    /// Angle MLP modulated by the label through an incorporator node.
    Incorporator,
    /// Angle MLP and head without any label; reference for the incorporator.
    AngleOnly,
}

impl std::str::FromStr for SizeArch {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "two_path" => Ok(Self::TwoPath),
            "incorporator" => Ok(Self::Incorporator),
            "angle_only" => Ok(Self::AngleOnly),
            _ => spec_err(format!("unknown size architecture {s:?} (mlp, two_path, incorporator, angle_only)")),
        }
    }
}

fn mlp_path(prefix: &str, inputs: usize, depth: usize) -> Vec<NamedLayer> {
    let mut out = Vec::new();
    let mut n = inputs;
    for i in 1..=depth {
        out.push(layer(format!("{prefix}.fc{i}"), LayerSpec::Linear { inputs: n, units: HIDDEN }));
        out.push(layer(format!("{prefix}.relu{i}"), LayerSpec::Relu));
        n = HIDDEN;
    }
    out
}

fn size_head(inputs: usize) -> Vec<NamedLayer> {
    vec![
        layer("head.fc1", LayerSpec::Linear { inputs, units: HIDDEN }),
        layer("head.relu1", LayerSpec::Relu),
        layer("head.fc2", LayerSpec::Linear { inputs: HIDDEN, units: SIZE_CLASSES }),
        layer("head.out", LayerSpec::Softmax),
    ]
}

/// Size classifier over six angles (and the shape label). Every variant
/// ends in the same two-layer head of width 32.
pub fn build_size_estimator(arch: SizeArch) -> Result<ModelSpec, ModelError> {
    let k = SHAPE_CLASSES;
    let (label_classes, topology) = match arch {
        SizeArch::Mlp => {
            // The depth the other variants spend in their angle path goes
            // after the concatenation here.
            let mut head = mlp_path("joint", JOINTS + k, 2);
            head.extend(size_head(HIDDEN));
            (Some(k), Topology::Merge { angle_path: vec![], label_path: vec![], merge: layer("concat", LayerSpec::Concat), head })
        }
        SizeArch::TwoPath => (
            Some(k),
            Topology::Merge {
                angle_path: mlp_path("angle", JOINTS, 2),
                label_path: mlp_path("label", k, 2),
                merge: layer("concat", LayerSpec::Concat),
                head: size_head(2 * HIDDEN),
            },
        ),
        SizeArch::Incorporator => (
            Some(k),
            Topology::Merge {
                angle_path: mlp_path("angle", JOINTS, 2),
                label_path: vec![],
                merge: layer("incorporator", LayerSpec::Incorporator { classes: k, embed_dim: EMBED_DIM, features: HIDDEN }),
                head: size_head(HIDDEN),
            },
        ),
        SizeArch::AngleOnly => {
            let mut layers = mlp_path("angle", JOINTS, 2);
            layers.extend(size_head(HIDDEN));
            (None, Topology::Sequential { layers })
        }
    };
    let name = match arch {
        SizeArch::Mlp => "size_mlp",
        SizeArch::TwoPath => "size_two_path",
        SizeArch::Incorporator => "size_incorporator",
        SizeArch::AngleOnly => "size_angle_only",
    };
    let spec = ModelSpec { name: name.into(), input: vec![JOINTS], label_classes, outputs: SIZE_CLASSES, topology };
    spec.validate()?;
    Ok(spec)
}

/// The tensors of one incorporator node: `f * (1 + gamma) + beta` with
/// `gamma = e W_g + b_g`, `beta = e W_b + b_b` and `e` the label embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct IncorporatorParams<T> {
    pub embedding: Tensor<T>,
    pub gamma_weight: Tensor<T>,
    pub gamma_bias: Tensor<T>,
    pub beta_weight: Tensor<T>,
    pub beta_bias: Tensor<T>,
}

impl<T: Scalar> IncorporatorParams<T> {
    /// Embedding drawn at random, both maps zero.
    pub fn identity(classes: usize, embed_dim: usize, features: usize, rng: &mut Rng) -> Self {
        let e: Vec<f64> = (0..classes * embed_dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        Self {
            embedding: Tensor::from_f64(&[classes, embed_dim], &e).expect("shape"),
            gamma_weight: Tensor::zeros(&[embed_dim, features]),
            gamma_bias: Tensor::zeros(&[features]),
            beta_weight: Tensor::zeros(&[embed_dim, features]),
            beta_bias: Tensor::zeros(&[features]),
        }
    }

    pub fn classes(&self) -> usize {
        self.embedding.dim(0)
    }

    fn tensors(&self) -> [&Tensor<T>; 5] {
        [&self.embedding, &self.gamma_weight, &self.gamma_bias, &self.beta_weight, &self.beta_bias]
    }
}

/// Applies the incorporator to a batch of features `f: [N, F]` with one
/// label per row.
pub fn incorporate<T: Scalar>(f: &Tensor<T>, labels: &[usize], p: &IncorporatorParams<T>) -> Result<Tensor<T>, ModelError> {
    let k = p.classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return spec_err(format!("label {bad} is not one of {k} classes"));
    }
    if f.rank() != 2 || f.dim(0) != labels.len() {
        return spec_err(format!("features {:?} do not match {} labels", f.shape(), labels.len()));
    }
    let spec = LayerSpec::Incorporator { classes: k, embed_dim: p.embedding.dim(1), features: f.dim(1) };
    let mut tape = Tape::new();
    let fx = tape.input(f.clone());
    let lx = tape.input(crate::nn::one_hot(labels, k));
    let params: Vec<NodeId> = p.tensors().iter().enumerate().map(|(i, t)| tape.param(i, (*t).clone())).collect();
    let out = spec.apply(&mut tape, &[fx, lx], &params, None, Mode::Eval)?;
    Ok(tape.value(out).clone())
}

/// Inputs for one batch: the main tensor `[N, ...]` and, for merge models,
/// one label per row.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub labels: Option<Vec<usize>>,
}

/// A model spec with its parameters and batch-norm buffers.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    /// Running statistics of every batch-norm layer, by layer name.
    pub running: BTreeMap<String, RunningStats<T>>,
}

/// Result of a forward pass recorded on a tape.
pub struct Forward {
    pub input: NodeId,
    pub output: NodeId,
    pub params: Vec<NodeId>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters. Each tensor draws from a stream keyed by its name,
    /// so layers that share a name across models start identical.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let root = Rng::new(seed).split_named("init");
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut running = BTreeMap::new();
        let layers = spec.layers();
        for (li, l) in layers.iter().enumerate() {
            let feeds_bn = matches!(layers.get(li + 1).map(|n| &n.spec), Some(LayerSpec::Batchnorm { .. }));
            let gain = if feeds_bn { BN_CONV_INIT_GAIN } else { 1.0 };
            let fan_in = match l.spec {
                LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
                LayerSpec::Linear { inputs, .. } => inputs,
                LayerSpec::Incorporator { embed_dim, .. } => embed_dim,
                _ => 1,
            };
            if let LayerSpec::Batchnorm { channels } = l.spec {
                running.insert(l.name.clone(), RunningStats::new(channels));
            }
            for (p, shape) in l.spec.param_shapes() {
                let name = format!("{}.{p}", l.name);
                let mut rng = root.split_named(&name);
                let n: usize = shape.iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let values: Vec<f64> = match (&l.spec, p) {
                    (LayerSpec::Batchnorm { .. }, "gamma") => vec![1.0; n],
                    (LayerSpec::Batchnorm { .. }, "beta") => vec![0.0; n],
                    (LayerSpec::Incorporator { .. }, "embedding") => (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                    (LayerSpec::Incorporator { .. }, "gamma_bias" | "beta_bias") => vec![0.0; n],
                    (_, "weight") => (0..n).map(|_| rng.uniform_range(-gain * bound, gain * bound)).collect(),
                    _ => (0..n).map(|_| rng.uniform_range(-bound, bound)).collect(),
                };
                names.push(name);
                params.push(Tensor::from_f64(&shape, &values)?);
            }
        }
        Ok(Self { spec: spec.clone(), names, params, running })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Records a forward pass. In train mode batch-norm buffers are updated.
    pub fn forward(&mut self, tape: &mut Tape<T>, batch: &Batch<T>, mode: Mode) -> Result<Forward, ModelError> {
        let spec = &self.spec;
        let n = batch.x.dim(0);
        let mut want = vec![n];
        want.extend_from_slice(&spec.input);
        if batch.x.shape() != want.as_slice() {
            return spec_err(format!("{} expects input {want:?}, got {:?}", spec.name, batch.x.shape()));
        }
        let param_nodes: Vec<NodeId> = self.params.iter().enumerate().map(|(i, p)| tape.param(i, p.clone())).collect();
        let mut cursor = 0;
        let running = &mut self.running;
        let mut run = |tape: &mut Tape<T>, l: &NamedLayer, inputs: &[NodeId]| -> Result<NodeId, ModelError> {
            let k = l.spec.param_shapes().len();
            let ps = &param_nodes[cursor..cursor + k];
            cursor += k;
            Ok(l.spec.apply(tape, inputs, ps, running.get_mut(&l.name), mode)?)
        };
        let x = tape.input(batch.x.clone());
        let out = match &spec.topology {
            Topology::Sequential { layers } => {
                let mut h = x;
                for l in layers {
                    h = run(tape, l, &[h])?;
                }
                h
            }
            Topology::Merge { angle_path, label_path, merge, head } => {
                let k = spec.label_classes.expect("validated");
                let labels = batch.labels.as_ref().ok_or_else(|| ModelError::Spec(format!("{} needs labels", spec.name)))?;
                if labels.len() != n || labels.iter().any(|&l| l >= k) {
                    return spec_err(format!("{} needs {n} labels below {k}", spec.name));
                }
                let mut a = x;
                for l in angle_path {
                    a = run(tape, l, &[a])?;
                }
                let mut b = tape.input(crate::nn::one_hot(labels, k));
                for l in label_path {
                    b = run(tape, l, &[b])?;
                }
                let mut h = run(tape, merge, &[a, b])?;
                for l in head {
                    h = run(tape, l, &[h])?;
                }
                h
            }
        };
        let output = tape.reshape(out, &[n, spec.outputs])?;
        Ok(Forward { input: x, output, params: param_nodes })
    }

    /// Eval-mode outputs `[N, outputs]`.
    pub fn predict(&mut self, batch: &Batch<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, Mode::Eval)?;
        Ok(tape.value(f.output).clone())
    }

    /// Parameters followed by batch-norm buffers, all by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        for (name, rs) in &self.running {
            out.push((format!("{name}.running_mean"), rs.mean.clone()));
            out.push((format!("{name}.running_var"), rs.var.clone()));
        }
        out
    }

    pub fn to_checkpoint(&self, seed: u64, extra: serde_json::Value) -> Checkpoint {
        let tensors = self.named_tensors().into_iter().map(|(n, t)| (n, t.cast::<f32>())).collect();
        Checkpoint::new(seed, serde_json::to_value(&self.spec).expect("spec serializes"), tensors, extra)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let spec: ModelSpec = serde_json::from_value(ck.header.model.clone())
            .map_err(|e| ModelError::Spec(format!("checkpoint model spec: {e}")))?;
        let mut m = Self::init(&spec, ck.header.seed)?;
        let get = |name: &str, shape: &[usize]| -> Result<Tensor<T>, ModelError> {
            let t = ck.tensor(name).ok_or_else(|| ModelError::Spec(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape {
                return spec_err(format!("checkpoint tensor {name} has shape {:?}, expected {shape:?}", t.shape()));
            }
            Ok(t.cast())
        };
        for i in 0..m.params.len() {
            m.params[i] = get(&m.names[i], m.params[i].shape())?;
        }
        for (name, rs) in m.running.iter_mut() {
            rs.mean = get(&format!("{name}.running_mean"), rs.mean.shape())?;
            rs.var = get(&format!("{name}.running_var"), rs.var.shape())?;
        }
        if ck.header.tensors.len() != m.params.len() + 2 * m.running.len() {
            return spec_err("checkpoint holds tensors the model does not use");
        }
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self
                .running
                .iter()
                .map(|(k, r)| (k.clone(), RunningStats { mean: r.mean.cast(), var: r.var.cast() }))
                .collect(),
        }
    }
}

/// End-to-end gradient check of `model` at `batch`: every parameter and the
/// main input, through a fixed random projection of the output. Batch-norm
/// layers run in train mode.
pub fn grad_check_model<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport, ModelError> {
    let proj_rng = rng.split_named("projection");
    let mut tensors: Vec<(String, Tensor<T>)> = model.names.iter().cloned().zip(model.params.iter().cloned()).collect();
    tensors.push(("input".into(), batch.x.clone()));
    let np = model.params.len();
    let report = check_function_sampled(&mut tensors, max_coords, rng, |ts| {
        let mut m = model.clone();
        for (p, (_, t)) in m.params.iter_mut().zip(ts) {
            *p = t.clone();
        }
        let b = Batch { x: ts[np].1.clone(), labels: batch.labels.clone() };
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &b, Mode::Train).map_err(|e| NnError::Invalid(e.to_string()))?;
        let x = f.input;
        let loss = project_to_scalar(&mut tape, f.output, &mut proj_rng.clone())?;
        let g = tape.backward(loss)?;
        let mut grads: Vec<Tensor<T>> =
            (0..np).map(|i| g.param(i).unwrap_or_else(|| Tensor::zeros(ts[i].1.shape()))).collect();
        grads.push(g.node(x).cloned().unwrap_or_else(|| Tensor::zeros(ts[np].1.shape())));
        Ok((tape.value(loss).data()[0].as_f64(), grads))
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneConfig {
        SceneConfig::default()
    }

    fn rand_batch<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
        let n: usize = shape.iter().product();
        Tensor::from_f64(shape, &(0..n).map(|_| rng.uniform()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn proprio_shapes_and_range() {
        let spec = build_proprio_cnn(1, &cfg()).unwrap();
        let mut m = Model::<f32>::init(&spec, 0).unwrap();
        let x = rand_batch(&[3, 1, 64, 64], &mut Rng::new(1));
        let y = m.predict(&Batch { x, labels: None }).unwrap();
        assert_eq!(y.shape(), &[3, 6]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn second_camera_only_widens_the_first_layer() {
        let one = build_proprio_cnn(1, &cfg()).unwrap();
        let two = build_proprio_cnn(2, &cfg()).unwrap();
        let (a, b) = (one.param_shapes(), two.param_shapes());
        assert_eq!(b[0].1, vec![16, 2, 3, 3]);
        assert_eq!(&a[1..], &b[1..]);
        assert_eq!(two.param_count() - one.param_count(), 3 * 3 * 16);
        assert!(build_proprio_cnn(3, &cfg()).is_err());
        let tiny = SceneConfig { width: 8, height: 8, ..cfg() };
        assert!(build_proprio_cnn(1, &tiny).is_err());
    }

    #[test]
    fn lenet_structure() {
        let spec = build_tactile_lenet(32).unwrap();
        let kinds: Vec<_> = spec.layers().iter().filter(|l| l.spec.is_trainable()).map(|l| l.spec.kind()).collect();
        assert_eq!(kinds, ["conv2d", "conv2d", "linear", "linear"]);
        let mut m = Model::<f32>::init(&spec, 0).unwrap();
        let y = m.predict(&Batch { x: Tensor::zeros(&[2, 1, 32, 32]), labels: None }).unwrap();
        for row in y.data().chunks(2) {
            assert!(row.iter().all(|v| v.is_finite()));
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
        assert_eq!(y.data()[0], y.data()[2]);
        assert!(build_tactile_lenet(8).is_err());
    }

    #[test]
    fn size_estimators_emit_distributions() {
        for arch in [SizeArch::Mlp, SizeArch::TwoPath, SizeArch::Incorporator] {
            let spec = build_size_estimator(arch).unwrap();
            let mut m = Model::<f64>::init(&spec, 3).unwrap();
            let x = rand_batch(&[5, 6], &mut Rng::new(2));
            let y = m.predict(&Batch { x, labels: Some(vec![0, 1, 1, 0, 1]) }).unwrap();
            for row in y.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let mlp = build_size_estimator(SizeArch::Mlp).unwrap();
        assert_eq!(mlp.param_shapes()[0].1, vec![8, 32]);
        assert!("resnet".parse::<SizeArch>().is_err());
    }

    #[test]
    fn incorporate_identity_and_offset() {
        let mut rng = Rng::new(4);
        let p = IncorporatorParams::<f64>::identity(2, 8, 5, &mut rng);
        let f = rand_batch::<f64>(&[3, 5], &mut rng);
        assert_eq!(incorporate(&f, &[0, 1, 1], &p).unwrap(), f);
        let mut q = p.clone();
        q.beta_bias = Tensor::from_f64(&[5], &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        q.gamma_weight = rand_batch(&[8, 5], &mut rng);
        let out = incorporate(&Tensor::zeros(&[1, 5]), &[1], &q).unwrap();
        assert_eq!(out.data(), q.beta_bias.data());
        assert!(incorporate(&f, &[0, 2, 1], &p).is_err());
    }

    #[test]
    fn zeroed_incorporator_matches_angle_only_model() {
        let inc = build_size_estimator(SizeArch::Incorporator).unwrap();
        let plain = build_size_estimator(SizeArch::AngleOnly).unwrap();
        let mut a = Model::<f64>::init(&inc, 9).unwrap();
        let mut b = Model::<f64>::init(&plain, 9).unwrap();
        for name in ["gamma_weight", "gamma_bias", "beta_weight", "beta_bias"] {
            let i = a.param_index(&format!("incorporator.{name}")).unwrap();
            a.params[i] = Tensor::zeros(a.params[i].shape());
        }
        let x = rand_batch::<f64>(&[4, 6], &mut Rng::new(0));
        let ya = a.predict(&Batch { x: x.clone(), labels: Some(vec![0, 1, 0, 1]) }).unwrap();
        let yb = b.predict(&Batch { x, labels: None }).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn spec_hash_is_stable() {
        assert_eq!(build_proprio_cnn(1, &cfg()).unwrap().hash(), build_proprio_cnn(1, &cfg()).unwrap().hash());
        assert_ne!(build_proprio_cnn(1, &cfg()).unwrap().hash(), build_proprio_cnn(2, &cfg()).unwrap().hash());
    }

    #[test]
    fn checkpoint_roundtrip_keeps_predictions() {
        let spec = build_proprio_cnn(1, &SceneConfig { width: 16, height: 16, ..cfg() }).unwrap();
        let mut m = Model::<f32>::init(&spec, 5).unwrap();
        let x = rand_batch::<f32>(&[4, 1, 16, 16], &mut Rng::new(3));
        // Move the buffers away from their initial values.
        let mut tape = Tape::new();
        m.forward(&mut tape, &Batch { x: x.clone(), labels: None }, Mode::Train).unwrap();
        let ck = m.to_checkpoint(5, serde_json::Value::Null);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let mut back = Model::<f32>::from_checkpoint(&Checkpoint::read_from(&buf[..]).unwrap()).unwrap();
        let b = Batch { x, labels: None };
        assert_eq!(back.predict(&b).unwrap(), m.predict(&b).unwrap());
    }

    fn all_specs() -> Vec<ModelSpec> {
        let small = SceneConfig { width: 16, height: 16, ..cfg() };
        vec![
            build_proprio_cnn(1, &small).unwrap(),
            build_proprio_cnn(2, &small).unwrap(),
            build_tactile_lenet(16).unwrap(),
            build_size_estimator(SizeArch::Mlp).unwrap(),
            build_size_estimator(SizeArch::TwoPath).unwrap(),
            build_size_estimator(SizeArch::Incorporator).unwrap(),
        ]
    }

    #[test]
    fn full_models_pass_gradient_check() {
        for spec in all_specs() {
            let m = Model::<f64>::init(&spec, 1).unwrap();
            let mut rng = Rng::new(2);
            let mut shape = vec![3];
            shape.extend_from_slice(&spec.input);
            let x = rand_batch(&shape, &mut rng);
            let labels = spec.label_classes.map(|_| vec![0, 1, 1]);
            let r = grad_check_model(&m, &Batch { x, labels }, 6, &mut rng).unwrap();
            assert!(r.max_rel_error < 1e-4, "{}: {r:?}", spec.name);
        }
    }

    #[test]
    fn incorporate_jacobian_is_diagonal() {
        let mut rng = Rng::new(6);
        let mut p = IncorporatorParams::<f64>::identity(2, 4, 3, &mut rng);
        p.gamma_weight = rand_batch(&[4, 3], &mut rng);
        p.gamma_bias = rand_batch(&[3], &mut rng);
        let f = rand_batch::<f64>(&[1, 3], &mut rng);
        let base = incorporate(&f, &[1], &p).unwrap();
        let e = &p.embedding.data()[4..8];
        for j in 0..3 {
            let gamma: f64 = (0..4).map(|k| e[k] * p.gamma_weight.data()[k * 3 + j]).sum::<f64>() + p.gamma_bias.data()[j];
            let mut g = f.clone();
            g.data_mut()[j] += 1e-6;
            let out = incorporate(&g, &[1], &p).unwrap();
            for i in 0..3 {
                let d = (out.data()[i] - base.data()[i]) / 1e-6;
                let want = if i == j { 1.0 + gamma } else { 0.0 };
                assert!((d - want).abs() < 1e-4, "{i} {j}: {d} vs {want}");
            }
        }
    }

    #[test]
    fn mismatched_spec_is_rejected() {
        let mut spec = build_tactile_lenet(32).unwrap();
        spec.outputs = 3;
        assert!(spec.validate().is_err());
        let mut spec = build_size_estimator(SizeArch::TwoPath).unwrap();
        if let Topology::Merge { head, .. } = &mut spec.topology {
            head[0].spec = LayerSpec::Linear { inputs: 10, units: HIDDEN };
        }
        assert!(spec.validate().is_err());
    }
}
