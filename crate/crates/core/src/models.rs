//! The three network architectures and checkpoint persistence.
//!
//! * [`SiameseModel`]: twin VGG19-1D encoders (shared weights) producing a
//!   128-d embedding per contour, joined by a 256-d layer and a 2-way
//!   softmax head.
//! * [`SlotFillModel`]: MLP encoder `100 → 2048 → 2048 → 20` and decoder
//!   `20 → 2048 → 2048 → 100`, trained so that `D(E(p3) − E(p1))`
//!   reconstructs the middle contour of a consecutive triple.
//! * [`DownstreamMlp`]: `input → 128 → 128 → classes` classifier.
//!
//! Contour inputs are scaled from cents to octaves (÷1200) on the way in.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use contourlab_autodiff::init::{he_uniform, xavier_uniform};
use contourlab_autodiff::{AdamState, AutodiffError, ParamId, ParamSet, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::Contour;
use crate::fsutil::write_atomic;
use crate::matrix::Matrix;
use crate::CONTOUR_LEN;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
/// Cents → network units.
pub const INPUT_SCALE: f64 = 1.0 / 1200.0;
pub const VGG_BLOCK_CONVS: [usize; 5] = [2, 2, 4, 4, 4];
pub const VGG_BASE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
pub const EMBEDDING_DIM: usize = 128;
pub const JOINT_DIM: usize = 256;
pub const SLOT_HIDDEN: usize = 2048;
pub const SLOT_BOTTLENECK: usize = 20;
pub const MLP_HIDDEN: usize = 128;
const KERNEL_WIDTH: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input has {got} values, model expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint parameter `{name}`: {msg}")]
    Parameter { name: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    He { fan_in: usize },
    Xavier { fan_in: usize, fan_out: usize },
    Zero,
}

/// One parameter of an architecture: name, shape and initializer.
#[derive(Clone, Debug, PartialEq)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn linear_specs(out: &mut Vec<ParamSpec>, name: &str, n_in: usize, n_out: usize, relu_follows: bool) {
    let init = if relu_follows {
        Init::He { fan_in: n_in }
    } else {
        Init::Xavier {
            fan_in: n_in,
            fan_out: n_out,
        }
    };
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![n_out, n_in],
        init,
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![n_out],
        init: Init::Zero,
    });
}

fn build_params<T: Real>(specs: &[ParamSpec], seed: u64) -> Result<ParamSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for s in specs {
        let t = match s.init {
            Init::He { fan_in } => he_uniform(s.shape.clone(), fan_in, &mut rng),
            Init::Xavier { fan_in, fan_out } => xavier_uniform(s.shape.clone(), fan_in, fan_out, &mut rng),
            Init::Zero => Tensor::zeros(s.shape.clone()),
        };
        ps.insert(s.name.clone(), t)?;
    }
    Ok(ps)
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn lookup<T: Real>(ps: &ParamSet<T>, name: &str) -> Self {
        Linear {
            w: ps.id(&format!("{name}.weight")).expect("weight registered"),
            b: ps.id(&format!("{name}.bias")).expect("bias registered"),
        }
    }

    fn dense<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        Ok(tape.dense(x, w, b)?)
    }

    fn conv<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        Ok(tape.conv1d(x, w, b)?)
    }
}

/// Stacks contour cent vectors into a scaled `[batch, len]` tensor.
pub fn contour_batch<T: Real>(rows: &[&[f64]], len: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(rows.len() * len);
    for r in rows {
        if r.len() != len {
            return Err(ModelError::InputLength {
                expected: len,
                got: r.len(),
            });
        }
        data.extend(r.iter().map(|&v| T::of(v * INPUT_SCALE)));
    }
    Ok(Tensor::from_vec(vec![rows.len(), len], data))
}

/// VGG19-1D encoder configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VggConfig {
    pub width_multiplier: f64,
    pub input_length: usize,
    pub embedding_dim: usize,
}

impl Default for VggConfig {
    fn default() -> Self {
        VggConfig {
            width_multiplier: 1.0,
            input_length: CONTOUR_LEN,
            embedding_dim: EMBEDDING_DIM,
        }
    }
}

impl VggConfig {
    pub fn with_width(width_multiplier: f64) -> Self {
        VggConfig {
            width_multiplier,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(ModelError::Config(format!(
                "width multiplier {} outside (0, 1]",
                self.width_multiplier
            )));
        }
        if self.input_length >> VGG_BLOCK_CONVS.len() == 0 {
            return Err(ModelError::Config(format!(
                "input length {} too short for five pooling stages",
                self.input_length
            )));
        }
        if self.embedding_dim == 0 {
            return Err(ModelError::Config("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; 5] {
        VGG_BASE_CHANNELS.map(|c| ((c as f64 * self.width_multiplier).round() as usize).max(1))
    }

    /// Spatial length after each pooling stage.
    pub fn lengths(&self) -> [usize; 5] {
        let mut l = self.input_length;
        [0; 5].map(|_| {
            l /= 2;
            l
        })
    }

    pub fn flatten_len(&self) -> usize {
        self.lengths()[4] * self.channels()[4]
    }

    fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut c_in = 1;
        for (bi, (&n_conv, &c)) in VGG_BLOCK_CONVS.iter().zip(&self.channels()).enumerate() {
            for ci in 0..n_conv {
                let name = format!("encoder.block{}.conv{}", bi + 1, ci + 1);
                out.push(ParamSpec {
                    name: format!("{name}.weight"),
                    shape: vec![c, c_in, KERNEL_WIDTH],
                    init: Init::He {
                        fan_in: c_in * KERNEL_WIDTH,
                    },
                });
                out.push(ParamSpec {
                    name: format!("{name}.bias"),
                    shape: vec![c],
                    init: Init::Zero,
                });
                c_in = c;
            }
        }
        linear_specs(&mut out, "encoder.embed", self.flatten_len(), self.embedding_dim, false);
        linear_specs(&mut out, "head.joint", 2 * self.embedding_dim, JOINT_DIM, true);
        linear_specs(&mut out, "head.logits", JOINT_DIM, 2, false);
        out
    }
}

/// Twin VGG19-1D pair classifier. Both branches run through the same
/// parameter nodes, so gradients from the two inputs accumulate together.
#[derive(Clone, Debug)]
pub struct SiameseModel<T> {
    pub config: VggConfig,
    pub params: ParamSet<T>,
    blocks: Vec<Vec<Linear>>,
    embed: Linear,
    joint: Linear,
    logits: Linear,
}

/// Graph outputs of a pair batch.
pub struct PairGraph {
    pub logits: Var,
    pub emb_a: Var,
    pub emb_b: Var,
}

impl<T: Real> SiameseModel<T> {
    pub fn new(config: VggConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config.specs(), seed)?;
        Ok(Self::from_params(config, params))
    }

    fn from_params(config: VggConfig, params: ParamSet<T>) -> Self {
        let blocks = VGG_BLOCK_CONVS
            .iter()
            .enumerate()
            .map(|(bi, &n)| {
                (0..n)
                    .map(|ci| Linear::lookup(&params, &format!("encoder.block{}.conv{}", bi + 1, ci + 1)))
                    .collect()
            })
            .collect();
        SiameseModel {
            config,
            blocks,
            embed: Linear::lookup(&params, "encoder.embed"),
            joint: Linear::lookup(&params, "head.joint"),
            logits: Linear::lookup(&params, "head.logits"),
            params,
        }
    }

    /// `[batch, input_length]` scaled contours → `[batch, embedding_dim]`.
    pub fn encode(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_length {
            return Err(ModelError::InputLength {
                expected: self.config.input_length,
                got: *shape.last().unwrap_or(&0),
            });
        }
        let mut h = tape.reshape(x, vec![shape[0], 1, shape[1]])?;
        for block in &self.blocks {
            for conv in block {
                h = conv.conv(tape, h)?;
                h = tape.relu(h);
            }
            h = tape.maxpool1d(h)?;
        }
        let flat = tape.flatten(h)?;
        self.embed.dense(tape, flat)
    }

    pub fn head(&self, tape: &mut Tape<'_, T>, emb_a: Var, emb_b: Var) -> Result<Var> {
        let joint = tape.concat(&[emb_a, emb_b])?;
        let h = self.joint.dense(tape, joint)?;
        let h = tape.relu(h);
        self.logits.dense(tape, h)
    }

    pub fn pair_graph(&self, tape: &mut Tape<'_, T>, a: &[&[f64]], b: &[&[f64]]) -> Result<PairGraph> {
        let len = self.config.input_length;
        let xa = tape.constant(contour_batch(a, len)?);
        let xb = tape.constant(contour_batch(b, len)?);
        let emb_a = self.encode(tape, xa)?;
        let emb_b = self.encode(tape, xb)?;
        let logits = self.head(tape, emb_a, emb_b)?;
        Ok(PairGraph { logits, emb_a, emb_b })
    }

    /// Mean cross-entropy of a pair batch against labels in {0, 1}.
    pub fn pair_loss(
        &self,
        tape: &mut Tape<'_, T>,
        a: &[&[f64]],
        b: &[&[f64]],
        labels: &[usize],
    ) -> Result<(Var, PairGraph)> {
        let g = self.pair_graph(tape, a, b)?;
        let loss = tape.softmax_cross_entropy(g.logits, labels)?;
        Ok((loss, g))
    }

    /// Logits and both embeddings for a single pair.
    pub fn forward(&self, a: &Contour, b: &Contour) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new(&self.params);
        let g = self.pair_graph(&mut tape, &[&a.values_cents], &[&b.values_cents])?;
        let flat = |v: Var| {
            let t = tape.value(v).to_vec();
            Tensor::from_vec(vec![t.len()], t)
        };
        Ok((flat(g.logits), flat(g.emb_a), flat(g.emb_b)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotFillConfig {
    pub input_length: usize,
    pub hidden: usize,
    pub bottleneck: usize,
}

impl Default for SlotFillConfig {
    fn default() -> Self {
        SlotFillConfig {
            input_length: CONTOUR_LEN,
            hidden: SLOT_HIDDEN,
            bottleneck: SLOT_BOTTLENECK,
        }
    }
}

impl SlotFillConfig {
    fn specs(&self) -> Vec<ParamSpec> {
        let (n, h, z) = (self.input_length, self.hidden, self.bottleneck);
        let mut out = Vec::new();
        linear_specs(&mut out, "encoder.fc1", n, h, true);
        linear_specs(&mut out, "encoder.fc2", h, h, true);
        linear_specs(&mut out, "encoder.fc3", h, z, false);
        linear_specs(&mut out, "decoder.fc1", z, h, true);
        linear_specs(&mut out, "decoder.fc2", h, h, true);
        linear_specs(&mut out, "decoder.fc3", h, n, false);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_length == 0 || self.hidden == 0 || self.bottleneck == 0 {
            return Err(ModelError::Config("slot-fill dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder/decoder pair; one `E` and one `D` serve every contour of a triple.
#[derive(Clone, Debug)]
pub struct SlotFillModel<T> {
    pub config: SlotFillConfig,
    pub params: ParamSet<T>,
    enc: [Linear; 3],
    dec: [Linear; 3],
}

/// Loss node plus its three terms: reconstruction of p1, of p3, and the
/// prediction of p2 from `E(p3) − E(p1)`.
pub struct SlotFillGraph {
    pub loss: Var,
    pub recon_first: Var,
    pub recon_last: Var,
    pub predict_middle: Var,
}

impl<T: Real> SlotFillModel<T> {
    pub fn new(config: SlotFillConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config.specs(), seed)?;
        Ok(Self::from_params(config, params))
    }

    fn from_params(config: SlotFillConfig, params: ParamSet<T>) -> Self {
        let l = |n: &str| Linear::lookup(&params, n);
        SlotFillModel {
            config,
            enc: [l("encoder.fc1"), l("encoder.fc2"), l("encoder.fc3")],
            dec: [l("decoder.fc1"), l("decoder.fc2"), l("decoder.fc3")],
            params,
        }
    }

    fn mlp(tape: &mut Tape<'_, T>, layers: &[Linear; 3], x: Var) -> Result<Var> {
        let h = layers[0].dense(tape, x)?;
        let h = tape.relu(h);
        let h = layers[1].dense(tape, h)?;
        let h = tape.relu(h);
        layers[2].dense(tape, h)
    }

    pub fn encode(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        Self::mlp(tape, &self.enc, x)
    }

    pub fn decode(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        Self::mlp(tape, &self.dec, z)
    }

    /// `[mse(D(E(p1)), p1) + mse(D(E(p3)), p3) + mse(D(E(p3) − E(p1)), p2)] / 3`
    /// over a batch of triples.
    pub fn triple_loss(
        &self,
        tape: &mut Tape<'_, T>,
        p1: &[&[f64]],
        p2: &[&[f64]],
        p3: &[&[f64]],
    ) -> Result<SlotFillGraph> {
        let n = self.config.input_length;
        let x1 = tape.constant(contour_batch(p1, n)?);
        let x2 = tape.constant(contour_batch(p2, n)?);
        let x3 = tape.constant(contour_batch(p3, n)?);
        let e1 = self.encode(tape, x1)?;
        let e3 = self.encode(tape, x3)?;
        let r1 = self.decode(tape, e1)?;
        let r3 = self.decode(tape, e3)?;
        let diff = tape.sub(e3, e1)?;
        let r2 = self.decode(tape, diff)?;
        let recon_first = tape.mse(r1, x1)?;
        let recon_last = tape.mse(r3, x3)?;
        let predict_middle = tape.mse(r2, x2)?;
        let s = tape.add(recon_first, recon_last)?;
        let s = tape.add(s, predict_middle)?;
        let loss = tape.scale(s, T::of(1.0 / 3.0));
        Ok(SlotFillGraph {
            loss,
            recon_first,
            recon_last,
            predict_middle,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden: MLP_HIDDEN,
            n_classes,
        }
    }

    fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        linear_specs(&mut out, "fc1", self.input_dim, self.hidden, true);
        linear_specs(&mut out, "fc2", self.hidden, self.hidden, true);
        linear_specs(&mut out, "fc3", self.hidden, self.n_classes, false);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.n_classes < 2 {
            return Err(ModelError::Config(
                "MLP needs positive widths and at least 2 classes".into(),
            ));
        }
        Ok(())
    }
}

/// Three-layer downstream classifier.
#[derive(Clone, Debug)]
pub struct DownstreamMlp<T> {
    pub config: MlpConfig,
    pub params: ParamSet<T>,
    layers: [Linear; 3],
}

impl<T: Real> DownstreamMlp<T> {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config.specs(), seed)?;
        Ok(Self::from_params(config, params))
    }

    fn from_params(config: MlpConfig, params: ParamSet<T>) -> Self {
        let l = |n: &str| Linear::lookup(&params, n);
        DownstreamMlp {
            config,
            layers: [l("fc1"), l("fc2"), l("fc3")],
            params,
        }
    }

    pub fn logits(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.layers[0].dense(tape, x)?;
        let h = tape.relu(h);
        let h = self.layers[1].dense(tape, h)?;
        let h = tape.relu(h);
        self.layers[2].dense(tape, h)
    }
}

/// Architecture descriptor stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Siamese(VggConfig),
    SlotFill(SlotFillConfig),
    Mlp(MlpConfig),
}

impl Architecture {
    fn specs(&self) -> Vec<ParamSpec> {
        match self {
            Architecture::Siamese(c) => c.specs(),
            Architecture::SlotFill(c) => c.specs(),
            Architecture::Mlp(c) => c.specs(),
        }
    }

    /// Parameter names and shapes in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.specs().into_iter().map(|s| (s.name, s.shape)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Width of the representation [`embed`] extracts.
    pub fn embedding_dim(&self) -> Option<usize> {
        match self {
            Architecture::Siamese(c) => Some(c.embedding_dim),
            Architecture::SlotFill(c) => Some(c.bottleneck),
            Architecture::Mlp(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Siamese(c) => c.validate(),
            Architecture::SlotFill(c) => c.validate(),
            Architecture::Mlp(c) => c.validate(),
        }
    }
}

/// A model of any kind, for code that dispatches on checkpoint contents.
#[derive(Clone, Debug)]
pub enum AnyModel<T> {
    Siamese(SiameseModel<T>),
    SlotFill(SlotFillModel<T>),
    Mlp(DownstreamMlp<T>),
}

impl<T: Real> AnyModel<T> {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        Ok(match arch {
            Architecture::Siamese(c) => AnyModel::Siamese(SiameseModel::new(c, seed)?),
            Architecture::SlotFill(c) => AnyModel::SlotFill(SlotFillModel::new(c, seed)?),
            Architecture::Mlp(c) => AnyModel::Mlp(DownstreamMlp::new(c, seed)?),
        })
    }

    fn from_params(arch: Architecture, params: ParamSet<T>) -> Self {
        match arch {
            Architecture::Siamese(c) => AnyModel::Siamese(SiameseModel::from_params(c, params)),
            Architecture::SlotFill(c) => AnyModel::SlotFill(SlotFillModel::from_params(c, params)),
            Architecture::Mlp(c) => AnyModel::Mlp(DownstreamMlp::from_params(c, params)),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            AnyModel::Siamese(m) => Architecture::Siamese(m.config),
            AnyModel::SlotFill(m) => Architecture::SlotFill(m.config),
            AnyModel::Mlp(m) => Architecture::Mlp(m.config),
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        match self {
            AnyModel::Siamese(m) => &m.params,
            AnyModel::SlotFill(m) => &m.params,
            AnyModel::Mlp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        match self {
            AnyModel::Siamese(m) => &mut m.params,
            AnyModel::SlotFill(m) => &mut m.params,
            AnyModel::Mlp(m) => &mut m.params,
        }
    }

    /// Builds the representation for a batch of contours: the 128-d Siamese
    /// embedding, or the slot-fill bottleneck code.
    pub fn embed_batch(&self, rows: &[&[f64]]) -> Result<Vec<T>> {
        match self {
            AnyModel::Siamese(m) => {
                let mut tape = Tape::new(&m.params);
                let x = tape.constant(contour_batch(rows, m.config.input_length)?);
                let e = m.encode(&mut tape, x)?;
                Ok(tape.value(e).to_vec())
            }
            AnyModel::SlotFill(m) => {
                let mut tape = Tape::new(&m.params);
                let x = tape.constant(contour_batch(rows, m.config.input_length)?);
                let e = m.encode(&mut tape, x)?;
                Ok(tape.value(e).to_vec())
            }
            AnyModel::Mlp(_) => Err(ModelError::Architecture(
                "downstream classifiers do not produce contour embeddings".into(),
            )),
        }
    }
}

/// Named tensor with base64 little-endian `f32` payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f32(name: &str, data: &str) -> Result<Vec<f32>> {
    let bytes = B64.decode(data).map_err(|e| ModelError::Parameter {
        name: name.to_string(),
        msg: format!("corrupt base64 payload: {e}"),
    })?;
    if bytes.len() % 4 != 0 {
        return Err(ModelError::Parameter {
            name: name.to_string(),
            msg: format!("payload of {} bytes is not a whole number of f32 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl StoredTensor {
    fn new(name: &str, shape: &[usize], values: &[f32]) -> Self {
        StoredTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: encode_f32(values),
        }
    }

    fn values(&self) -> Result<Vec<f32>> {
        let v = decode_f32(&self.name, &self.data)?;
        let n: usize = self.shape.iter().product();
        if v.len() != n {
            return Err(ModelError::Parameter {
                name: self.name.clone(),
                msg: format!("shape {:?} needs {n} values, payload has {}", self.shape, v.len()),
            });
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<StoredTensor>,
    pub v: Vec<StoredTensor>,
}

/// Serialized model: architecture, weights, optional optimizer state and
/// the training configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBundle {
    pub format_version: u32,
    pub architecture: Architecture,
    pub parameters: Vec<StoredTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<StoredAdam>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<serde_json::Value>,
    pub seed: u64,
}

impl CheckpointBundle {
    pub fn from_model(model: &AnyModel<f32>, seed: u64) -> Self {
        let parameters = model
            .params()
            .iter()
            .map(|(_, p)| StoredTensor::new(&p.name, p.tensor.shape(), p.tensor.data()))
            .collect();
        CheckpointBundle {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture: model.architecture(),
            parameters,
            optimizer: None,
            train_config: None,
            seed,
        }
    }

    pub fn with_optimizer(mut self, params: &ParamSet<f32>, state: &AdamState<f32>) -> Self {
        let store = |moments: &[Vec<f32>]| {
            params
                .iter()
                .zip(moments)
                .map(|((_, p), m)| StoredTensor::new(&p.name, p.tensor.shape(), m))
                .collect()
        };
        self.optimizer = Some(StoredAdam {
            lr: state.lr,
            beta1: state.beta1,
            beta2: state.beta2,
            eps: state.eps,
            t: state.t,
            m: store(&state.m),
            v: store(&state.v),
        });
        self
    }

    pub fn with_train_config(mut self, config: serde_json::Value) -> Self {
        self.train_config = Some(config);
        self
    }

    /// Checks version and that every stored tensor matches the architecture.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Version {
                found: self.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        self.architecture.validate()?;
        let expected = self.architecture.param_shapes();
        if expected.len() != self.parameters.len() {
            return Err(ModelError::Checkpoint(format!(
                "architecture has {} parameters, checkpoint stores {}",
                expected.len(),
                self.parameters.len()
            )));
        }
        for ((name, shape), stored) in expected.iter().zip(&self.parameters) {
            if &stored.name != name {
                return Err(ModelError::Parameter {
                    name: stored.name.clone(),
                    msg: format!("expected parameter `{name}` at this position"),
                });
            }
            if &stored.shape != shape {
                return Err(ModelError::Parameter {
                    name: name.clone(),
                    msg: format!("stored shape {:?}, architecture needs {shape:?}", stored.shape),
                });
            }
            stored.values()?;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<AnyModel<f32>> {
        self.validate()?;
        let mut ps = ParamSet::new();
        for stored in &self.parameters {
            ps.insert(
                stored.name.clone(),
                Tensor::try_from_vec(stored.shape.clone(), stored.values()?)?,
            )?;
        }
        Ok(AnyModel::from_params(self.architecture, ps))
    }

    pub fn optimizer_state(&self) -> Result<Option<AdamState<f32>>> {
        let Some(o) = &self.optimizer else {
            return Ok(None);
        };
        let load = |ts: &[StoredTensor]| ts.iter().map(StoredTensor::values).collect::<Result<Vec<_>>>();
        Ok(Some(AdamState {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            t: o.t,
            m: load(&o.m)?,
            v: load(&o.v)?,
        }))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: CheckpointBundle =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        b.validate()?;
        Ok(b)
    }
}

pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    write_atomic(path, bundle.to_json().as_bytes()).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    CheckpointBundle::from_json(&text)
}

/// Contours per forward pass during embedding; fixed so results never
/// depend on how work is split.
pub const EMBED_CHUNK: usize = 256;

/// Embeds contours with the checkpoint's encoder, one row per contour in
/// input order, columns `e000…`.
pub fn embed(bundle: &CheckpointBundle, contours: &[Contour]) -> Result<Matrix> {
    let dim = bundle
        .architecture
        .embedding_dim()
        .ok_or_else(|| ModelError::Architecture("checkpoint holds a downstream classifier".into()))?;
    let model = bundle.model()?;
    embed_with(&model, dim, contours)
}

pub fn embed_with(model: &AnyModel<f32>, dim: usize, contours: &[Contour]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(contours.len() * dim);
    for chunk in contours.chunks(EMBED_CHUNK) {
        let rows: Vec<&[f64]> = chunk.iter().map(|c| c.values_cents.as_slice()).collect();
        data.extend(model.embed_batch(&rows)?.into_iter().map(f64::from));
    }
    Ok(Matrix::new(Matrix::numbered_columns("e", dim), contours.len(), data)
        .expect("embedding width matches"))
}
