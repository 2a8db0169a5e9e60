//! Embedding networks and their on-disk checkpoint format.
//!
//! Two architectures are supported: a ReLU MLP and the four-block
//! conv → ReLU → 2x2 max-pool network, followed by a spatial mean and a
//! linear head. Parameters are He-uniform from a seed, biases start at zero.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "PMFC" | u32 version | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 rank | u64 dims[rank] | f64 payload
//! u32 metadata length | metadata JSON
//! ```

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone spec: {0}")]
    Spec(String),
    #[error("input shape {found:?} does not match backbone input {expected:?}")]
    InputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("not a checkpoint: magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("checkpoint tensor {name:?}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, BackboneError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Mlp,
    Conv4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// `[D]` for vectors, `[channels, height, width]` for images.
    pub input_shape: Vec<usize>,
    /// Hidden layer widths (mlp), or channels per block (conv4: one value
    /// shared by all four blocks, or four values).
    pub hidden_widths: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BackboneSpec {
    pub fn mlp(input_dim: usize, hidden_widths: Vec<usize>, embed_dim: usize, seed: u64) -> Self {
        Self {
            kind: BackboneKind::Mlp,
            input_shape: vec![input_dim],
            hidden_widths,
            embed_dim,
            seed,
        }
    }

    pub fn conv4(input_shape: [usize; 3], channels: usize, embed_dim: usize, seed: u64) -> Self {
        Self {
            kind: BackboneKind::Conv4,
            input_shape: input_shape.to_vec(),
            hidden_widths: vec![channels],
            embed_dim,
            seed,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(BackboneError::Spec(msg));
        if self.embed_dim < 2 {
            return fail(format!("embed_dim {} < 2", self.embed_dim));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return fail(format!("input_shape {:?} has an empty axis", self.input_shape));
        }
        if self.hidden_widths.contains(&0) {
            return fail("hidden width of 0".into());
        }
        if self.kind == BackboneKind::Conv4 {
            if self.input_shape.len() != 3 {
                return fail(format!("conv4 input must be [c, h, w], got {:?}", self.input_shape));
            }
            let (h, w) = (self.input_shape[1], self.input_shape[2]);
            if h % 16 != 0 || w % 16 != 0 {
                return fail(format!("conv4 needs height and width divisible by 16, got {h}x{w}"));
            }
            if !matches!(self.hidden_widths.len(), 1 | 4) {
                return fail(format!(
                    "conv4 takes 1 or 4 channel counts, got {}",
                    self.hidden_widths.len()
                ));
            }
        }
        Ok(())
    }

    fn conv_channels(&self) -> [usize; 4] {
        match self.hidden_widths.as_slice() {
            [c] => [*c; 4],
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => unreachable!("validated"),
        }
    }

    /// Parameter names and shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.kind {
            BackboneKind::Mlp => {
                let mut fan_in = self.input_len();
                let widths = self.hidden_widths.iter().chain(std::iter::once(&self.embed_dim));
                for (i, &width) in widths.enumerate() {
                    out.push((format!("layer{i}.weight"), vec![fan_in, width]));
                    out.push((format!("layer{i}.bias"), vec![width]));
                    fan_in = width;
                }
            }
            BackboneKind::Conv4 => {
                let mut c_in = self.input_shape[0];
                for (i, c_out) in self.conv_channels().into_iter().enumerate() {
                    out.push((format!("block{i}.conv.weight"), vec![c_out, c_in, 3, 3]));
                    c_in = c_out;
                }
                out.push(("head.weight".into(), vec![c_in, self.embed_dim]));
                out.push(("head.bias".into(), vec![self.embed_dim]));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Live parameters of an embedding network. Single-owner; tasks get their
/// own copy through [`Checkpoint::clone_for_task`].
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    params: Vec<Tensor>,
}

impl Backbone {
    pub fn build(spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data = if name.ends_with("bias") {
                    vec![0.0; n]
                } else {
                    // fan-in is every axis but the output one
                    let fan_in: usize = match shape.len() {
                        2 => shape[0],
                        _ => shape[1..].iter().product(),
                    };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { spec, params })
    }

    /// Assembles a backbone from explicit parameters, checking every shape.
    pub fn from_params(spec: BackboneSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(BackboneError::Spec(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(BackboneError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: p.shape().to_vec(),
                });
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        let idx = self.spec.param_shapes().iter().position(|(n, _)| n == name)?;
        Some(&self.params[idx])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.spec.param_shapes().iter().position(|(n, _)| n == name)?;
        Some(&mut self.params[idx])
    }

    /// Copies the parameters onto `tape` as leaves.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Records the forward pass for `batch` (`[n, ...input_shape]` or
    /// `[n, input_len]`) and returns the `[n, embed_dim]` embeddings.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], batch: Var) -> Result<Var> {
        let shape = tape.shape(batch).to_vec();
        let n = *shape.first().unwrap_or(&0);
        let item: usize = shape.iter().skip(1).product();
        if shape.len() < 2 || item != self.spec.input_len() {
            let mut expected = vec![n];
            expected.extend(&self.spec.input_shape);
            return Err(BackboneError::InputShape { expected, found: shape });
        }
        match self.spec.kind {
            BackboneKind::Mlp => {
                let mut h = if shape.len() == 2 {
                    batch
                } else {
                    tape.reshape(batch, &[n, item])?
                };
                let layers = params.chunks(2).count();
                for (i, wb) in params.chunks(2).enumerate() {
                    h = tape.matmul(h, wb[0])?;
                    h = tape.add_bias(h, wb[1])?;
                    if i + 1 < layers {
                        h = tape.relu(h);
                    }
                }
                Ok(h)
            }
            BackboneKind::Conv4 => {
                let mut image_shape = vec![n];
                image_shape.extend(&self.spec.input_shape);
                let mut h = if shape == image_shape {
                    batch
                } else {
                    tape.reshape(batch, &image_shape)?
                };
                for &kernels in &params[..4] {
                    h = tape.conv2d_3x3(h, kernels)?;
                    h = tape.relu(h);
                    h = tape.maxpool_2x2(h)?;
                }
                let pooled = tape.spatial_mean(h)?;
                let out = tape.matmul(pooled, params[4])?;
                Ok(tape.add_bias(out, params[5])?)
            }
        }
    }

    /// Embeddings without gradient tracking.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Random,
    Pretrained,
    Metatrained,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Random => "random",
            Stage::Pretrained => "pretrained",
            Stage::Metatrained => "metatrained",
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    kind: BackboneKind,
    input_shape: Vec<usize>,
    hidden_widths: Vec<usize>,
    embed_dim: usize,
    stage: Stage,
    seed: u64,
    #[serde(default)]
    config_digest: String,
}

/// Immutable snapshot of a backbone plus provenance. Safe to share across
/// threads; adaptation always happens on a [`Checkpoint::clone_for_task`] copy.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    backbone: Backbone,
    pub stage: Stage,
    pub config_digest: String,
}

impl Checkpoint {
    pub fn new(backbone: Backbone, stage: Stage, config_digest: impl Into<String>) -> Self {
        Self {
            backbone,
            stage,
            config_digest: config_digest.into(),
        }
    }

    /// Fresh randomly initialised checkpoint.
    pub fn random(spec: BackboneSpec) -> Result<Self> {
        Ok(Self::new(Backbone::build(spec)?, Stage::Random, ""))
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn spec(&self) -> &BackboneSpec {
        self.backbone.spec()
    }

    /// Independent parameter copy for one task.
    pub fn clone_for_task(&self) -> Backbone {
        self.backbone.clone()
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let shapes = self.spec().param_shapes();
        buf.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        for ((name, _), tensor) in shapes.iter().zip(self.backbone.params()) {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let spec = self.spec();
        let meta = Metadata {
            kind: spec.kind,
            input_shape: spec.input_shape.clone(),
            hidden_widths: spec.hidden_widths.clone(),
            embed_dim: spec.embed_dim,
            stage: self.stage,
            seed: spec.seed,
            config_digest: self.config_digest.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(BackboneError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(BackboneError::Version { found: version });
        }
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| BackboneError::Metadata(format!("tensor name: {e}")))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| {
                BackboneError::Metadata(format!("tensor {name:?} is too large"))
            })?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            named.push((name, Tensor::new(shape, data)?));
        }
        let meta_len = r.u32()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| BackboneError::Metadata(e.to_string()))?;

        let spec = BackboneSpec {
            kind: meta.kind,
            input_shape: meta.input_shape,
            hidden_widths: meta.hidden_widths,
            embed_dim: meta.embed_dim,
            seed: meta.seed,
        };
        spec.validate()?;
        let expected = spec.param_shapes();
        if expected.len() != named.len() {
            return Err(BackboneError::Metadata(format!(
                "spec needs {} tensors, file holds {}",
                expected.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((exp_name, exp_shape), (name, tensor)) in expected.into_iter().zip(named) {
            if exp_name != name || exp_shape != tensor.shape() {
                return Err(BackboneError::ShapeMismatch {
                    name,
                    expected: exp_shape,
                    found: tensor.shape().to_vec(),
                });
            }
            params.push(tensor);
        }
        Ok(Self::new(
            Backbone::from_params(spec, params)?,
            meta.stage,
            meta.config_digest,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.offset;
        if n > available {
            return Err(BackboneError::Truncated {
                offset: self.offset,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
