//! Teacher and student networks.
//!
//! Both roles share one architecture family: a stack of strided 1-d
//! convolutions over the spectrogram frames, a framewise feed-forward
//! stack, a linear projection to the latent space, and a mean-pool over
//! the remaining frames. The teacher is a wider instance and is always
//! frozen; the student additionally carries a classifier head mapping the
//! latent vector to intent logits. Teacher and student must agree on the
//! latent dimension, since feature distillation compares the two latent
//! vectors coordinate by coordinate.
//!
//! Activations live in time-major `(frames, channels)` layout so biases
//! are last-axis broadcasts.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::dsp::MelSpectrogram;
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {got} mel channels, model expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("forward_logits requires the student role (teachers have no classifier head)")]
    TeacherHasNoLogits,
    #[error("model has no classifier head")]
    MissingHead,
    #[error("checkpoint mismatch at {layer}: expected shape {expected:?}, checkpoint has {got:?}")]
    CheckpointShape {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint layer structure mismatch: {0}")]
    CheckpointStructure(String),
    #[error("input too short for {layer}: {detail}")]
    InputTooShort { layer: String, detail: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Architecture of an encoder. `latent_dim` must be identical between a
/// teacher and the students distilled from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub conv_layers: Vec<ConvSpec>,
    pub ff_layers: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
}

impl EncoderConfig {
    /// Channel width entering each dense layer of the encoder, in order:
    /// ff hidden layers then the latent projection.
    fn dense_widths(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::new();
        let mut fan_in = self
            .conv_layers
            .last()
            .map(|c| c.out_channels)
            .unwrap_or(self.n_mels);
        for &h in &self.ff_layers {
            widths.push((fan_in, h));
            fan_in = h;
        }
        widths.push((fan_in, self.latent_dim));
        widths
    }
}

/// Named parameter tensor; stored weights are fp32.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn kaiming_uniform(name: &str, shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Self {
        // Uniform with std sqrt(2 / fan_in): U(-a, a) with a = sqrt(6 / fan_in).
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.uniform(-bound, bound) as f32)
            .collect();
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        }
    }

    fn tensor(&self) -> Tensor<f32> {
        Tensor::new(self.data.clone(), &self.shape).expect("param shape consistent")
    }

    fn leaf(&self, tape: &Tape<f32>) -> Tensor<f32> {
        tape.watch(self.data.clone(), &self.shape)
            .expect("param shape consistent")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Kernel `(c_out, c_in, k)` applied with the given stride.
    Conv1d { stride: usize },
    /// Weight `(fan_in, fan_out)` applied framewise.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `(latent_dim, n_classes)`.
    pub weight: Param,
    pub bias: Param,
}

/// A concrete network: encoder layers plus, for students, the classifier
/// head. Teachers never expose trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub role: Role,
    pub config: EncoderConfig,
    pub layers: Vec<Layer>,
    pub head: Option<Head>,
}

/// Weight source for [`initialize`].
pub enum InitMode<'a> {
    Random,
    /// Copy encoder tensors from a checkpointed graph. Shapes must match
    /// exactly, or every checkpoint dimension must be at least as large as
    /// the target's, in which case the leading slice is taken (width
    /// truncation of a bigger model). The head is always freshly drawn.
    Pretrained(&'a ModelGraph),
}

/// Builds a model. Random draws are Kaiming-style scaled uniform
/// (std `sqrt(2 / fan_in)`), biases start at zero, and the whole graph is a
/// deterministic function of `(cfg, mode, seed)`.
pub fn initialize(
    cfg: &EncoderConfig,
    n_classes: usize,
    role: Role,
    mode: InitMode<'_>,
    seed: u64,
) -> Result<ModelGraph, ModelError> {
    let mut layers = Vec::new();
    let mut stream = 0u64;
    let next_rng = |stream: &mut u64| {
        let r = SplitMix64::substream(seed, *stream);
        *stream += 1;
        r
    };

    let mut c_in = cfg.n_mels;
    for (i, conv) in cfg.conv_layers.iter().enumerate() {
        let name = format!("conv{i}");
        let shape = [conv.out_channels, c_in, conv.kernel];
        let fan_in = c_in * conv.kernel;
        let mut rng = next_rng(&mut stream);
        layers.push(Layer {
            kind: LayerKind::Conv1d {
                stride: conv.stride,
            },
            weight: Param::kaiming_uniform(&format!("{name}.weight"), &shape, fan_in, &mut rng),
            bias: Param::zeros(&format!("{name}.bias"), &[conv.out_channels]),
        });
        c_in = conv.out_channels;
    }
    for (i, (fan_in, fan_out)) in cfg.dense_widths().into_iter().enumerate() {
        let is_latent = i == cfg.ff_layers.len();
        let name = if is_latent {
            "latent".to_string()
        } else {
            format!("ff{i}")
        };
        let mut rng = next_rng(&mut stream);
        layers.push(Layer {
            kind: LayerKind::Dense,
            weight: Param::kaiming_uniform(
                &format!("{name}.weight"),
                &[fan_in, fan_out],
                fan_in,
                &mut rng,
            ),
            bias: Param::zeros(&format!("{name}.bias"), &[fan_out]),
        });
    }

    if let InitMode::Pretrained(source) = mode {
        if source.layers.len() != layers.len() {
            return Err(ModelError::CheckpointStructure(format!(
                "checkpoint has {} encoder layers, target needs {}",
                source.layers.len(),
                layers.len()
            )));
        }
        for (target, src) in layers.iter_mut().zip(&source.layers) {
            if target.kind != src.kind {
                return Err(ModelError::CheckpointStructure(format!(
                    "layer {} kind differs from checkpoint",
                    target.weight.name
                )));
            }
            copy_or_truncate(&mut target.weight, &src.weight)?;
            copy_or_truncate(&mut target.bias, &src.bias)?;
        }
    }

    let head = match role {
        Role::Teacher => None,
        Role::Student => {
            let mut rng = next_rng(&mut stream);
            Some(Head {
                weight: Param::kaiming_uniform(
                    "head.weight",
                    &[cfg.latent_dim, n_classes],
                    cfg.latent_dim,
                    &mut rng,
                ),
                bias: Param::zeros("head.bias", &[n_classes]),
            })
        }
    };

    Ok(ModelGraph {
        role,
        config: cfg.clone(),
        layers,
        head,
    })
}

/// Model with the right structure and all-zero parameters; deserializers
/// fill the tensors in afterwards.
pub fn skeleton(cfg: &EncoderConfig, n_classes: usize, role: Role) -> ModelGraph {
    let mut model = initialize(cfg, n_classes.max(1), role, InitMode::Random, 0)
        .expect("random init of a valid config cannot fail");
    for p in model.named_params_mut() {
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    model
}

/// Copies `src` into `dst` when shapes match; otherwise takes the leading
/// slice of a larger source (every source dim must be >= the target dim).
fn copy_or_truncate(dst: &mut Param, src: &Param) -> Result<(), ModelError> {
    if dst.shape == src.shape {
        dst.data = src.data.clone();
        return Ok(());
    }
    if dst.shape.len() != src.shape.len() || dst.shape.iter().zip(&src.shape).any(|(d, s)| d > s) {
        return Err(ModelError::CheckpointShape {
            layer: dst.name.clone(),
            expected: dst.shape.clone(),
            got: src.shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(dst.data.len());
    copy_slice_rec(&src.data, &src.shape, &dst.shape, 0, 0, &mut out);
    dst.data = out;
    Ok(())
}

fn copy_slice_rec(
    src: &[f32],
    src_shape: &[usize],
    dst_shape: &[usize],
    axis: usize,
    offset: usize,
    out: &mut Vec<f32>,
) {
    if axis == src_shape.len() {
        out.push(src[offset]);
        return;
    }
    let stride: usize = src_shape[axis + 1..].iter().product();
    for i in 0..dst_shape[axis] {
        copy_slice_rec(
            src,
            src_shape,
            dst_shape,
            axis + 1,
            offset + i * stride,
            out,
        );
    }
}

impl ModelGraph {
    /// Freezes this graph as the distillation teacher; the classifier head,
    /// if any, is dropped.
    pub fn into_teacher(mut self) -> ModelGraph {
        self.role = Role::Teacher;
        self.head = None;
        self
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.bias.data.len())
    }

    pub fn param_count(&self) -> usize {
        self.named_params().map(|p| p.data.len()).sum()
    }

    /// All parameter tensors in a fixed order: per-layer weight then bias,
    /// then head weight and bias.
    pub fn named_params(&self) -> impl Iterator<Item = &Param> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .chain(self.head.iter().flat_map(|h| [&h.weight, &h.bias]))
    }

    pub fn named_params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .chain(
                self.head
                    .iter_mut()
                    .flat_map(|h| [&mut h.weight, &mut h.bias]),
            )
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.named_params().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.named_params_mut().find(|p| p.name == name)
    }

    /// Binds parameters to tensors for a forward pass. With a tape the
    /// parameters become watched leaves (students only; teachers are frozen
    /// and always bind constants).
    pub fn bind(&self, tape: Option<&Tape<f32>>) -> BoundModel {
        let tape = match self.role {
            Role::Teacher => None,
            Role::Student => tape,
        };
        let as_tensor = |p: &Param| match tape {
            Some(t) => p.leaf(t),
            None => p.tensor(),
        };
        BoundModel {
            activation: self.config.activation,
            n_mels: self.config.n_mels,
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    kind: l.kind,
                    weight_name: l.weight.name.clone(),
                    bias_name: l.bias.name.clone(),
                    weight: as_tensor(&l.weight),
                    bias: as_tensor(&l.bias),
                })
                .collect(),
            head: self
                .head
                .as_ref()
                .map(|h| (as_tensor(&h.weight), as_tensor(&h.bias))),
        }
    }

    /// Latent feature vector `z` of length `latent_dim`.
    pub fn forward_features(
        &self,
        x: &MelSpectrogram,
        tape: Option<&Tape<f32>>,
    ) -> Result<Tensor<f32>, ModelError> {
        self.bind(tape).features(x)
    }

    /// Classifier logits (students only). No softmax here: the softmax
    /// lives inside the cross-entropy.
    pub fn forward_logits(
        &self,
        x: &MelSpectrogram,
        tape: Option<&Tape<f32>>,
    ) -> Result<Tensor<f32>, ModelError> {
        if self.role == Role::Teacher {
            return Err(ModelError::TeacherHasNoLogits);
        }
        self.bind(tape).logits(x)
    }
}

/// Parameters materialized as tensors (watched leaves during training).
pub struct BoundModel {
    pub activation: Activation,
    pub n_mels: usize,
    pub layers: Vec<BoundLayer>,
    /// `(weight, bias)` of the classifier head.
    pub head: Option<(Tensor<f32>, Tensor<f32>)>,
}

pub struct BoundLayer {
    pub kind: LayerKind,
    pub weight_name: String,
    pub bias_name: String,
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

/// Spectrogram as a time-major `(frames, n_mels)` input tensor.
pub fn mel_input(x: &MelSpectrogram) -> Tensor<f32> {
    let (m, t) = (x.n_mels, x.frames);
    let mut data = vec![0.0f32; m * t];
    for mi in 0..m {
        for ti in 0..t {
            data[ti * m + mi] = x.values[mi * t + ti];
        }
    }
    Tensor::new(data, &[t, m]).expect("transpose preserves size")
}

impl BoundModel {
    fn activate(&self, h: Tensor<f32>) -> Tensor<f32> {
        match self.activation {
            Activation::Gelu => h.gelu(),
            Activation::Relu => h.relu(),
        }
    }

    pub fn features(&self, x: &MelSpectrogram) -> Result<Tensor<f32>, ModelError> {
        if x.n_mels != self.n_mels {
            return Err(ModelError::ChannelMismatch {
                expected: self.n_mels,
                got: x.n_mels,
            });
        }
        self.features_from(mel_input(x))
    }

    pub fn features_from(&self, mut h: Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer.kind {
                LayerKind::Conv1d { stride } => h
                    .conv1d(&layer.weight, stride)
                    .map_err(|e| ModelError::InputTooShort {
                        layer: layer.weight_name.clone(),
                        detail: e.to_string(),
                    })?
                    .add(&layer.bias)?,
                LayerKind::Dense => h.matmul(&layer.weight)?.add(&layer.bias)?,
            };
            // the latent projection stays linear
            if i + 1 < n {
                h = self.activate(h);
            }
        }
        Ok(h.mean_pool_time()?)
    }

    pub fn logits(&self, x: &MelSpectrogram) -> Result<Tensor<f32>, ModelError> {
        let z = self.features(x)?;
        self.logits_from_features(&z)
    }

    pub fn logits_from_features(&self, z: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let (w, b) = self.head.as_ref().ok_or(ModelError::MissingHead)?;
        let n = z.len();
        let out = z.reshape(&[1, n])?.matmul(w)?.add(b)?;
        let classes = out.len();
        Ok(out.reshape(&[classes])?)
    }
}
