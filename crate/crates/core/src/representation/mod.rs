//! Input representations: frame-wise encoding with latent flow and late
//! fusion, plus the pixel and state baselines it is compared against.
//!
//! Every learnable part of a representation lives under the `encoder.`
//! prefix so a learner can give it its own optimizer and target copy.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Frame, ObsMode, Observation};
use crate::nn::{
    Bind, ConvEncoder, ConvEncoderConfig, ConvLayerSpec, Graph, LayerNorm, Linear, LstmCell,
    NnError, ParamSet, Scalar, Tensor, Var,
};
use crate::replay::Window;

pub const ENCODER_PREFIX: &str = "encoder";

/// Number of positions a state-space flow feature looks at.
pub const STATE_HISTORY: usize = 4;

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("{0}")]
    Config(String),
    #[error("expected {expected} {what}, got {got}")]
    Count {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationMode {
    FlarePixel,
    FrameStackPixel,
    LatentConcatPixel,
    PixelFlow,
    StateFull,
    StatePositionOnly,
    StateStack,
    StateRecurrent,
    StateFlare,
}

impl RepresentationMode {
    pub const ALL: [RepresentationMode; 9] = [
        Self::FlarePixel,
        Self::FrameStackPixel,
        Self::LatentConcatPixel,
        Self::PixelFlow,
        Self::StateFull,
        Self::StatePositionOnly,
        Self::StateStack,
        Self::StateRecurrent,
        Self::StateFlare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FlarePixel => "flare_pixel",
            Self::FrameStackPixel => "frame_stack_pixel",
            Self::LatentConcatPixel => "latent_concat_pixel",
            Self::PixelFlow => "pixel_flow",
            Self::StateFull => "state_full",
            Self::StatePositionOnly => "state_position_only",
            Self::StateStack => "state_stack",
            Self::StateRecurrent => "state_recurrent",
            Self::StateFlare => "state_flare",
        }
    }

    pub fn is_pixel(self) -> bool {
        matches!(
            self,
            Self::FlarePixel | Self::FrameStackPixel | Self::LatentConcatPixel | Self::PixelFlow
        )
    }

    pub fn obs_mode(self) -> ObsMode {
        match self {
            _ if self.is_pixel() => ObsMode::Pixels,
            Self::StateFull => ObsMode::Full,
            _ => ObsMode::PositionOnly,
        }
    }

    fn min_frames(self) -> usize {
        match self {
            Self::FlarePixel | Self::PixelFlow => 2,
            _ => 1,
        }
    }

    /// Whether the observation window is a single step regardless of `n`.
    fn single_step(self) -> bool {
        matches!(self, Self::StateFull | Self::StatePositionOnly)
    }
}

impl std::fmt::Display for RepresentationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Frame encoder and fusion head sizes for pixel modes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub conv_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub latent_dim: usize,
    pub head_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            conv_layers: 4,
            filters: 32,
            kernel: 3,
            latent_dim: 64,
            head_dim: 1024,
        }
    }
}

impl EncoderSpec {
    /// The first stage has stride 2, the rest stride 1.
    pub fn conv_config(&self, size: usize, channels: usize) -> ConvEncoderConfig {
        let layers = (0..self.conv_layers)
            .map(|i| ConvLayerSpec {
                kernel: self.kernel,
                stride: if i == 0 { 2 } else { 1 },
                filters: self.filters,
            })
            .collect();
        ConvEncoderConfig {
            height: size,
            width: size,
            channels,
            layers,
            latent_dim: self.latent_dim,
        }
    }
}

/// What one step of an observation window looks like.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputShape {
    Vector(usize),
    /// Square single-channel frame of this side length.
    Frame(usize),
}

/// A batch of observation windows, stored step-major: `steps[j]` holds the
/// `j`-th oldest element of every window, `[B, d]` or `[B, H, W, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch<T> {
    pub steps: Vec<Tensor<T>>,
}

impl<T: Scalar> WindowBatch<T> {
    pub fn batch(&self) -> usize {
        self.steps.first().map_or(0, |t| t.shape()[0])
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn from_vectors(windows: &[Vec<&[f64]>]) -> Result<Self, ReprError> {
        let n = windows.first().map_or(0, Vec::len);
        let d = windows
            .first()
            .and_then(|w| w.first())
            .map_or(0, |v| v.len());
        let mut steps = Vec::with_capacity(n);
        for j in 0..n {
            let mut data = Vec::with_capacity(windows.len() * d);
            for w in windows {
                if w.len() != n || w[j].len() != d {
                    return Err(ReprError::Config("ragged observation windows".into()));
                }
                data.extend(w[j].iter().map(|&x| T::from_f64(x)));
            }
            steps.push(Tensor::new(vec![windows.len(), d], data)?);
        }
        Ok(Self { steps })
    }

    pub fn from_frames(windows: &[Vec<Arc<Frame>>]) -> Result<Self, ReprError> {
        let n = windows.first().map_or(0, Vec::len);
        let (h, w) = windows
            .first()
            .and_then(|w| w.first())
            .map_or((0, 0), |f| (f.height, f.width));
        let mut steps = Vec::with_capacity(n);
        for j in 0..n {
            let mut data = Vec::with_capacity(windows.len() * h * w);
            for win in windows {
                let f = win.get(j).filter(|f| f.height == h && f.width == w);
                let f = f.ok_or_else(|| ReprError::Config("ragged frame windows".into()))?;
                data.extend(f.data.iter().map(|&x| T::from_f64(x as f64)));
            }
            steps.push(Tensor::new(vec![windows.len(), h, w, 1], data)?);
        }
        Ok(Self { steps })
    }

    /// Builds from replay windows of either vector or pixel observations.
    pub fn from_observations(windows: &[Window]) -> Result<Self, ReprError> {
        let pixels = matches!(
            windows.first().and_then(|w| w.first()).map(|o| &**o),
            Some(Observation::Pixels(_))
        );
        if pixels {
            let frames = windows
                .iter()
                .map(|w| {
                    w.iter()
                        .map(|o| match &**o {
                            Observation::Pixels(f) => Ok(Arc::new(f.clone())),
                            _ => Err(ReprError::Config("mixed observation kinds".into())),
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            Self::from_frames(&frames)
        } else {
            let vectors = windows
                .iter()
                .map(|w| {
                    w.iter()
                        .map(|o| {
                            o.as_vector()
                                .ok_or_else(|| ReprError::Config("mixed observation kinds".into()))
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            Self::from_vectors(&vectors)
        }
    }

    /// Keeps only the newest `n` steps.
    pub fn newest(&self, n: usize) -> Self {
        Self {
            steps: self.steps[self.steps.len() - n..].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Net {
    None,
    Lstm(LstmCell),
    Pixel {
        encoder: ConvEncoder,
        head: Linear,
        norm: LayerNorm,
    },
}

/// A configured input representation for one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    mode: RepresentationMode,
    frames: usize,
    input: InputShape,
    net: Net,
}

impl Representation {
    /// `frames` is the window length `n`; it is ignored by the single-step
    /// state modes.
    pub fn new(
        mode: RepresentationMode,
        frames: usize,
        input: InputShape,
        spec: &EncoderSpec,
    ) -> Result<Self, ReprError> {
        let frames = if mode.single_step() { 1 } else { frames };
        if frames < mode.min_frames() {
            return Err(ReprError::Config(format!(
                "{mode} needs at least {} frames, got {frames}",
                mode.min_frames()
            )));
        }
        if mode == RepresentationMode::StateFlare && frames != STATE_HISTORY {
            return Err(ReprError::Config(format!(
                "{mode} uses exactly {STATE_HISTORY} positions, got {frames}"
            )));
        }
        let net = match (mode.is_pixel(), input) {
            (true, InputShape::Frame(size)) => {
                let channels = match mode {
                    RepresentationMode::FrameStackPixel => frames,
                    RepresentationMode::PixelFlow => 2 * frames - 1,
                    _ => 1,
                };
                let encoder = ConvEncoder::new(
                    format!("{ENCODER_PREFIX}.cnn"),
                    spec.conv_config(size, channels),
                )?;
                let l = spec.latent_dim;
                let pre_head = match mode {
                    RepresentationMode::FlarePixel => 2 * (frames - 1) * l,
                    RepresentationMode::LatentConcatPixel => frames * l,
                    _ => l,
                };
                Net::Pixel {
                    encoder,
                    head: Linear::new(format!("{ENCODER_PREFIX}.head"), pre_head, spec.head_dim),
                    norm: LayerNorm::new(format!("{ENCODER_PREFIX}.norm"), spec.head_dim),
                }
            }
            (false, InputShape::Vector(d)) => match mode {
                RepresentationMode::StateRecurrent => Net::Lstm(LstmCell::new(
                    format!("{ENCODER_PREFIX}.lstm"),
                    d,
                    (STATE_HISTORY - 1) * d,
                )),
                _ => Net::None,
            },
            _ => {
                return Err(ReprError::Config(format!(
                    "{mode} cannot consume {input:?} observations"
                )))
            }
        };
        Ok(Self {
            mode,
            frames,
            input,
            net,
        })
    }

    pub fn mode(&self) -> RepresentationMode {
        self.mode
    }

    /// Observation window length the representation consumes.
    pub fn window(&self) -> usize {
        self.frames
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn has_params(&self) -> bool {
        !matches!(self.net, Net::None)
    }

    pub fn encoder(&self) -> Option<&ConvEncoder> {
        match &self.net {
            Net::Pixel { encoder, .. } => Some(encoder),
            _ => None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match (&self.net, self.input) {
            (Net::Pixel { head, .. }, _) => head.out_dim,
            (Net::Lstm(cell), _) => cell.hidden,
            (Net::None, InputShape::Vector(d)) => self.frames * d,
            (Net::None, InputShape::Frame(_)) => unreachable!("pixel modes always have a net"),
        }
    }

    /// Width of the fused vector entering the head, for pixel modes.
    pub fn pre_head_dim(&self) -> Option<usize> {
        match &self.net {
            Net::Pixel { head, .. } => Some(head.in_dim),
            _ => None,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut p = ParamSet::new();
        match &self.net {
            Net::None => {}
            Net::Lstm(cell) => cell.init(&mut p, rng),
            Net::Pixel {
                encoder,
                head,
                norm,
            } => {
                encoder.init(&mut p, rng);
                head.init(&mut p, 1.0, rng);
                norm.init(&mut p);
            }
        }
        p
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        bind: Bind<'_, T>,
        batch: &WindowBatch<T>,
    ) -> Result<Var, ReprError> {
        if batch.len() < self.frames {
            return Err(ReprError::Count {
                what: "window steps",
                expected: self.frames,
                got: batch.len(),
            });
        }
        let batch = batch.newest(self.frames);
        let _s = g.scope(self.mode.name());
        let inputs: Vec<Var> = batch.steps.iter().map(|t| g.input(t.clone())).collect();
        let n = self.frames;
        use RepresentationMode as M;
        Ok(match (&self.net, self.mode) {
            (Net::None, M::StateFull | M::StatePositionOnly) => inputs[0],
            (Net::None, M::StateStack) => g.concat(&inputs),
            (Net::None, M::StateFlare) => {
                let mut parts = vec![inputs[n - 1]];
                parts.extend((1..n).rev().map(|j| g.sub(inputs[j], inputs[j - 1])));
                g.concat(&parts)
            }
            (Net::Lstm(cell), _) => {
                let b = batch.batch();
                let mut h = g.input(Tensor::zeros(&[b, cell.hidden]));
                let mut c = g.input(Tensor::zeros(&[b, cell.hidden]));
                for &x in &inputs {
                    (h, c) = cell.forward(g, bind, x, h, c)?;
                }
                h
            }
            (
                Net::Pixel {
                    encoder,
                    head,
                    norm,
                },
                M::FlarePixel,
            ) => {
                let latents = encode_frames(g, bind, encoder, &inputs)?;
                let flows = latent_flow(g, &latents)?;
                fuse(g, bind, head, norm, &latents[1..], &flows)?
            }
            (
                Net::Pixel {
                    encoder,
                    head,
                    norm,
                },
                M::LatentConcatPixel,
            ) => {
                let latents = encode_frames(g, bind, encoder, &inputs)?;
                fuse(g, bind, head, norm, &latents, &[])?
            }
            (
                Net::Pixel {
                    encoder,
                    head,
                    norm,
                },
                M::FrameStackPixel | M::PixelFlow,
            ) => {
                let stacked = if self.mode == M::PixelFlow {
                    pixel_flow_tensor(&batch.steps)?
                } else {
                    channel_stack(&batch.steps)?
                };
                let z = encoder.forward(g, bind, g.input(stacked))?;
                norm.forward(g, bind, head.forward(g, bind, z)?)?
            }
            _ => unreachable!("mode and net are paired in `new`"),
        })
    }
}

/// Applies one shared encoder to each frame independently.
pub fn encode_frames<T: Scalar>(
    g: &Graph<T>,
    bind: Bind<'_, T>,
    encoder: &ConvEncoder,
    frames: &[Var],
) -> Result<Vec<Var>, ReprError> {
    frames
        .iter()
        .map(|&f| encoder.forward(g, bind, f).map_err(ReprError::from))
        .collect()
}

/// `delta_j = z_j - stop_grad(z_{j-1})` for consecutive latents.
pub fn latent_flow<T: Scalar>(g: &Graph<T>, latents: &[Var]) -> Result<Vec<Var>, ReprError> {
    if latents.len() < 2 {
        return Err(ReprError::Count {
            what: "latents for a flow",
            expected: 2,
            got: latents.len(),
        });
    }
    Ok(latents
        .windows(2)
        .map(|p| g.sub(p[1], g.detach(p[0])))
        .collect())
}

/// Concatenates latents then flows (each oldest first), applies the linear
/// head and layer normalization. `flows` is either empty or as long as
/// `latents`.
pub fn fuse<T: Scalar>(
    g: &Graph<T>,
    bind: Bind<'_, T>,
    head: &Linear,
    norm: &LayerNorm,
    latents: &[Var],
    flows: &[Var],
) -> Result<Var, ReprError> {
    if latents.is_empty() || !(flows.is_empty() || flows.len() == latents.len()) {
        return Err(ReprError::Count {
            what: "flows",
            expected: latents.len(),
            got: flows.len(),
        });
    }
    let parts: Vec<Var> = latents.iter().chain(flows).copied().collect();
    let z = g.concat(&parts);
    Ok(norm.forward(g, bind, head.forward(g, bind, z)?)?)
}

/// Latest position followed by three lagged differences, newest first.
pub fn state_flare_features(positions: &[Vec<f64>]) -> Result<Vec<f64>, ReprError> {
    if positions.len() != STATE_HISTORY {
        return Err(ReprError::Count {
            what: "positions",
            expected: STATE_HISTORY,
            got: positions.len(),
        });
    }
    let d = positions[0].len();
    if positions.iter().any(|p| p.len() != d) {
        return Err(ReprError::Config("positions differ in dimension".into()));
    }
    let mut out = positions[STATE_HISTORY - 1].clone();
    for j in (1..STATE_HISTORY).rev() {
        out.extend(
            positions[j]
                .iter()
                .zip(&positions[j - 1])
                .map(|(a, b)| a - b),
        );
    }
    Ok(out)
}

/// Frames followed by consecutive per-pixel differences, `2n - 1` channels.
pub fn pixel_flow_preprocess(frames: &[Arc<Frame>]) -> Result<Vec<Frame>, ReprError> {
    if frames.len() < 2 {
        return Err(ReprError::Count {
            what: "frames for pixel flow",
            expected: 2,
            got: frames.len(),
        });
    }
    if frames.iter().any(|f| !f.same_size(&frames[0])) {
        return Err(ReprError::Config("frames differ in size".into()));
    }
    let mut out: Vec<Frame> = frames.iter().map(|f| (**f).clone()).collect();
    for p in frames.windows(2) {
        let mut d = Frame::new(p[1].height, p[1].width);
        for (o, (a, b)) in d.data.iter_mut().zip(p[1].data.iter().zip(&p[0].data)) {
            *o = a - b;
        }
        out.push(d);
    }
    Ok(out)
}

/// Interleaves single-channel steps `[B, H, W, 1]` into `[B, H, W, n]`.
fn channel_stack<T: Scalar>(steps: &[Tensor<T>]) -> Result<Tensor<T>, ReprError> {
    let shape = steps[0].shape();
    let (b, h, w) = (shape[0], shape[1], shape[2]);
    let n = steps.len();
    let mut data = vec![T::zero(); b * h * w * n];
    for (c, s) in steps.iter().enumerate() {
        for (i, &v) in s.data().iter().enumerate() {
            data[i * n + c] = v;
        }
    }
    Ok(Tensor::new(vec![b, h, w, n], data)?)
}

/// Batched form of [`pixel_flow_preprocess`].
fn pixel_flow_tensor<T: Scalar>(steps: &[Tensor<T>]) -> Result<Tensor<T>, ReprError> {
    let mut channels = steps.to_vec();
    for p in steps.windows(2) {
        let d: Vec<T> = p[1]
            .data()
            .iter()
            .zip(p[0].data())
            .map(|(&a, &b)| a - b)
            .collect();
        channels.push(Tensor::new(p[1].shape().to_vec(), d)?);
    }
    channel_stack(&channels)
}

/// Agreement between a finite difference of the encoder and its
/// Jacobian-vector product.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizationReport {
    pub finite_difference: Vec<f64>,
    pub jvp: Vec<f64>,
    pub relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `z(o + delta) - z(o)` with `J_z(o) delta`, one reverse pass per
/// latent component.
pub fn linearization_check(
    encoder: &ConvEncoder,
    params: &ParamSet<f64>,
    frame: &Frame,
    perturbation: &Frame,
    tolerance: f64,
) -> Result<LinearizationReport, ReprError> {
    if !frame.same_size(perturbation) {
        return Err(ReprError::Config(
            "perturbation size differs from frame".into(),
        ));
    }
    let to_tensor = |f: &Frame| {
        let data = f.data.iter().map(|&v| v as f64).collect();
        Tensor::new(vec![1, f.height, f.width, 1], data)
    };
    let base_t = to_tensor(frame)?;
    let delta: Vec<f64> = perturbation.data.iter().map(|&v| v as f64).collect();
    let shifted = {
        let mut t = base_t.clone();
        t.data_mut()
            .iter_mut()
            .zip(&delta)
            .for_each(|(a, b)| *a += b);
        t
    };
    let encode = |x: &Tensor<f64>| -> Result<Vec<f64>, ReprError> {
        let g = Graph::new();
        let z = encoder.forward(&g, Bind::frozen(params), g.input(x.clone()))?;
        let out = g.tensor(z).into_data();
        Ok(out)
    };
    let base = encode(&base_t)?;
    let fd: Vec<f64> = encode(&shifted)?
        .iter()
        .zip(&base)
        .map(|(a, b)| a - b)
        .collect();

    let g = Graph::new();
    let x = g.input_with_grad(base_t);
    let z = encoder.forward(&g, Bind::frozen(params), x)?;
    let mut jvp: Vec<f64> = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let zi = g.sum(g.slice_cols(z, i, i + 1));
        let grads = g.backward(zi)?;
        let gx = grads.wrt(x).map(|t| t.data().to_vec()).unwrap_or_default();
        jvp.push(gx.iter().zip(&delta).map(|(a, b)| a * b).sum());
    }
    let diff = fd
        .iter()
        .zip(&jvp)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = jvp.iter().map(|v| v * v).sum::<f64>().sqrt();
    let relative_error = if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    };
    Ok(LinearizationReport {
        finite_difference: fd,
        jvp,
        relative_error,
        tolerance,
        passed: relative_error <= tolerance,
    })
}

#[cfg(test)]
mod tests;
