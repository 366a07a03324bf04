use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::orthogonal_tensor;
use super::{Bind, Graph, NnError, ParamSet, Scalar, Tensor, Var};

fn dim_error(layer: &str, expected: usize, got: usize) -> NnError {
    NnError::Config(format!(
        "layer `{layer}` expects input width {expected}, got {got}"
    ))
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_key(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet<T>,
        gain: f64,
        rng: &mut R,
    ) {
        params.insert(
            self.weight_key(),
            orthogonal_tensor(&[self.in_dim, self.out_dim], gain, rng),
        );
        params.insert(self.bias_key(), Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        bind: Bind<'_, T>,
        x: Var,
    ) -> Result<Var, NnError> {
        let width = g.value(x).cols();
        if width != self.in_dim {
            return Err(dim_error(&self.name, self.in_dim, width));
        }
        let _s = g.scope(&self.name);
        let w = g.param(bind, &self.weight_key())?;
        let b = g.param(bind, &self.bias_key())?;
        check_param_shape(g, w, &[self.in_dim, self.out_dim], &self.name)?;
        let y = g.matmul(x, w);
        Ok(g.add_bias(y, b))
    }
}

fn check_param_shape<T: Scalar>(
    g: &Graph<T>,
    v: Var,
    shape: &[usize],
    layer: &str,
) -> Result<(), NnError> {
    let got = g.shape(v);
    if got != shape {
        return Err(NnError::Config(format!(
            "layer `{layer}` parameter has shape {got:?}, expected {shape:?}"
        )));
    }
    Ok(())
}

/// Multilayer perceptron: rectified hidden layers, linear output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub name: String,
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`.
    pub fn new(name: impl Into<String>, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let name = name.into();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.l{i}"), w[0], w[1]))
            .collect();
        Self { name, layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        for layer in &self.layers {
            layer.init(params, 1.0, rng);
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        bind: Bind<'_, T>,
        x: Var,
    ) -> Result<Var, NnError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, bind, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Row-wise layer normalization with learned gain (init 1) and bias (init 0).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            eps: 1e-5,
        }
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>) {
        params.insert(
            format!("{}.gain", self.name),
            Tensor::filled(&[self.dim], T::one()),
        );
        params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.dim]));
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        bind: Bind<'_, T>,
        x: Var,
    ) -> Result<Var, NnError> {
        let width = g.value(x).cols();
        if width != self.dim {
            return Err(dim_error(&self.name, self.dim, width));
        }
        let _s = g.scope(&self.name);
        let gain = g.param(bind, &format!("{}.gain", self.name))?;
        let bias = g.param(bind, &format!("{}.bias", self.name))?;
        Ok(g.layer_norm(x, gain, bias, self.eps))
    }
}

/// One convolution stage of a [`ConvEncoder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub filters: usize,
}

/// Geometry of a frame encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvEncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub latent_dim: usize,
}

impl ConvEncoderConfig {
    /// Four 3x3 stages, stride 2 then 1, with the given filter count.
    pub fn standard(
        height: usize,
        width: usize,
        channels: usize,
        filters: usize,
        latent_dim: usize,
    ) -> Self {
        let layers = (0..4)
            .map(|i| ConvLayerSpec {
                kernel: 3,
                stride: if i == 0 { 2 } else { 1 },
                filters,
            })
            .collect();
        Self {
            height,
            width,
            channels,
            layers,
            latent_dim,
        }
    }

    /// Spatial size and channel count after the last convolution.
    pub fn output_volume(&self) -> Result<(usize, usize, usize), NnError> {
        let (mut h, mut w, mut c) = (self.height, self.width, self.channels);
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride == 0 || l.kernel == 0 || h < l.kernel || w < l.kernel {
                return Err(NnError::Config(format!(
                    "conv layer {i} (kernel {}, stride {}) does not fit a {h}x{w} input",
                    l.kernel, l.stride
                )));
            }
            h = (h - l.kernel) / l.stride + 1;
            w = (w - l.kernel) / l.stride + 1;
            c = l.filters;
        }
        Ok((h, w, c))
    }
}

/// Convolutional frame encoder: rectified conv stages then a linear map to
/// the latent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvEncoder {
    pub name: String,
    pub config: ConvEncoderConfig,
    fc: Linear,
}

impl ConvEncoder {
    pub fn new(name: impl Into<String>, config: ConvEncoderConfig) -> Result<Self, NnError> {
        let name = name.into();
        let (h, w, c) = config.output_volume()?;
        let fc = Linear::new(format!("{name}.fc"), h * w * c, config.latent_dim);
        Ok(Self { name, config, fc })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn conv_key(&self, i: usize, part: &str) -> String {
        format!("{}.conv{i}.{part}", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let mut c = self.config.channels;
        for (i, l) in self.config.layers.iter().enumerate() {
            params.insert(
                self.conv_key(i, "w"),
                orthogonal_tensor(&[l.kernel, l.kernel, c, l.filters], 2f64.sqrt(), rng),
            );
            params.insert(self.conv_key(i, "b"), Tensor::zeros(&[l.filters]));
            c = l.filters;
        }
        self.fc.init(params, 1.0, rng);
    }

    /// `x: [B, H, W, C]` to `[B, latent]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        bind: Bind<'_, T>,
        x: Var,
    ) -> Result<Var, NnError> {
        let shape = g.shape(x);
        let cfg = &self.config;
        if shape.len() != 4
            || shape[1] != cfg.height
            || shape[2] != cfg.width
            || shape[3] != cfg.channels
        {
            return Err(NnError::Config(format!(
                "encoder `{}` expects [B, {}, {}, {}] frames, got {shape:?}",
                self.name, cfg.height, cfg.width, cfg.channels
            )));
        }
        let _s = g.scope(&self.name);
        let mut h = x;
        for (i, l) in cfg.layers.iter().enumerate() {
            let w = g.param(bind, &self.conv_key(i, "w"))?;
            let b = g.param(bind, &self.conv_key(i, "b"))?;
            h = g.relu(g.conv2d(h, w, b, l.stride));
        }
        let batch = shape[0];
        let flat = g.value(h).cols();
        let h = g.reshape(h, &[batch, flat]);
        self.fc.forward(g, bind, h)
    }
}

/// Hidden and cell vectors of an [`LstmCell`].
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub hidden: Vec<T>,
    pub cell: Vec<T>,
}

impl<T: Scalar> RecurrentState<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            hidden: vec![T::zero(); dim],
            cell: vec![T::zero(); dim],
        }
    }
}

/// Gated recurrent cell with input, forget, candidate and output blocks, in
/// that order along the `4h` axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub name: String,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input_dim,
            hidden,
        }
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let h4 = 4 * self.hidden;
        params.insert(
            self.key("wx"),
            orthogonal_tensor(&[self.input_dim, h4], 1.0, rng),
        );
        params.insert(
            self.key("wh"),
            orthogonal_tensor(&[self.hidden, h4], 1.0, rng),
        );
        params.insert(self.key("b"), Tensor::zeros(&[h4]));
    }

    /// One step for a batch: `x: [B, in]`, `h, c: [B, hidden]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        bind: Bind<'_, T>,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var), NnError> {
        let width = g.value(x).cols();
        if width != self.input_dim {
            return Err(dim_error(&self.name, self.input_dim, width));
        }
        let _s = g.scope(&self.name);
        let wx = g.param(bind, &self.key("wx"))?;
        let wh = g.param(bind, &self.key("wh"))?;
        let b = g.param(bind, &self.key("b"))?;
        let pre = g.add_bias(g.add(g.matmul(x, wx), g.matmul(h, wh)), b);
        let n = self.hidden;
        let i = g.sigmoid(g.slice_cols(pre, 0, n));
        let f = g.sigmoid(g.slice_cols(pre, n, 2 * n));
        let cand = g.tanh(g.slice_cols(pre, 2 * n, 3 * n));
        let o = g.sigmoid(g.slice_cols(pre, 3 * n, 4 * n));
        let c_next = g.add(g.mul(f, c), g.mul(i, cand));
        let h_next = g.mul(o, g.tanh(c_next));
        Ok((h_next, c_next))
    }
}

// ---- single-sample conveniences over plain vectors ----

/// Evaluates `mlp` on one input vector.
pub fn mlp_forward<T: Scalar>(
    mlp: &Mlp,
    params: &ParamSet<T>,
    input: &[T],
) -> Result<Vec<T>, NnError> {
    let g = Graph::new();
    let x = g.input(Tensor::row(input.to_vec()));
    let y = mlp.forward(&g, Bind::frozen(params), x)?;
    Ok(g.tensor(y).into_data())
}

/// Encodes one `[H, W, C]` frame.
pub fn conv_encoder_forward<T: Scalar>(
    encoder: &ConvEncoder,
    params: &ParamSet<T>,
    frame: &Tensor<T>,
) -> Result<Vec<T>, NnError> {
    let mut shape = vec![1];
    shape.extend_from_slice(frame.shape());
    let g = Graph::new();
    let x = g.input(frame.clone().reshaped(&shape)?);
    let z = encoder.forward(&g, Bind::frozen(params), x)?;
    Ok(g.tensor(z).into_data())
}

/// `gain * (v - mean) / sqrt(var + eps) + bias` with population variance.
pub fn layer_norm<T: Scalar>(v: &[T], gain: &[T], bias: &[T], eps: f64) -> Result<Vec<T>, NnError> {
    if gain.len() != v.len() || bias.len() != v.len() {
        return Err(NnError::Shape(format!(
            "layer_norm lengths differ: v {}, gain {}, bias {}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(NnError::Config("layer_norm eps must be positive".into()));
    }
    let g = Graph::new();
    let x = g.input(Tensor::row(v.to_vec()));
    let gv = g.input(Tensor::row(gain.to_vec()));
    let bv = g.input(Tensor::row(bias.to_vec()));
    let y = g.layer_norm(x, gv, bv, eps);
    Ok(g.tensor(y).into_data())
}

/// Advances `cell` by one input vector.
pub fn recurrent_step<T: Scalar>(
    cell: &LstmCell,
    params: &ParamSet<T>,
    input: &[T],
    state: &RecurrentState<T>,
) -> Result<RecurrentState<T>, NnError> {
    if state.hidden.len() != cell.hidden || state.cell.len() != cell.hidden {
        return Err(NnError::Config(format!(
            "recurrent state of width {} does not match cell `{}` hidden size {}",
            state.hidden.len(),
            cell.name,
            cell.hidden
        )));
    }
    let g = Graph::new();
    let x = g.input(Tensor::row(input.to_vec()));
    let h = g.input(Tensor::row(state.hidden.clone()));
    let c = g.input(Tensor::row(state.cell.clone()));
    let (h2, c2) = cell.forward(&g, Bind::frozen(params), x, h, c)?;
    Ok(RecurrentState {
        hidden: g.tensor(h2).into_data(),
        cell: g.tensor(c2).into_data(),
    })
}
