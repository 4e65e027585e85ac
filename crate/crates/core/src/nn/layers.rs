//! Differentiable building blocks on top of candle tensors.

use candle_core::{DType, Tensor, Var, D};

use super::params::{Init, Scope};
use crate::error::Result;

/// Forward-pass mode; batch norm uses batch statistics only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer over the last axis.
#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = scope.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        let bias = if bias { Some(scope.param("bias", &[out_dim], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref().map(|b| b.as_tensor())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.as_tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding, dilation: 1 }
    }

    pub const fn dilated(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }

    /// Output length along one axis: `floor((n + 2p - d(k-1) - 1) / s) + 1`.
    pub fn output_len(&self, n: usize) -> Option<usize> {
        conv_output_len(n, self.kernel, self.stride, self.padding, self.dilation)
    }
}

/// Convolution output length, `None` when the kernel does not fit.
pub fn conv_output_len(n: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = n + 2 * padding;
    if stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// 2-D convolution over NCHW tensors.
#[derive(Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    spec: ConvSpec,
}

impl Conv2d {
    pub fn new(scope: &Scope, in_ch: usize, out_ch: usize, spec: ConvSpec, bias: bool) -> Result<Self> {
        let fan_in = in_ch * spec.kernel * spec.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = scope.param("weight", &[out_ch, in_ch, spec.kernel, spec.kernel], Init::Uniform(bound))?;
        let bias = if bias { Some(scope.param("bias", &[out_ch], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias, spec })
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref().map(|b| b.as_tensor())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.spec;
        let y = x.conv2d(self.weight.as_tensor(), s.padding, s.stride, s.dilation, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Transposed convolution (learned upsampling).
#[derive(Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    spec: ConvSpec,
}

impl ConvTranspose2d {
    pub fn new(scope: &Scope, in_ch: usize, out_ch: usize, spec: ConvSpec) -> Result<Self> {
        let fan_in = out_ch * spec.kernel * spec.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = scope.param("weight", &[in_ch, out_ch, spec.kernel, spec.kernel], Init::Uniform(bound))?;
        let bias = scope.param("bias", &[out_ch], Init::Zeros)?;
        Ok(Self { weight, bias, spec })
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn bias(&self) -> &Tensor {
        self.bias.as_tensor()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.spec;
        let y = x.conv_transpose2d(self.weight.as_tensor(), s.padding, 0, s.stride, s.dilation)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

/// Batch normalization over the channel axis of NCHW tensors.
#[derive(Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &Scope, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("weight", &[channels], Init::Ones)?,
            beta: scope.param("bias", &[channels], Init::Zeros)?,
            running_mean: scope.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: scope.buffer("running_var", &[channels], Init::Ones)?,
            eps,
            momentum,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn gamma(&self) -> &Tensor {
        self.gamma.as_tensor()
    }

    pub fn beta(&self) -> &Tensor {
        self.beta.as_tensor()
    }

    pub fn running_mean(&self) -> &Tensor {
        self.running_mean.as_tensor()
    }

    pub fn running_var(&self) -> &Tensor {
        self.running_var.as_tensor()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            Mode::Train => {
                let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
                let mean = flat.mean_keepdim(1)?;
                let centered = flat.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(1)?;
                self.update_running(&mean.flatten_all()?, &var.flatten_all()?, b * h * w)?;
                (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            ),
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        let y = y.broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?;
        Ok(y.broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }

    fn update_running(&self, mean: &Tensor, var: &Tensor, n: usize) -> Result<()> {
        let m = self.momentum;
        let unbiased = if n > 1 { (var.detach() * (n as f64 / (n as f64 - 1.0)))? } else { var.detach() };
        let rm = ((self.running_mean.as_tensor().detach() * (1.0 - m))? + (mean.detach() * m)?)?;
        let rv = ((self.running_var.as_tensor().detach() * (1.0 - m))? + (unbiased * m)?)?;
        self.running_mean.set(&rm)?;
        self.running_var.set(&rv)?;
        Ok(())
    }
}

/// Layer normalization over the last axis.
#[derive(Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("weight", &[dim], Init::Ones)?,
            beta: scope.param("bias", &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn gamma(&self) -> &Tensor {
        self.gamma.as_tensor()
    }

    pub fn beta(&self) -> &Tensor {
        self.beta.as_tensor()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(self.gamma.as_tensor())?.broadcast_add(self.beta.as_tensor())?)
    }
}

/// Pre-norm two-layer perceptron: `Linear(GELU(Linear(LN(x))))`.
///
/// Used both as the transformer FFN and as the MLP after cross-temporal
/// attention; callers add the residual themselves.
#[derive(Clone)]
pub struct Mlp {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(scope: &Scope, dim: usize, hidden: usize, ln_eps: f64) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&scope.pp("norm"), dim, ln_eps)?,
            fc1: Linear::new(&scope.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&scope.pp("fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(&self.norm.forward(x)?)?.gelu()?;
        self.fc2.forward(&h)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Debug-build check that every softmax row sums to one.
pub(crate) fn debug_check_rows_sum_to_one(a: &Tensor) -> Result<()> {
    if cfg!(debug_assertions) {
        let tol = match a.dtype() {
            DType::F64 => 1e-6,
            _ => 1e-3,
        };
        let dev = a
            .sum_keepdim(D::Minus1)?
            .affine(1.0, -1.0)?
            .abs()?
            .flatten_all()?
            .max(0)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        debug_assert!(dev.is_nan() || dev <= tol, "softmax rows deviate from 1 by {dev}");
    }
    Ok(())
}

/// Logistic sigmoid written through `tanh`, which keeps gradients finite
/// for large-magnitude inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Row-stochastic bilinear interpolation matrix of shape `[out, inp]`
/// (half-pixel centers, edge clamped).
pub fn bilinear_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Bilinear resize of an NCHW tensor to `(out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let y = x.broadcast_matmul(&rx.t()?)?;
    Ok(ry.broadcast_matmul(&y)?)
}
