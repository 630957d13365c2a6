//! Small layer toolkit on top of candle: a seeded parameter store and the
//! handful of layers the generator and the Transformer backbone need.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names in a `BTreeMap`,
//! so optimizer order, checkpoint layout and initialization are all
//! independent of hash seeds or thread scheduling.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Whether normalization layers use batch statistics (and update their
/// running estimates) or the stored running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            device: device.clone(),
            dtype,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        if self.params.insert(name.to_string(), var).is_some() {
            return Err(shape_err!("duplicate parameter name `{name}`"));
        }
        Ok(tensor)
    }

    /// Trainable parameter drawn from U(-bound, bound).
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    self.rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![value; n], shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        if self.buffers.insert(name.to_string(), var.clone()).is_some() {
            return Err(shape_err!("duplicate buffer name `{name}`"));
        }
        Ok(var)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.values().map(|v| v.elem_count()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[out_ch], bound)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            padding,
        })
    }

    /// Same geometry, weights and bias initialized to zero.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], 0.0)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: 1,
            padding,
        })
    }

    /// Wraps externally owned (frozen) tensors.
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_bias(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

/// 2x2 stride-2 transposed convolution (exact x2 upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let bound = 1.0 / ((out_ch * 4) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[in_ch, out_ch, 2, 2], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[out_ch], bound)?;
        Ok(Self { weight, bias })
    }

    /// Each input pixel writes a disjoint 2x2 output patch, so the layer is
    /// one matrix product followed by a pixel shuffle.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, ci, h, w) = x.dims4()?;
        let co = self.weight.dim(1)?;
        let bias = self.bias.reshape((co, 1))?.repeat((1, 4))?.reshape((co * 4, 1))?;
        let wm = Tensor::cat(&[&self.weight.reshape((ci, co * 4))?.t()?, &bias], 1)?;
        let y = wm.broadcast_matmul(&with_ones_row(&x.reshape((b, ci, h * w))?)?)?;
        Ok(y.reshape((b, co, 2, 2, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((b, co, 2 * h, 2 * w))?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        // channel-major view so every statistic is a contiguous row reduction
        let xc = x.transpose(0, 1)?.reshape((c, b * h * w))?;
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = xc.mean_keepdim(D::Minus1)?;
                let var = xc.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
                let n = (b * h * w) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = self.momentum;
                let new_mean = (self.running_mean.as_tensor().affine(1.0 - m, 0.0)?
                    + mean.detach().flatten_all()?.affine(m, 0.0)?)?;
                let new_var = (self.running_var.as_tensor().affine(1.0 - m, 0.0)?
                    + var.detach().flatten_all()?.affine(m * unbiased, 0.0)?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((c, 1))?,
                self.running_var.as_tensor().reshape((c, 1))?,
            ),
        };
        let scale = self.weight.reshape((c, 1))?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = xc
            .broadcast_sub(&mean)?
            .broadcast_mul(&scale)?
            .broadcast_add(&self.bias.reshape((c, 1))?)?;
        Ok(y.reshape((c, b, h, w))?.transpose(0, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last dimension, written with differentiable
/// primitives so gradients reach the input.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn from_tensors(weight: Tensor, bias: Tensor, eps: f64) -> Self {
        Self { weight, bias, eps }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    /// Append a row of ones so a bias column can ride along in the matmul.
    ones: bool,
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k + self.ones as usize
    }

    fn cols_len(&self) -> usize {
        self.batch * self.rows() * self.oh * self.ow
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > kx { ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.ow) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(col_offset, input_offset, run)` for every contiguous run of
    /// in-bounds taps; `run` is the run length for stride 1 and 1 otherwise.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, n_out) = (self.k, self.oh * self.ow);
        let rows = self.rows();
        for b in 0..self.batch {
            for c in 0..self.channels {
                let img = (b * self.channels + c) * self.h * self.w;
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (b * rows + (c * k + ky) * k + kx) * n_out;
                        let (lo, hi) = self.valid_cols(kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..self.oh {
                            let iy = oy * self.stride + ky;
                            if iy < self.pad || iy - self.pad >= self.h {
                                continue;
                            }
                            let src = img + (iy - self.pad) * self.w;
                            let dst = row + oy * self.ow;
                            if self.stride == 1 {
                                f(dst + lo, src + lo + kx - self.pad, hi - lo);
                            } else {
                                for ox in lo..hi {
                                    f(dst + ox, src + ox * self.stride + kx - self.pad, 1);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, x: &[T], one: T) -> Vec<T> {
        let mut out = vec![T::default(); self.cols_len()];
        self.for_each_run(|o, i, n| out[o..o + n].copy_from_slice(&x[i..i + n]));
        if self.ones {
            let n_out = self.oh * self.ow;
            for b in 0..self.batch {
                let start = (b * self.rows() + self.rows() - 1) * n_out;
                out[start..start + n_out].fill(one);
            }
        }
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.batch * self.channels * self.h * self.w];
        self.for_each_run(|o, i, n| {
            for (acc, v) in out[i..i + n].iter_mut().zip(&cols[o..o + n]) {
                *acc += *v;
            }
        });
        out
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous tensor".into())),
    }
}

/// `[B, C, H, W] -> [B, C*k*k, OH*OW]` patch matrix; backward folds
/// gradients back with [`Col2Im`].
struct Im2Col(ConvGeom);

/// Adjoint of [`Im2Col`]: scatter-adds patch columns into an image.
struct Col2Im(ConvGeom);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.batch, g.rows(), g.oh * g.ow));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(g.unfold(contiguous_slice(v, l)?, 1.0)),
            CpuStorage::F64(v) => CpuStorage::F64(g.unfold(contiguous_slice(v, l)?, 1.0)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.batch, g.channels, g.h, g.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(g.fold(contiguous_slice(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.fold(contiguous_slice(v, l)?)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, shape))
    }
}

fn with_ones_row(x: &Tensor) -> Result<Tensor> {
    let (b, _, n) = x.dims3()?;
    Ok(Tensor::cat(&[x, &Tensor::ones((b, 1, n), x.dtype(), x.device())?], 1)?)
}

/// Square-kernel convolution as an explicit patch matrix times the weight
/// matrix. Gradients flow to both `x` and `weight`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_bias(x, weight, None, stride, padding)
}

/// [`conv2d`] with an optional per-output-channel bias folded into the
/// weight matrix.
pub fn conv2d_bias(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, channels, h, w) = x.dims4()?;
    let (out_ch, in_ch, k, k2) = weight.dims4()?;
    if in_ch != channels || k != k2 {
        return Err(shape_err!("conv weight {:?} does not fit input {:?}", weight.dims(), x.dims()));
    }
    if h + 2 * padding < k || w + 2 * padding < k || stride == 0 {
        return Err(shape_err!("input {h}x{w} too small for a {k}x{k} kernel"));
    }
    let g = ConvGeom {
        ones: bias.is_some(),
        batch,
        channels,
        h,
        w,
        k,
        stride,
        pad: padding,
        oh: (h + 2 * padding - k) / stride + 1,
        ow: (w + 2 * padding - k) / stride + 1,
    };
    let cols = if k == 1 && stride == 1 && padding == 0 {
        let flat = x.reshape((batch, channels, h * w))?;
        if g.ones {
            with_ones_row(&flat)?
        } else {
            flat
        }
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let mut wm = weight.reshape((out_ch, in_ch * k * k))?;
    if let Some(b) = bias {
        wm = Tensor::cat(&[&wm, &b.reshape((out_ch, 1))?], 1)?;
    }
    Ok(wm.broadcast_matmul(&cols)?.reshape((batch, out_ch, g.oh, g.ow))?)
}

struct Gelu;
struct GeluGrad;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + candle_core::cpu::erf::erf_f64(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    0.5 * (1.0 + candle_core::cpu::erf::erf_f64(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

fn gelu_f32(x: f32) -> f32 {
    0.5 * x * (1.0 + candle_core::cpu::erf::erf_f32(x * std::f32::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_f32(x: f32) -> f32 {
    0.5 * (1.0 + candle_core::cpu::erf::erf_f32(x * std::f32::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI as f32 * (-0.5 * x * x).exp()
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-erf-fused"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(contiguous_slice(v, l)?.iter().map(|&x| gelu_f32(x)).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, l)?.iter().map(|&x| gelu_f64(x)).collect()),
            _ => return Err(candle_core::Error::Msg("gelu supports f32 and f64".into())),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

impl candle_core::CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-erf-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(
                contiguous_slice(x, l1)?
                    .iter()
                    .zip(contiguous_slice(g, l2)?)
                    .map(|(&x, &g)| g * gelu_grad_f32(x))
                    .collect(),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(
                contiguous_slice(x, l1)?
                    .iter()
                    .zip(contiguous_slice(g, l2)?)
                    .map(|(&x, &g)| g * gelu_grad_f64(x))
                    .collect(),
            ),
            _ => return Err(candle_core::Error::Msg("gelu grad expects matching f32/f64 inputs".into())),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Exact (erf) GELU with a fused elementwise backward pass.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// Sampling-grid convention for bilinear resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResizeConvention {
    /// Pixel centers at half-integer positions, corners not aligned,
    /// out-of-range sources clamped to the border.
    #[default]
    HalfPixel,
    /// First and last samples of input and output coincide.
    AlignCorners,
}

/// Row-major `n_out x n_in` linear interpolation matrix.
pub fn interp_matrix(n_in: usize, n_out: usize, convention: ResizeConvention) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for j in 0..n_out {
        let src = match convention {
            ResizeConvention::HalfPixel => {
                let scale = n_in as f64 / n_out as f64;
                ((j as f64 + 0.5) * scale - 0.5).max(0.0)
            }
            ResizeConvention::AlignCorners => {
                if n_out == 1 {
                    0.0
                } else {
                    j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
                }
            }
        };
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = (src - i0 as f64).clamp(0.0, 1.0);
        m[j * n_in + i0] += 1.0 - frac;
        m[j * n_in + i1] += frac;
    }
    m
}

/// Bilinear resize of a `[B, C, H, W]` tensor, expressed as two matrix
/// products so it is differentiable. Same-size resizes return the input.
pub fn resize_bilinear(
    x: &Tensor,
    size: (usize, usize),
    convention: ResizeConvention,
) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (oh, ow) = size;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(interp_matrix(h, oh, convention), (oh, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(interp_matrix(w, ow, convention), (ow, w), dev)?.to_dtype(x.dtype())?;
    let cols = x.broadcast_matmul(&rx.t()?)?;
    Ok(ry.broadcast_matmul(&cols)?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interp_rows_sum_to_one() {
        for conv in [ResizeConvention::HalfPixel, ResizeConvention::AlignCorners] {
            for (a, b) in [(4, 8), (8, 4), (5, 7), (1, 3), (3, 1)] {
                let m = interp_matrix(a, b, conv);
                for j in 0..b {
                    let s: f64 = m[j * a..(j + 1) * a].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn half_pixel_matches_known_upsample() {
        // [0, 1] -> 4 samples: sources -0.25(clamped), 0.25, 0.75, 1.25(clamped)
        let m = interp_matrix(2, 4, ResizeConvention::HalfPixel);
        let v: Vec<f64> = (0..4).map(|j| m[j * 2 + 1]).collect();
        assert_eq!(v, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let x = Tensor::arange(0f32, 32., &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 4, 4))
            .unwrap();
        let y = resize_bilinear(&x, (4, 4), ResizeConvention::HalfPixel).unwrap();
        assert_eq!(to_f64_vec(&x).unwrap(), to_f64_vec(&y).unwrap());
    }

    #[test]
    fn store_is_seed_deterministic() {
        let mk = || {
            let mut s = ParamStore::new(7, DType::F32, &Device::Cpu);
            s.uniform("a", &[3, 3], 0.5).unwrap();
            to_f64_vec(s.params()["a"].as_tensor()).unwrap()
        };
        assert_eq!(mk(), mk());
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        scalar_f64(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn conv2d_matches_candle_with_gradients() {
        let dev = Device::Cpu;
        for &(c, o, k, stride, pad, s) in &[(3, 5, 3, 1, 1, 7), (2, 4, 4, 4, 0, 8), (4, 3, 1, 1, 0, 5), (2, 2, 3, 2, 1, 9)] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1., (2, c, s, s), &dev).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f64, 1., (o, c, k, k), &dev).unwrap()).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), stride, pad).unwrap();
            let reference = x.as_tensor().conv2d(w.as_tensor(), pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs_diff(&ours, &reference) < 1e-12);
            let probe = Tensor::randn(0f64, 1., ours.dims(), &dev).unwrap();
            let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let d = max_abs_diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap());
            assert!(d < 1e-10, "{d}");
            }
        }
    }

    #[test]
    fn conv_bias_and_gelu_match_reference() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1., (2, 3, 6, 6), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f64, 1., (4, 3, 3, 3), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 1., 4, &dev).unwrap()).unwrap();
        let ours = gelu(&conv2d_bias(x.as_tensor(), w.as_tensor(), Some(b.as_tensor()), 1, 1).unwrap()).unwrap();
        let reference = x
            .as_tensor()
            .conv2d(w.as_tensor(), 1, 1, 1, 1)
            .unwrap()
            .broadcast_add(&b.as_tensor().reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        assert!(max_abs_diff(&ours, &reference.gelu_erf().unwrap()) < 1e-12);
        let reference = gelu(&reference).unwrap();
        let g1 = ours.sum_all().unwrap().backward().unwrap();
        let g2 = reference.sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &b] {
            let d = max_abs_diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap());
            assert!(d < 1e-10, "{d}");
        }
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
        let x = Var::from_tensor(&Tensor::new(xs.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let g = gelu(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = g.get(x.as_tensor()).unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for (xi, gi) in xs.iter().zip(g) {
            let fd = (gelu_f64(xi + h) - gelu_f64(xi - h)) / (2.0 * h);
            assert!((fd - gi).abs() < 1e-8, "x={xi}: {fd} vs {gi}");
        }
    }

    #[test]
    fn conv_transpose_matches_candle() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(3, DType::F64, &dev);
        let layer = ConvTranspose2d::new(&mut store, "up", 4, 3).unwrap();
        let x = Tensor::randn(0f64, 1., (2, 4, 3, 5), &dev).unwrap();
        let reference = x
            .conv_transpose2d(&layer.weight, 0, 0, 2, 1)
            .unwrap()
            .broadcast_add(&layer.bias.reshape((1, 3, 1, 1)).unwrap())
            .unwrap();
        let ours = layer.forward(&x).unwrap();
        assert_eq!(ours.dims(), &[2, 3, 6, 10]);
        assert!(max_abs_diff(&ours, &reference) < 1e-12);
    }

    #[test]
    fn batchnorm_train_normalizes_channels() {
        let mut s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let bn = BatchNorm2d::new(&mut s, "bn", 2).unwrap();
        let x = Tensor::arange(0f64, 32., &Device::Cpu)
            .unwrap()
            .reshape((2, 2, 2, 4))
            .unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let m = to_f64_vec(&y.mean_keepdim((0, 2, 3)).unwrap()).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        let rm = to_f64_vec(s.buffers()["bn.running_mean"].as_tensor()).unwrap();
        assert!(rm.iter().all(|v| *v > 0.0));
    }
}
