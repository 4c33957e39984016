//! Dense f64 tensors and the small kernel set needed to execute the toy
//! denoiser: convolution, affine, group normalization, SiLU, 2x resampling
//! and elementwise combination.
//!
//! All kernels are pure functions over immutable inputs and deterministic
//! for fixed inputs.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Dense N-dimensional array of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    /// Base64 of the little-endian 64-bit values.
    data: String,
}

impl Serialize for Tensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorRepr {
            shape: self.shape.clone(),
            data: BASE64.encode(bytes),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = TensorRepr::deserialize(deserializer)?;
        let bytes = BASE64
            .decode(&repr.data)
            .map_err(|e| D::Error::custom(format!("tensor payload: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(D::Error::custom("tensor payload length not a multiple of 8"));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(repr.shape, data).map_err(D::Error::custom)
    }
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Reinterpret the flat buffer under a new shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Expect a 4D [N, C, H, W] shape.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(Error::shape(op, format!("expected 4D input, got {other:?}"))),
        }
    }

    /// Expect a 2D [N, D] shape.
    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[n, d] => Ok([n, d]),
            other => Err(Error::shape(op, format!("expected 2D input, got {other:?}"))),
        }
    }
}

/// Convolution hyperparameters. Output spatial extent must stay positive:
/// floor((in + 2*padding - kernel) / stride) + 1 >= 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::invalid(format!(
                "conv spec requires positive channels/kernel/stride, got \
                 in={in_channels} out={out_channels} k={kernel} stride={stride}"
            )));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Output extent along one spatial axis.
    pub fn out_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {} exceeds padded extent {} (input {}, padding {})",
                    self.kernel, padded, input, self.padding
                ),
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

/// 2D cross-correlation over [N, C, H, W] input with [C', C, k, k] weights.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("conv2d")?;
    let wd = weight.shape();
    if wd != [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight shape {wd:?} does not match spec [{}, {}, {}, {}]",
                spec.out_channels, spec.in_channels, spec.kernel, spec.kernel
            ),
        ));
    }
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias shape {:?} does not match {} output channels",
                bias.shape(),
                spec.out_channels
            ),
        ));
    }

    let oh = spec.out_extent(h)?;
    let ow = spec.out_extent(w)?;
    let k = spec.kernel;
    let co = spec.out_channels;
    let mut out = vec![0.0; n * co * oh * ow];

    let x = input.data();
    let wt = weight.data();
    let b = bias.data();

    for ni in 0..n {
        for oc in 0..co {
            let w_base = oc * c * k * k;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    // top-left corner of the receptive field in padded coords
                    let iy0 = oy * spec.stride;
                    let ix0 = ox * spec.stride;
                    for ic in 0..c {
                        let x_base = (ni * c + ic) * h * w;
                        let wk_base = w_base + ic * k * k;
                        for ky in 0..k {
                            let iy = iy0 + ky;
                            if iy < spec.padding || iy >= h + spec.padding {
                                continue;
                            }
                            let row = x_base + (iy - spec.padding) * w;
                            let wk_row = wk_base + ky * k;
                            for kx in 0..k {
                                let ix = ix0 + kx;
                                if ix < spec.padding || ix >= w + spec.padding {
                                    continue;
                                }
                                acc += x[row + (ix - spec.padding)] * wt[wk_row + kx];
                            }
                        }
                    }
                    out[((ni * co + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }

    Tensor::new(vec![n, co, oh, ow], out)
}

/// Affine map: out = input * weight^T + bias, input [N, D], weight [D', D].
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, d] = input.dims2("linear")?;
    let wd = weight.shape();
    if wd.len() != 2 || wd[1] != d {
        return Err(Error::shape(
            "linear",
            format!("weight shape {wd:?} does not accept inner dimension {d}"),
        ));
    }
    let dout = wd[0];
    if bias.shape() != [dout] {
        return Err(Error::shape(
            "linear",
            format!("bias shape {:?} does not match {dout} outputs", bias.shape()),
        ));
    }

    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![0.0; n * dout];
    for ni in 0..n {
        let x_row = &x[ni * d..(ni + 1) * d];
        for oi in 0..dout {
            let w_row = &wt[oi * d..(oi + 1) * d];
            let mut acc = b[oi];
            for j in 0..d {
                acc += x_row[j] * w_row[j];
            }
            out[ni * dout + oi] = acc;
        }
    }
    Tensor::new(vec![n, dout], out)
}

/// Channelwise affine map over [N, C, H, W]: a linear layer applied at every
/// spatial position, weight [C', C]. Used for token projections.
pub fn linear_tokens(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("linear_tokens")?;
    let wd = weight.shape();
    if wd.len() != 2 || wd[1] != c {
        return Err(Error::shape(
            "linear_tokens",
            format!("weight shape {wd:?} does not accept {c} channels"),
        ));
    }
    let co = wd[0];
    if bias.shape() != [co] {
        return Err(Error::shape(
            "linear_tokens",
            format!("bias shape {:?} does not match {co} outputs", bias.shape()),
        ));
    }

    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let hw = h * w;
    let mut out = vec![0.0; n * co * hw];
    for ni in 0..n {
        for oc in 0..co {
            let w_row = &wt[oc * c..(oc + 1) * c];
            for p in 0..hw {
                let mut acc = b[oc];
                for ic in 0..c {
                    acc += x[(ni * c + ic) * hw + p] * w_row[ic];
                }
                out[(ni * co + oc) * hw + p] = acc;
            }
        }
    }
    Tensor::new(vec![n, co, h, w], out)
}

/// Elementwise x * sigmoid(x).
pub fn silu(input: &Tensor) -> Tensor {
    input.map(|x| x / (1.0 + (-x).exp()))
}

/// Group normalization over [N, C, H, W] with per-channel affine.
pub fn group_norm(
    input: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(format!(
            "group_norm: {c} channels not divisible by {groups} groups"
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "group_norm",
            format!(
                "gamma {:?} / beta {:?} must both be [{c}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let cg = c / groups;
    let hw = h * w;
    let group_len = cg * hw;
    let x = input.data();
    let g = gamma.data();
    let b = beta.data();
    let mut out = vec![0.0; x.len()];

    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cg) * hw;
            let slice = &x[start..start + group_len];
            let mean = slice.iter().sum::<f64>() / group_len as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / group_len as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let base = (ni * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = (x[base + p] - mean) * inv_std * g[ch] + b[ch];
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Spatial resampling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResampleMode {
    /// Nearest-neighbor 2x duplication.
    UpNearest2x,
    /// Stride-2 top-left subsampling; requires even extents.
    DownStride2,
}

pub fn resample(input: &Tensor, mode: ResampleMode) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("resample")?;
    let x = input.data();
    match mode {
        ResampleMode::UpNearest2x => {
            let (oh, ow) = (2 * h, 2 * w);
            let mut out = vec![0.0; n * c * oh * ow];
            for nc in 0..n * c {
                let src = nc * h * w;
                let dst = nc * oh * ow;
                for y in 0..oh {
                    for xx in 0..ow {
                        out[dst + y * ow + xx] = x[src + (y / 2) * w + (xx / 2)];
                    }
                }
            }
            Tensor::new(vec![n, c, oh, ow], out)
        }
        ResampleMode::DownStride2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(
                    "resample",
                    format!("down mode requires even extents, got {h}x{w}"),
                ));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; n * c * oh * ow];
            for nc in 0..n * c {
                let src = nc * h * w;
                let dst = nc * oh * ow;
                for y in 0..oh {
                    for xx in 0..ow {
                        out[dst + y * ow + xx] = x[src + (2 * y) * w + (2 * xx)];
                    }
                }
            }
            Tensor::new(vec![n, c, oh, ow], out)
        }
    }
}

/// How two tensors are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombineMode {
    /// Elementwise sum. Also accepts a [N, C] right operand against a
    /// [N, C, H, W] left operand, broadcast over spatial positions.
    Add,
    /// Concatenation along the channel axis of [N, C, H, W] operands.
    ConcatChannels,
}

pub fn combine(a: &Tensor, b: &Tensor, mode: CombineMode) -> Result<Tensor> {
    match mode {
        CombineMode::Add => {
            if a.shape() == b.shape() {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| x + y)
                    .collect();
                return Tensor::new(a.shape().to_vec(), data);
            }
            // [N, C, H, W] + [N, C] channel broadcast
            if let (Ok([n, c, h, w]), Ok([bn, bc])) = (a.dims4("combine"), b.dims2("combine")) {
                if bn == n && bc == c {
                    let hw = h * w;
                    let mut out = a.data().to_vec();
                    for ni in 0..n {
                        for ci in 0..c {
                            let add = b.data()[ni * c + ci];
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                out[base + p] += add;
                            }
                        }
                    }
                    return Tensor::new(vec![n, c, h, w], out);
                }
            }
            Err(Error::shape(
                "combine",
                format!("add of {:?} and {:?}", a.shape(), b.shape()),
            ))
        }
        CombineMode::ConcatChannels => {
            let [n, ca, h, w] = a.dims4("combine")?;
            let [nb, cb, hb, wb] = b.dims4("combine")?;
            if n != nb || h != hb || w != wb {
                return Err(Error::shape(
                    "combine",
                    format!("concat of {:?} and {:?}", a.shape(), b.shape()),
                ));
            }
            let hw = h * w;
            let co = ca + cb;
            let mut out = vec![0.0; n * co * hw];
            for ni in 0..n {
                let dst = ni * co * hw;
                out[dst..dst + ca * hw]
                    .copy_from_slice(&a.data()[ni * ca * hw..(ni + 1) * ca * hw]);
                out[dst + ca * hw..dst + co * hw]
                    .copy_from_slice(&b.data()[ni * cb * hw..(ni + 1) * cb * hw]);
            }
            Tensor::new(vec![n, co, h, w], out)
        }
    }
}
