//! Parameterized layers and their forward kernels.
//!
//! Activations are rank-3 `[C, H, W]` feature maps, rank-2 `[tokens, dim]`
//! sequences or rank-1 vectors; batch size is always one.

use half::f16;
use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, IxDyn};
use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Whether a stored tensor is a trainable parameter, a buffer, or quantization metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Trainable,
    Buffer,
    QuantMeta,
}

/// Borrowed view of one stored tensor, whatever its storage type.
#[derive(Debug, Clone, Copy)]
pub enum TensorData<'a, T> {
    Float(&'a ArrayD<T>),
    Int8(&'a Array2<i8>),
    Half(&'a Array2<f16>),
    F32(&'a Array1<f32>),
}

impl<T: Scalar> TensorData<'_, T> {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Float(a) => a.len(),
            TensorData::Int8(a) => a.len(),
            TensorData::Half(a) => a.len(),
            TensorData::F32(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn element_width(&self) -> usize {
        match self {
            TensorData::Float(_) => T::width(),
            TensorData::Int8(_) => 1,
            TensorData::Half(_) => 2,
            TensorData::F32(_) => 4,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorData::Float(a) => a.shape().to_vec(),
            TensorData::Int8(a) => a.shape().to_vec(),
            TensorData::Half(a) => a.shape().to_vec(),
            TensorData::F32(a) => a.shape().to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorRef<'a, T> {
    pub key: String,
    pub role: TensorRole,
    pub data: TensorData<'a, T>,
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::of(rng.random_range(-1.0..1.0) * bound))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches element count")
}

fn view2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

/// 2-D convolution over a `[C, H, W]` map with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `[out, in / groups, kh, kw]`
    pub weight: ArrayD<T>,
    pub bias: Option<ArrayD<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
        bias: bool,
    ) -> Self {
        let per_group = in_channels / groups.max(1);
        let fan_in = (per_group * kernel.0 * kernel.1).max(1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Self {
            weight: uniform(rng, &[out_channels, per_group, kernel.0, kernel.1], bound),
            bias: bias.then(|| uniform(rng, &[out_channels], bound)),
            stride,
            padding,
            groups,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// True for a depthwise convolution (one filter per input channel).
    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw || sh == 0 || sw == 0 {
            return None;
        }
        Some(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }

    pub fn output_shape(&self, node: &str, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 {
            return Err(shape_err(node, format!("conv2d expects [C,H,W], got {input:?}")));
        }
        if input[0] != self.in_channels() {
            return Err(shape_err(
                node,
                format!("conv2d expects {} input channels, got {}", self.in_channels(), input[0]),
            ));
        }
        if self.groups == 0 || !self.out_channels().is_multiple_of(self.groups) {
            return Err(shape_err(node, "conv2d groups do not divide channels"));
        }
        let (ho, wo) = self
            .output_hw(input[1], input[2])
            .ok_or_else(|| shape_err(node, format!("kernel larger than padded input {input:?}")))?;
        Ok(vec![self.out_channels(), ho, wo])
    }

    pub fn forward(&self, node: &str, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        let out_shape = self.output_shape(node, x.shape())?;
        let x = x.view().into_dimensionality::<Ix3>().expect("checked rank");
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (ho, wo) = (out_shape[1], out_shape[2]);
        let (kh, kw) = self.kernel();
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let cin_g = self.weight.shape()[1];
        let cout_g = self.out_channels() / self.groups;
        let weight = self
            .weight
            .view()
            .into_shape_with_order((self.out_channels(), cin_g * kh * kw))
            .map_err(|e| shape_err(node, e.to_string()))?;
        let mut out = Array2::<T>::zeros((self.out_channels(), ho * wo));
        for g in 0..self.groups {
            let mut cols = Array2::<T>::zeros((cin_g * kh * kw, ho * wo));
            for c in 0..cin_g {
                let ch = x.index_axis(Axis(0), g * cin_g + c);
                for ki in 0..kh {
                    for kj in 0..kw {
                        let row = (c * kh + ki) * kw + kj;
                        let mut dst = cols.row_mut(row);
                        for oy in 0..ho {
                            let iy = (oy * sh + ki) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox * sw + kj) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dst[oy * wo + ox] = ch[[iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
            let wg = weight.slice(s![g * cout_g..(g + 1) * cout_g, ..]);
            out.slice_mut(s![g * cout_g..(g + 1) * cout_g, ..])
                .assign(&wg.dot(&cols));
        }
        if let Some(b) = &self.bias {
            let b = b.view().into_dimensionality::<Ix1>().expect("rank-1 bias");
            for (mut row, &bv) in out.rows_mut().into_iter().zip(b.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        Ok(out
            .into_shape_with_order(IxDyn(&out_shape))
            .expect("element count preserved"))
    }
}

/// Dense affine layer over the last axis, float weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: ArrayD<T>,
    pub bias: Option<ArrayD<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_features: usize, out_features: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        Self {
            weight: uniform(rng, &[out_features, in_features], bound),
            bias: bias.then(|| uniform(rng, &[out_features], bound)),
        }
    }
}

/// Weights stored as signed 8-bit integers with one symmetric scale per output row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinearInt8<T> {
    pub weight: Array2<i8>,
    pub scales: Array1<f32>,
    pub bias: Option<ArrayD<T>>,
}

impl<T: Scalar> QuantizedLinearInt8<T> {
    pub fn from_linear(linear: &Linear<T>) -> Self {
        let w = view2(&linear.weight);
        let (out, inp) = w.dim();
        let mut q = Array2::<i8>::zeros((out, inp));
        let mut scales = Array1::<f32>::zeros(out);
        for o in 0..out {
            let row = w.row(o);
            let max_abs = row.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
            let scale = if max_abs > 0.0 { max_abs / 127.0 } else { 1.0 };
            let scale = scale as f32;
            scales[o] = scale;
            for i in 0..inp {
                let v = (row[i].as_f64() / scale as f64).round().clamp(-127.0, 127.0);
                q[[o, i]] = v as i8;
            }
        }
        Self {
            weight: q,
            scales,
            bias: linear.bias.clone(),
        }
    }

    /// Float weights reconstructed from the integer codes.
    pub fn dequantized_weight(&self) -> Array2<T> {
        let mut w = Array2::<T>::zeros(self.weight.dim());
        for ((o, i), v) in w.indexed_iter_mut() {
            *v = T::of(self.weight[[o, i]] as f64 * self.scales[o] as f64);
        }
        w
    }

    fn forward2(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let (n, inp) = x.dim();
        let out = self.weight.nrows();
        // per-invocation affine uint8 range over the whole activation, always containing zero
        let (lo, hi) = x
            .iter()
            .fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
        let scale = if hi > lo { (hi - lo) / 255.0 } else { 1.0 };
        let zero_point = (-lo / scale).round().clamp(0.0, 255.0);
        let mut y = Array2::<T>::zeros((n, out));
        let mut codes = vec![0i16; inp];
        for r in 0..n {
            for (c, v) in codes.iter_mut().zip(x.row(r).iter()) {
                let q = (v.as_f64() / scale).round() + zero_point;
                *c = (q.clamp(0.0, 255.0) - zero_point) as i16;
            }
            for o in 0..out {
                let wrow = self.weight.row(o);
                let wrow = wrow.as_slice().expect("standard layout");
                let acc: i32 = codes
                    .iter()
                    .zip(wrow.iter())
                    .map(|(&a, &b)| a as i32 * b as i32)
                    .sum();
                y[[r, o]] = T::of(acc as f64 * scale * self.scales[o] as f64);
            }
        }
        y
    }
}

/// Weights stored in half precision and widened at call time.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfLinear<T> {
    pub weight: Array2<f16>,
    pub bias: Option<ArrayD<T>>,
}

impl<T: Scalar> HalfLinear<T> {
    pub fn from_linear(linear: &Linear<T>) -> Self {
        Self {
            weight: view2(&linear.weight).mapv(|v| f16::from_f64(v.as_f64())),
            bias: linear.bias.clone(),
        }
    }
}

/// A dense layer in any of its storage forms.
#[derive(Debug, Clone, PartialEq)]
pub enum Dense<T> {
    Float(Linear<T>),
    Int8(QuantizedLinearInt8<T>),
    Half(HalfLinear<T>),
}

impl<T: Scalar> Dense<T> {
    pub fn in_features(&self) -> usize {
        match self {
            Dense::Float(l) => l.weight.shape()[1],
            Dense::Int8(q) => q.weight.ncols(),
            Dense::Half(h) => h.weight.ncols(),
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            Dense::Float(l) => l.weight.shape()[0],
            Dense::Int8(q) => q.weight.nrows(),
            Dense::Half(h) => h.weight.nrows(),
        }
    }

    pub fn bias(&self) -> Option<&ArrayD<T>> {
        match self {
            Dense::Float(l) => l.bias.as_ref(),
            Dense::Int8(q) => q.bias.as_ref(),
            Dense::Half(h) => h.bias.as_ref(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        !matches!(self, Dense::Float(_))
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Dense::Float(_) => "linear",
            Dense::Int8(_) => "quantized_linear_int8",
            Dense::Half(_) => "linear_fp16",
        }
    }

    pub fn as_float(&self) -> Option<&Linear<T>> {
        match self {
            Dense::Float(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_float_mut(&mut self) -> Option<&mut Linear<T>> {
        match self {
            Dense::Float(l) => Some(l),
            _ => None,
        }
    }

    pub fn output_shape(&self, node: &str, input: &[usize]) -> Result<Vec<usize>> {
        match input.last() {
            Some(&d) if (1..=2).contains(&input.len()) && d == self.in_features() => {
                let mut out = input.to_vec();
                *out.last_mut().expect("non-empty") = self.out_features();
                Ok(out)
            }
            _ => Err(shape_err(
                node,
                format!("linear expects [.., {}], got {input:?}", self.in_features()),
            )),
        }
    }

    pub fn forward(&self, node: &str, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        let out_shape = self.output_shape(node, x.shape())?;
        let rows = if x.ndim() == 1 { 1 } else { x.shape()[0] };
        let x2 = x
            .view()
            .into_shape_with_order((rows, self.in_features()))
            .map_err(|e| shape_err(node, e.to_string()))?;
        let mut y = match self {
            Dense::Float(l) => x2.dot(&view2(&l.weight).t()),
            Dense::Int8(q) => q.forward2(x2),
            Dense::Half(h) => {
                let w = h.weight.mapv(|v| T::of(v.to_f64()));
                x2.dot(&w.t())
            }
        };
        if let Some(b) = self.bias() {
            let b = b.view().into_dimensionality::<Ix1>().expect("rank-1 bias");
            for mut row in y.rows_mut() {
                row.zip_mut_with(&b, |y, &bv| *y = *y + bv);
            }
        }
        Ok(y.into_shape_with_order(IxDyn(&out_shape))
            .expect("element count preserved"))
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        let weight = match self {
            Dense::Float(l) => TensorData::Float(&l.weight),
            Dense::Int8(q) => TensorData::Int8(&q.weight),
            Dense::Half(h) => TensorData::Half(&h.weight),
        };
        out.push(TensorRef {
            key: format!("{prefix}.weight"),
            role: TensorRole::Trainable,
            data: weight,
        });
        if let Dense::Int8(q) = self {
            out.push(TensorRef {
                key: format!("{prefix}.scale"),
                role: TensorRole::QuantMeta,
                data: TensorData::F32(&q.scales),
            });
        }
        if let Some(b) = self.bias() {
            out.push(TensorRef {
                key: format!("{prefix}.bias"),
                role: TensorRole::Trainable,
                data: TensorData::Float(b),
            });
        }
    }
}

/// Inference-mode batch normalization over the channel axis of `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub weight: ArrayD<T>,
    pub bias: ArrayD<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: usize) -> Self {
        let jitter = |rng: &mut R, base: f64, spread: f64| -> ArrayD<T> {
            let v: Vec<T> = (0..channels)
                .map(|_| T::of(base + rng.random_range(-spread..spread)))
                .collect();
            ArrayD::from_shape_vec(IxDyn(&[channels]), v).expect("1-D")
        };
        Self {
            weight: jitter(rng, 1.0, 0.1),
            bias: jitter(rng, 0.0, 0.1),
            running_mean: jitter(rng, 0.0, 0.1),
            running_var: jitter(rng, 1.0, 0.1),
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    pub fn forward(&self, node: &str, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        if x.ndim() != 3 || x.shape()[0] != self.channels() {
            return Err(shape_err(
                node,
                format!("batch_norm expects [{}, H, W], got {:?}", self.channels(), x.shape()),
            ));
        }
        let mut y = x.clone();
        let eps = T::of(self.eps);
        for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let inv = (self.running_var[c] + eps).sqrt().recip();
            let (g, b, m) = (self.weight[c], self.bias[c], self.running_mean[c]);
            plane.mapv_inplace(|v| (v - m) * inv * g + b);
        }
        Ok(y)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub weight: ArrayD<T>,
    pub bias: ArrayD<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, eps: f64) -> Self {
        let w: Vec<T> = (0..dim).map(|_| T::of(1.0 + rng.random_range(-0.1..0.1))).collect();
        let b: Vec<T> = (0..dim).map(|_| T::of(rng.random_range(-0.1..0.1))).collect();
        Self {
            weight: ArrayD::from_shape_vec(IxDyn(&[dim]), w).expect("1-D"),
            bias: ArrayD::from_shape_vec(IxDyn(&[dim]), b).expect("1-D"),
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    pub fn forward(&self, node: &str, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        if x.shape().last() != Some(&self.dim()) {
            return Err(shape_err(
                node,
                format!("layer_norm expects [.., {}], got {:?}", self.dim(), x.shape()),
            ));
        }
        let mut y = x.clone();
        let d = T::from_usize(self.dim()).expect("dim fits");
        let eps = T::of(self.eps);
        let last = Axis(y.ndim() - 1);
        for mut lane in y.lanes_mut(last) {
            let mean = lane.iter().copied().sum::<T>() / d;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let inv = (var + eps).sqrt().recip();
            for (i, v) in lane.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.weight[i] + self.bias[i];
            }
        }
        Ok(y)
    }
}

/// One projection inside an attention block, with its own qualified name.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub name: String,
    pub dense: Dense<T>,
}

/// Multi-head self-attention over a `[tokens, dim]` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<T> {
    pub query: Projection<T>,
    pub key: Projection<T>,
    pub value: Projection<T>,
    pub output: Projection<T>,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        names: [String; 4],
        dim: usize,
        num_heads: usize,
        head_dim: usize,
    ) -> Self {
        let inner = num_heads * head_dim;
        let [q, k, v, o] = names;
        let mk = |rng: &mut R, name: String, i: usize, out: usize| Projection {
            name,
            dense: Dense::Float(Linear::new(rng, i, out, true)),
        };
        Self {
            query: mk(rng, q, dim, inner),
            key: mk(rng, k, dim, inner),
            value: mk(rng, v, dim, inner),
            output: mk(rng, o, inner, dim),
            num_heads,
            head_dim,
        }
    }

    pub fn projections(&self) -> [&Projection<T>; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    pub fn projections_mut(&mut self) -> [&mut Projection<T>; 4] {
        [&mut self.query, &mut self.key, &mut self.value, &mut self.output]
    }

    pub fn embed_dim(&self) -> usize {
        self.query.dense.in_features()
    }

    pub fn output_shape(&self, node: &str, input: &[usize]) -> Result<Vec<usize>> {
        let inner = self.num_heads * self.head_dim;
        if input.len() != 2 || input[1] != self.embed_dim() {
            return Err(shape_err(
                node,
                format!("attention expects [N, {}], got {input:?}", self.embed_dim()),
            ));
        }
        for p in [&self.query, &self.key, &self.value] {
            if p.dense.out_features() != inner || p.dense.in_features() != self.embed_dim() {
                return Err(shape_err(&p.name, format!("projection width != heads * head_dim ({inner})")));
            }
        }
        if self.output.dense.in_features() != inner {
            return Err(shape_err(&self.output.name, format!("output projection expects {inner} inputs")));
        }
        Ok(vec![input[0], self.output.dense.out_features()])
    }

    pub fn forward(&self, node: &str, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        self.output_shape(node, x.shape())?;
        let n = x.shape()[0];
        let q = self.query.dense.forward(&self.query.name, x)?;
        let k = self.key.dense.forward(&self.key.name, x)?;
        let v = self.value.dense.forward(&self.value.name, x)?;
        let (q, k, v) = (view2(&q), view2(&k), view2(&v));
        let hd = self.head_dim;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut ctx = Array2::<T>::zeros((n, self.num_heads * hd));
        for h in 0..self.num_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t()) * scale;
            for mut row in scores.rows_mut() {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                row.mapv_inplace(|s| (s - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|s| s / sum);
            }
            ctx.slice_mut(cols).assign(&scores.dot(&vh));
        }
        self.output.dense.forward(&self.output.name, &ctx.into_dyn())
    }
}

/// Learned token prepended to a `[tokens, dim]` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassToken<T> {
    pub token: ArrayD<T>,
}

impl<T: Scalar> ClassToken<T> {
    pub fn forward(&self, node: &str, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        let d = self.token.len();
        if x.ndim() != 2 || x.shape()[1] != d {
            return Err(shape_err(node, format!("cls token expects [N, {d}], got {:?}", x.shape())));
        }
        let mut y = Array2::<T>::zeros((x.shape()[0] + 1, d));
        y.row_mut(0)
            .assign(&self.token.view().into_dimensionality::<Ix1>().expect("rank-1"));
        y.slice_mut(s![1.., ..]).assign(&view2(x));
        Ok(y.into_dyn())
    }
}

/// Learned additive `[tokens, dim]` table.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEmbedding<T> {
    pub table: ArrayD<T>,
}

impl<T: Scalar> PositionEmbedding<T> {
    pub fn forward(&self, node: &str, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        if x.shape() != self.table.shape() {
            return Err(shape_err(
                node,
                format!("position table {:?} vs input {:?}", self.table.shape(), x.shape()),
            ));
        }
        Ok(x + &self.table)
    }
}

pub(crate) fn max_pool2d<T: Scalar>(
    x: &ArrayD<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> ArrayD<T> {
    let x = x.view().into_dimensionality::<Ix3>().expect("rank-3");
    let (c, h, w) = x.dim();
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let mut y = Array3::<T>::from_elem((c, ho, wo), T::neg_infinity());
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = T::neg_infinity();
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            m = m.max(x[[ch, iy as usize, ix as usize]]);
                        }
                    }
                }
                y[[ch, oy, ox]] = m;
            }
        }
    }
    y.into_dyn()
}

/// Gaussian error linear unit, exact (erf) form.
pub(crate) fn gelu<T: Scalar>(v: T) -> T {
    let x = v.as_f64();
    T::of(0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2)))
}

fn erf(x: f64) -> f64 {
    if x.abs() < 2.5 {
        return erf_series(x);
    }
    // Abramowitz & Stegun 7.1.26; absolute error below 1.5e-7 where erf is already near 1
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    x.signum() * (1.0 - poly * (-x * x).exp())
}

fn erf_series(x: f64) -> f64 {
    // Maclaurin series
    let mut term = x;
    let mut sum = x;
    let x2 = x * x;
    for n in 1..80 {
        term *= -x2 / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-17 {
            break;
        }
    }
    std::f64::consts::FRAC_2_SQRT_PI * sum
}
