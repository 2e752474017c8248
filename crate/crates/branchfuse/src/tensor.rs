//! Minimal NCHW tensor engine: convolution, inference-mode batch norm,
//! average pooling, and the elementwise helpers needed to evaluate branched
//! and fused conv structures.
//!
//! All math runs in f64; f32 is an input/output type converted at the
//! boundary. `conv2d_reference` is a deliberately naive sliding-window
//! implementation kept independent of the im2col path in `conv2d` so the two
//! can check each other.

use crate::error::{Error, Result};

/// Element width at IO boundaries. All in-memory math is f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    F32,
    F64,
}

impl ElementType {
    pub fn byte_width(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementType::F32 => "f32",
            ElementType::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(ElementType::F32),
            "f64" => Ok(ElementType::F64),
            other => Err(Error::config(format!(
                "unknown element type {other:?}, expected f32 or f64"
            ))),
        }
    }
}

/// Rank-4 tensor in N×C×H×W layout, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: (usize, usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (n, c, h, w) = shape;
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "data length {} does not match shape {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            shape: (n, c, h, w),
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Tensor4::zeros(n, c, h, w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let idx = t.index_of(i, j, y, x);
                        t.data[idx] = f(i, j, y, x);
                    }
                }
            }
        }
        t
    }

    pub fn from_f32(shape: (usize, usize, usize, usize), data: &[f32]) -> Result<Self> {
        Tensor4::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Quantizes every element through f32 and back. Boundary conversion for
    /// 32-bit workflows.
    pub fn round_to_f32(&self) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    #[inline]
    pub fn index_of(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        let (_, c, h, w) = self.shape;
        debug_assert!(i < self.shape.0 && j < c && y < h && x < w);
        ((i * c + j) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, y: usize, x: usize) -> f64 {
        self.data[self.index_of(i, j, y, x)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, y: usize, x: usize, v: f64) {
        let idx = self.index_of(i, j, y, x);
        self.data[idx] = v;
    }

    /// Largest elementwise absolute difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn scale(&self, p: f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| v * p).collect(),
        }
    }
}

impl std::ops::Index<(usize, usize, usize, usize)> for Tensor4 {
    type Output = f64;

    fn index(&self, (i, j, y, x): (usize, usize, usize, usize)) -> &f64 {
        &self.data[self.index_of(i, j, y, x)]
    }
}

impl std::ops::IndexMut<(usize, usize, usize, usize)> for Tensor4 {
    fn index_mut(&mut self, (i, j, y, x): (usize, usize, usize, usize)) -> &mut f64 {
        let idx = self.index_of(i, j, y, x);
        &mut self.data[idx]
    }
}

/// Parameters of one convolution: kernel D×(C/g)×Kh×Kw, optional bias of
/// length D, stride, zero-padding and group count.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    kernel: Tensor4,
    bias: Option<Vec<f64>>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
}

impl ConvParams {
    pub fn new(
        kernel: Tensor4,
        bias: Option<Vec<f64>>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let (d, _cg, kh, kw) = kernel.shape();
        if groups == 0 {
            return Err(Error::config("groups must be positive"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config("stride must be positive"));
        }
        if d == 0 || kh == 0 || kw == 0 {
            return Err(Error::config("kernel dims must be positive"));
        }
        if d % groups != 0 {
            return Err(Error::config(format!(
                "output channels {d} not divisible by groups {groups}"
            )));
        }
        if let Some(b) = &bias {
            if b.len() != d {
                return Err(Error::shape(format!(
                    "bias length {} does not match output channels {d}",
                    b.len()
                )));
            }
        }
        Ok(ConvParams {
            kernel,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn kernel(&self) -> &Tensor4 {
        &self.kernel
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn padding(&self) -> (usize, usize) {
        self.padding
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().0
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().1 * self.groups
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.kernel.shape();
        (kh, kw)
    }

    /// Same stride/padding/groups with a different kernel and bias.
    pub fn with_params(&self, kernel: Tensor4, bias: Option<Vec<f64>>) -> Result<Self> {
        ConvParams::new(kernel, bias, self.stride, self.padding, self.groups)
    }

    pub fn with_padding(&self, padding: (usize, usize)) -> Self {
        let mut p = self.clone();
        p.padding = padding;
        p
    }

    pub fn round_to_f32(&self) -> ConvParams {
        ConvParams {
            kernel: self.kernel.round_to_f32(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&v| v as f32 as f64).collect()),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }
}

/// Inference-mode batch-norm statistics for D channels. `std` already has the
/// construction epsilon folded in, so downstream formulas never see epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    mean: Vec<f64>,
    std: Vec<f64>,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl BnParams {
    /// Builds from accumulated mean/variance; `std := sqrt(var + eps)`.
    pub fn from_moments(
        mean: Vec<f64>,
        var: Vec<f64>,
        scale: Vec<f64>,
        shift: Vec<f64>,
        eps: f64,
    ) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::config("epsilon must be positive"));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::config("variance entries must be non-negative"));
        }
        let std = var.iter().map(|&v| (v + eps).sqrt()).collect();
        BnParams::from_std(mean, std, scale, shift)
    }

    /// Builds from an already-folded standard deviation (must be positive).
    pub fn from_std(mean: Vec<f64>, std: Vec<f64>, scale: Vec<f64>, shift: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if std.len() != d || scale.len() != d || shift.len() != d {
            return Err(Error::shape(format!(
                "batch-norm vectors must share one length, got {}/{}/{}/{}",
                d,
                std.len(),
                scale.len(),
                shift.len()
            )));
        }
        if std.iter().any(|&s| s <= 0.0 || s.is_nan()) {
            return Err(Error::config("std entries must be strictly positive"));
        }
        Ok(BnParams {
            mean,
            std,
            scale,
            shift,
        })
    }

    /// μ=0, σ=1, γ=1, β=0: forward is exactly the identity.
    pub fn identity(d: usize) -> Self {
        BnParams {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            scale: vec![1.0; d],
            shift: vec![0.0; d],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn round_to_f32(&self) -> BnParams {
        let q = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect();
        BnParams {
            mean: q(&self.mean),
            std: q(&self.std),
            scale: q(&self.scale),
            shift: q(&self.shift),
        }
    }
}

/// Output spatial extent of a conv/pool window sweep.
pub fn conv_output_extent(input: usize, kernel: usize, pad: usize, stride: usize) -> Result<usize> {
    if input + 2 * pad < kernel {
        return Err(Error::shape(format!(
            "input extent {input} plus padding {pad} smaller than kernel {kernel}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

fn check_conv(input: &Tensor4, params: &ConvParams) -> Result<(usize, usize)> {
    let (_, c, h, w) = input.shape();
    if c != params.in_channels() {
        return Err(Error::shape(format!(
            "input has {c} channels, conv expects {}",
            params.in_channels()
        )));
    }
    if c % params.groups() != 0 {
        return Err(Error::config(format!(
            "input channels {c} not divisible by groups {}",
            params.groups()
        )));
    }
    let (kh, kw) = params.kernel_size();
    let oh = conv_output_extent(h, kh, params.padding().0, params.stride().0)?;
    let ow = conv_output_extent(w, kw, params.padding().1, params.stride().1)?;
    Ok((oh, ow))
}

/// Direct sliding-window convolution. This is the oracle implementation:
/// plain loops over every output position, no layout tricks. Keep it naive.
pub fn conv2d_reference(input: &Tensor4, params: &ConvParams) -> Result<Tensor4> {
    let (oh, ow) = check_conv(input, params)?;
    let (n, _, h, w) = input.shape();
    let d = params.out_channels();
    let g = params.groups();
    let (kh, kw) = params.kernel_size();
    let c_per_g = params.kernel().shape().1;
    let d_per_g = d / g;
    let (sh, sw) = params.stride();
    let (ph, pw) = params.padding();

    let mut out = Tensor4::zeros(n, d, oh, ow);
    for i in 0..n {
        for dj in 0..d {
            let gi = dj / d_per_g;
            let c_base = gi * c_per_g;
            let b = params.bias().map_or(0.0, |b| b[dj]);
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for cl in 0..c_per_g {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (y * sh + u) as isize - ph as isize;
                                let ix = (x * sw + v) as isize - pw as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += params.kernel().at(dj, cl, u, v)
                                        * input.at(i, c_base + cl, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(i, dj, y, x, acc + b);
                }
            }
        }
    }
    Ok(out)
}

/// im2col + matmul convolution. Same contract as `conv2d_reference`.
pub fn conv2d(input: &Tensor4, params: &ConvParams) -> Result<Tensor4> {
    let (oh, ow) = check_conv(input, params)?;
    let (n, _, h, w) = input.shape();
    let d = params.out_channels();
    let g = params.groups();
    let (kh, kw) = params.kernel_size();
    let c_per_g = params.kernel().shape().1;
    let d_per_g = d / g;
    let (sh, sw) = params.stride();
    let (ph, pw) = params.padding();

    let npos = oh * ow;
    let patch = c_per_g * kh * kw;
    let mut cols = vec![0.0f64; patch * npos];
    let mut out = Tensor4::zeros(n, d, oh, ow);
    let kdata = params.kernel().data();

    for i in 0..n {
        for gi in 0..g {
            let c_base = gi * c_per_g;
            // Unpack sliding windows into a patch × position matrix.
            cols.iter_mut().for_each(|v| *v = 0.0);
            for cl in 0..c_per_g {
                for u in 0..kh {
                    for v in 0..kw {
                        let row = (cl * kh + u) * kw + v;
                        for y in 0..oh {
                            let iy = (y * sh + u) as isize - ph as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for x in 0..ow {
                                let ix = (x * sw + v) as isize - pw as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                cols[row * npos + y * ow + x] =
                                    input.at(i, c_base + cl, iy as usize, ix as usize);
                            }
                        }
                    }
                }
            }
            // out[dl, pos] = sum_k kernel[dl, k] * cols[k, pos]
            for dl in 0..d_per_g {
                let dj = gi * d_per_g + dl;
                let krow = &kdata[dj * patch..(dj + 1) * patch];
                let out_base = out.index_of(i, dj, 0, 0);
                let orow = &mut out.data_mut()[out_base..out_base + npos];
                for (k, &kv) in krow.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    let crow = &cols[k * npos..(k + 1) * npos];
                    for (o, &cv) in orow.iter_mut().zip(crow) {
                        *o += kv * cv;
                    }
                }
                if let Some(b) = params.bias() {
                    let bv = b[dj];
                    for o in orow.iter_mut() {
                        *o += bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Channel-wise normalization and linear scaling with accumulated statistics:
/// `out[·,j,·,·] = (in[·,j,·,·] − μ_j)·γ_j/σ_j + β_j`.
pub fn batchnorm_infer(input: &Tensor4, bn: &BnParams) -> Result<Tensor4> {
    let (n, c, h, w) = input.shape();
    if c != bn.len() {
        return Err(Error::shape(format!(
            "input has {c} channels, batch norm has {}",
            bn.len()
        )));
    }
    let mut out = input.clone();
    for i in 0..n {
        for j in 0..c {
            let k = bn.scale[j] / bn.std[j];
            let mu = bn.mean[j];
            let beta = bn.shift[j];
            let base = out.index_of(i, j, 0, 0);
            for v in &mut out.data_mut()[base..base + h * w] {
                *v = (*v - mu) * k + beta;
            }
        }
    }
    Ok(out)
}

/// Average pooling over k×k windows. The divisor is always k², including any
/// padded zeros; this is the convention under which the pooling kernel built
/// by the transforms is exact at borders.
pub fn avgpool2d(input: &Tensor4, k: usize, stride: usize, padding: usize) -> Result<Tensor4> {
    if k == 0 || stride == 0 {
        return Err(Error::config("pooling kernel and stride must be positive"));
    }
    let (n, c, h, w) = input.shape();
    let oh = conv_output_extent(h, k, padding, stride)?;
    let ow = conv_output_extent(w, k, padding, stride)?;
    let inv = 1.0 / (k * k) as f64;
    let mut out = Tensor4::zeros(n, c, oh, ow);
    for i in 0..n {
        for j in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            let iy = (y * stride + u) as isize - padding as isize;
                            let ix = (x * stride + v) as isize - padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += input.at(i, j, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(i, j, y, x, acc * inv);
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise sum; shapes must match exactly.
pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "cannot add {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o += bv;
    }
    Ok(out)
}

/// Concatenation along the channel axis; n, h, w must match.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let (na, ca, ha, wa) = a.shape();
    let (nb, cb, hb, wb) = b.shape();
    if na != nb || ha != hb || wa != wb {
        return Err(Error::shape(format!(
            "cannot concat {:?} and {:?} along channels",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor4::zeros(na, ca + cb, ha, wa);
    for i in 0..na {
        for j in 0..ca + cb {
            for y in 0..ha {
                for x in 0..wa {
                    let v = if j < ca {
                        a.at(i, j, y, x)
                    } else {
                        b.at(i, j - ca, y, x)
                    };
                    out.set(i, j, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

/// Replicates a per-channel bias vector into a 1×D×h×w constant tensor.
pub fn rep_bias(b: &[f64], h: usize, w: usize) -> Tensor4 {
    Tensor4::from_fn(1, b.len(), h, w, |_, j, _, _| b[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[allow(clippy::too_many_arguments)]
    fn random_conv(
        rng: &mut ChaCha8Rng,
        d: usize,
        c_per_g: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
        bias: bool,
    ) -> ConvParams {
        let kernel = random_tensor(rng, d, c_per_g, kh, kw);
        let bias = bias.then(|| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        ConvParams::new(kernel, bias, stride, padding, groups).unwrap()
    }

    #[test]
    fn conv_scalar_with_bias() {
        let input = Tensor4::new((1, 1, 1, 1), vec![2.0]).unwrap();
        let kernel = Tensor4::new((1, 1, 1, 1), vec![3.0]).unwrap();
        let params = ConvParams::new(kernel, Some(vec![1.0]), (1, 1), (0, 0), 1).unwrap();
        assert_eq!(conv2d(&input, &params).unwrap().data(), &[7.0]);
        assert_eq!(conv2d_reference(&input, &params).unwrap().data(), &[7.0]);
    }

    #[test]
    fn conv_center_one_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, 1, 1, 3, 3);
        let mut kernel = Tensor4::zeros(1, 1, 3, 3);
        kernel.set(0, 0, 1, 1, 1.0);
        let params = ConvParams::new(kernel, None, (1, 1), (1, 1), 1).unwrap();
        let out = conv2d(&input, &params).unwrap();
        assert_eq!(out, input);
        assert_eq!(conv2d_reference(&input, &params).unwrap(), input);
    }

    #[test]
    fn conv_matches_reference_strided_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor(&mut rng, 1, 2, 4, 4);
        let params = random_conv(&mut rng, 3, 2, 3, 3, (2, 2), (1, 1), 1, false);
        let a = conv2d(&input, &params).unwrap();
        let b = conv2d_reference(&input, &params).unwrap();
        assert_eq!(a.shape(), (1, 3, 2, 2));
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn conv_output_shape_formula() {
        for h in 1..10usize {
            for k in [1usize, 3, 5] {
                for pad in 0..3usize {
                    for stride in [1usize, 2] {
                        if h + 2 * pad < k {
                            assert!(conv_output_extent(h, k, pad, stride).is_err());
                            continue;
                        }
                        let expect = (h + 2 * pad - k) / stride + 1;
                        let mut rng = ChaCha8Rng::seed_from_u64((h * 100 + k * 10 + pad) as u64);
                        let input = random_tensor(&mut rng, 1, 1, h, h);
                        let params =
                            random_conv(&mut rng, 1, 1, k, k, (stride, stride), (pad, pad), 1, false);
                        let out = conv2d(&input, &params).unwrap();
                        assert_eq!(out.shape(), (1, 1, expect, expect));
                    }
                }
            }
        }
    }

    #[test]
    fn grouped_conv_equals_split_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, d, g) = (4usize, 6usize, 2usize);
        let input = random_tensor(&mut rng, 2, c, 5, 5);
        let params = random_conv(&mut rng, d, c / g, 3, 3, (1, 1), (1, 1), g, true);

        let grouped = conv2d(&input, &params).unwrap();

        // Manual route: slice channels, run dense convs, concat outputs.
        let mut parts: Vec<Tensor4> = Vec::new();
        for gi in 0..g {
            let slice = Tensor4::from_fn(2, c / g, 5, 5, |i, j, y, x| {
                input.at(i, gi * (c / g) + j, y, x)
            });
            let kslice = Tensor4::from_fn(d / g, c / g, 3, 3, |dj, j, u, v| {
                params.kernel().at(gi * (d / g) + dj, j, u, v)
            });
            let bslice = params.bias().map(|b| b[gi * (d / g)..(gi + 1) * (d / g)].to_vec());
            let dense = ConvParams::new(kslice, bslice, (1, 1), (1, 1), 1).unwrap();
            parts.push(conv2d(&slice, &dense).unwrap());
        }
        let manual = concat_channels(&parts[0], &parts[1]).unwrap();
        assert_eq!(grouped, manual);

        let reference = conv2d_reference(&input, &params).unwrap();
        assert_eq!(reference, manual);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor4::zeros(1, 3, 4, 4);
        let params = ConvParams::new(Tensor4::zeros(2, 2, 3, 3), None, (1, 1), (1, 1), 1).unwrap();
        assert!(matches!(conv2d(&input, &params), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let kernel = Tensor4::zeros(3, 2, 3, 3);
        assert!(ConvParams::new(kernel, None, (1, 1), (0, 0), 2).is_err());
    }

    #[test]
    fn batchnorm_identity_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_tensor(&mut rng, 1, 3, 4, 4);
        let out = batchnorm_infer(&input, &BnParams::identity(3)).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn batchnorm_scalar_example() {
        let input = Tensor4::new((1, 1, 1, 1), vec![4.0]).unwrap();
        let bn = BnParams::from_std(vec![2.0], vec![2.0], vec![3.0], vec![1.0]).unwrap();
        let out = batchnorm_infer(&input, &bn).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn batchnorm_matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_tensor(&mut rng, 2, 4, 3, 3);
        let mean: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..2.0)).collect();
        let scale: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let shift: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bn = BnParams::from_moments(mean.clone(), var.clone(), scale.clone(), shift.clone(), 1e-5)
            .unwrap();
        let out = batchnorm_infer(&input, &bn).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                for y in 0..3 {
                    for x in 0..3 {
                        let sigma = (var[j] + 1e-5).sqrt();
                        let expect = (input.at(i, j, y, x) - mean[j]) * scale[j] / sigma + shift[j];
                        assert!((out.at(i, j, y, x) - expect).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn batchnorm_rejects_length_mismatch() {
        let input = Tensor4::zeros(1, 3, 2, 2);
        assert!(batchnorm_infer(&input, &BnParams::identity(2)).is_err());
    }

    #[test]
    fn bn_params_reject_nonpositive_std() {
        assert!(BnParams::from_std(vec![0.0], vec![0.0], vec![1.0], vec![0.0]).is_err());
        assert!(BnParams::from_moments(vec![0.0], vec![-1.0], vec![1.0], vec![0.0], 1e-5).is_err());
    }

    #[test]
    fn avgpool_constant_input() {
        let input = Tensor4::from_fn(1, 2, 4, 4, |_, _, _, _| 3.5);
        let out = avgpool2d(&input, 2, 2, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn avgpool_two_by_two_mean() {
        let input = Tensor4::new((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = avgpool2d(&input, 2, 2, 0).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn rep_bias_broadcasts_per_channel() {
        let t = rep_bias(&[1.0, 2.0], 2, 2);
        assert_eq!(t.shape(), (1, 2, 2, 2));
        assert_eq!(t.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_preserves_channel_order() {
        let a = Tensor4::from_fn(1, 2, 2, 2, |_, j, _, _| j as f64);
        let b = Tensor4::from_fn(1, 3, 2, 2, |_, j, _, _| 10.0 + j as f64);
        let out = concat_channels(&a, &b).unwrap();
        assert_eq!(out.shape(), (1, 5, 2, 2));
        for j in 0..2 {
            assert_eq!(out.at(0, j, 0, 0), j as f64);
        }
        for j in 0..3 {
            assert_eq!(out.at(0, 2 + j, 1, 1), 10.0 + j as f64);
        }
    }

    #[test]
    fn add_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_tensor(&mut rng, 1, 2, 3, 3);
        let out = add(&a, &Tensor4::zeros(1, 2, 3, 3)).unwrap();
        assert_eq!(out, a);
        assert!(add(&a, &Tensor4::zeros(1, 2, 3, 4)).is_err());
    }

    #[test]
    fn f32_boundary_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_tensor(&mut rng, 1, 2, 2, 2).round_to_f32();
        let back = Tensor4::from_f32(t.shape(), &t.to_f32()).unwrap();
        assert_eq!(back, t);
    }

    // Shared strategy: a legal (channels, groups, kernel, stride) draw plus a
    // seed for the data.
    fn conv_config() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, u64)> {
        (1usize..=8, 1usize..=8, prop::sample::select(vec![1usize, 3, 5]))
            .prop_flat_map(|(c, d, k)| {
                let groups = prop::sample::select(
                    [1, 2, c]
                        .iter()
                        .copied()
                        .filter(|g| c % g == 0 && d % g == 0)
                        .collect::<Vec<_>>(),
                );
                (
                    Just(c),
                    Just(d),
                    Just(k),
                    groups,
                    prop::sample::select(vec![1usize, 2]),
                    0usize..=2,
                    any::<u64>(),
                )
            })
            .prop_map(|(c, d, k, g, s, p, seed)| (c, d, k, g, s, p, seed))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conv_homogeneity((c, d, k, g, s, p, seed) in conv_config()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = k + 3;
            let input = random_tensor(&mut rng, 1, c, h, h);
            let params = random_conv(&mut rng, d, c / g, k, k, (s, s), (p, p), g, false);
            let factor = rng.gen_range(-3.0..3.0);
            let scaled = params.with_params(params.kernel().scale(factor), None).unwrap();
            let lhs = conv2d(&input, &scaled).unwrap();
            let rhs = conv2d(&input, &params).unwrap().scale(factor);
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        }

        #[test]
        fn conv_additivity((c, d, k, g, s, p, seed) in conv_config()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = k + 3;
            let input = random_tensor(&mut rng, 1, c, h, h);
            let f1 = random_conv(&mut rng, d, c / g, k, k, (s, s), (p, p), g, false);
            let f2 = random_conv(&mut rng, d, c / g, k, k, (s, s), (p, p), g, false);
            let summed = f1
                .with_params(
                    Tensor4::new(
                        f1.kernel().shape(),
                        f1.kernel()
                            .data()
                            .iter()
                            .zip(f2.kernel().data())
                            .map(|(a, b)| a + b)
                            .collect(),
                    )
                    .unwrap(),
                    None,
                )
                .unwrap();
            let lhs = add(
                &conv2d(&input, &f1).unwrap(),
                &conv2d(&input, &f2).unwrap(),
            )
            .unwrap();
            let rhs = conv2d(&input, &summed).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        }

        #[test]
        fn conv_agrees_with_reference((c, d, k, g, s, p, seed) in conv_config()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = k + 3;
            let input = random_tensor(&mut rng, 2, c, h, h);
            let params = random_conv(&mut rng, d, c / g, k, k, (s, s), (p, p), g, true);
            let a = conv2d(&input, &params).unwrap();
            let b = conv2d_reference(&input, &params).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }

        #[test]
        fn avgpool_matches_manual_mean(seed in any::<u64>(), k in 1usize..=3, s in 1usize..=2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = k + 3;
            let input = random_tensor(&mut rng, 1, 2, h, h);
            let out = avgpool2d(&input, k, s, 0).unwrap();
            let (_, _, oh, ow) = out.shape();
            for j in 0..2 {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for u in 0..k {
                            for v in 0..k {
                                acc += input.at(0, j, y * s + u, x * s + v);
                            }
                        }
                        prop_assert!((out.at(0, j, y, x) - acc / (k * k) as f64).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}
