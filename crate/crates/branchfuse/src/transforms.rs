//! Parameter transforms that collapse structured conv arrangements into a
//! single convolution: batch-norm folding, branch addition, 1×1→K×K sequence
//! fusion (dense and grouped), depth concatenation, average-pooling-as-conv
//! and kernel size alignment.
//!
//! Every transform is a pure function from parameters to parameters and is
//! checked by forward equivalence: evaluating the original structure and the
//! fused conv on the same input must agree to near machine precision.

use crate::error::{Error, Result};
use crate::tensor::{batchnorm_infer, conv2d, BnParams, ConvParams, Tensor4};

/// A convolution followed by inference-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: ConvParams,
    pub bn: BnParams,
}

impl ConvBn {
    pub fn new(conv: ConvParams, bn: BnParams) -> Result<Self> {
        if bn.len() != conv.out_channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels attached to conv with {} outputs",
                bn.len(),
                conv.out_channels()
            )));
        }
        Ok(ConvBn { conv, bn })
    }
}

/// Where the effective padding of a 1×1→K×K sequence lives.
///
/// A fused K×K conv zero-pads its input. The sequence reproduces that border
/// in one of two ways: `PadFirst` zero-pads the input of the 1×1 stage, so
/// the K×K stage runs unpadded; `BiasPad` runs the 1×1 stage unpadded and
/// pads the intermediate feature map with the first stage's effective bias
/// (which is exactly the value the border would have taken). Padding the
/// intermediate with zeros instead is wrong whenever that bias is nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    PadFirst,
    #[default]
    BiasPad,
}

/// A 1×1 conv-BN followed by a K×K conv-BN, sharing one group count.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqConvBn {
    pub first: ConvBn,
    pub second: ConvBn,
    pub pad_mode: PadMode,
}

impl SeqConvBn {
    pub fn new(first: ConvBn, second: ConvBn, pad_mode: PadMode) -> Result<Self> {
        if first.conv.kernel_size() != (1, 1) {
            return Err(Error::config(format!(
                "sequence must start with a 1x1 conv, got {:?}",
                first.conv.kernel_size()
            )));
        }
        if first.conv.stride() != (1, 1) {
            return Err(Error::config(
                "the 1x1 stage of a sequence must have stride 1",
            ));
        }
        if first.conv.groups() != second.conv.groups() {
            return Err(Error::config(format!(
                "sequence stages disagree on groups: {} vs {}",
                first.conv.groups(),
                second.conv.groups()
            )));
        }
        if first.conv.out_channels() != second.conv.in_channels() {
            return Err(Error::shape(format!(
                "first stage outputs {} channels, second expects {}",
                first.conv.out_channels(),
                second.conv.in_channels()
            )));
        }
        match pad_mode {
            PadMode::PadFirst if second.conv.padding() != (0, 0) => {
                return Err(Error::config(
                    "pad-first sequences must leave the second stage unpadded",
                ))
            }
            PadMode::BiasPad if first.conv.padding() != (0, 0) => {
                return Err(Error::config(
                    "bias-pad sequences must leave the first stage unpadded",
                ))
            }
            _ => {}
        }
        Ok(SeqConvBn {
            first,
            second,
            pad_mode,
        })
    }

    pub fn groups(&self) -> usize {
        self.first.conv.groups()
    }
}

/// Per-channel bias produced by folding `bn` into a conv whose own bias is
/// `conv_bias` (zeros when absent): `(b_j − μ_j)·γ_j/σ_j + β_j`.
pub fn folded_bias(conv_bias: Option<&[f64]>, bn: &BnParams) -> Vec<f64> {
    (0..bn.len())
        .map(|j| {
            let b = conv_bias.map_or(0.0, |b| b[j]);
            (b - bn.mean()[j]) * bn.scale()[j] / bn.std()[j] + bn.shift()[j]
        })
        .collect()
}

/// Folds batch norm into the preceding conv: the kernel's output-channel
/// slices are scaled by γ_j/σ_j and the bias becomes `(b_j − μ_j)·γ_j/σ_j + β_j`.
/// Stride, padding and groups are unchanged.
pub fn fuse_conv_bn(cb: &ConvBn) -> ConvParams {
    let (d, c, kh, kw) = cb.conv.kernel().shape();
    let kernel = Tensor4::from_fn(d, c, kh, kw, |j, ci, u, v| {
        cb.conv.kernel().at(j, ci, u, v) * cb.bn.scale()[j] / cb.bn.std()[j]
    });
    let bias = folded_bias(cb.conv.bias(), &cb.bn);
    cb.conv
        .with_params(kernel, Some(bias))
        .expect("folded conv keeps a valid configuration")
}

fn ensure_same_config(a: &ConvParams, b: &ConvParams, what: &str) -> Result<()> {
    if a.kernel().shape() != b.kernel().shape()
        || a.stride() != b.stride()
        || a.padding() != b.padding()
        || a.groups() != b.groups()
    {
        return Err(Error::config(format!(
            "{what}: kernels {:?}/{:?}, stride {:?}/{:?}, padding {:?}/{:?}, groups {}/{}",
            a.kernel().shape(),
            b.kernel().shape(),
            a.stride(),
            b.stride(),
            a.padding(),
            b.padding(),
            a.groups(),
            b.groups()
        )));
    }
    Ok(())
}

/// Merges added branches with identical configurations into one conv by
/// summing kernels and biases. Callers align kernel sizes first with
/// `pad_kernel`.
pub fn merge_branches(branches: &[ConvParams]) -> Result<ConvParams> {
    let first = branches
        .first()
        .ok_or_else(|| Error::config("cannot merge an empty branch list"))?;
    for b in &branches[1..] {
        ensure_same_config(first, b, "branch configs differ")?;
    }
    let mut kernel = first.kernel().clone();
    let any_bias = branches.iter().any(|b| b.bias().is_some());
    let mut bias = any_bias.then(|| vec![0.0; first.out_channels()]);
    if let (Some(acc), Some(b)) = (bias.as_mut(), first.bias()) {
        acc.copy_from_slice(b);
    }
    for b in &branches[1..] {
        for (k, &v) in kernel.data_mut().iter_mut().zip(b.kernel().data()) {
            *k += v;
        }
        if let (Some(acc), Some(extra)) = (bias.as_mut(), b.bias()) {
            for (a, &v) in acc.iter_mut().zip(extra) {
                *a += v;
            }
        }
    }
    first.with_params(kernel, bias)
}

fn check_pair(first: &ConvParams, second: &ConvParams) -> Result<()> {
    if first.kernel_size() != (1, 1) {
        return Err(Error::config(format!(
            "pair fusion needs a 1x1 first stage, got {:?}",
            first.kernel_size()
        )));
    }
    if first.stride() != (1, 1) {
        return Err(Error::config("pair fusion needs a stride-1 first stage"));
    }
    if first.out_channels() != second.in_channels() {
        return Err(Error::shape(format!(
            "first stage outputs {} channels, second expects {}",
            first.out_channels(),
            second.in_channels()
        )));
    }
    Ok(())
}

/// Collapses a dense 1×1 conv followed by a dense K×K conv (both with their
/// biases already in place) into one K×K conv.
///
/// The 1×1 stage only recombines channels, so the fused kernel is the
/// per-position matrix product `F'[:,:,u,v] = F2[:,:,u,v] · F1` where `F1` is
/// the 1×1 kernel read as a D×C matrix. The first bias passes through the
/// second kernel as `b̂_j = Σ_{d,u,v} b1_d · F2[j,d,u,v]`, added to the second
/// bias. The result takes the second stage's stride and the sum of both
/// paddings.
pub fn fuse_conv_pair(first: &ConvParams, second: &ConvParams) -> Result<ConvParams> {
    if first.groups() != 1 || second.groups() != 1 {
        return Err(Error::config("pair fusion handles the dense case only"));
    }
    check_pair(first, second)?;
    let (d_mid, c, _, _) = first.kernel().shape();
    let (e, _, kh, kw) = second.kernel().shape();
    let f1 = first.kernel();
    let f2 = second.kernel();

    let mut kernel = Tensor4::zeros(e, c, kh, kw);
    for ei in 0..e {
        for u in 0..kh {
            for v in 0..kw {
                for ci in 0..c {
                    let mut acc = 0.0;
                    for di in 0..d_mid {
                        acc += f2.at(ei, di, u, v) * f1.at(di, ci, 0, 0);
                    }
                    kernel.set(ei, ci, u, v, acc);
                }
            }
        }
    }

    let mut bias = vec![0.0; e];
    for (ei, out) in bias.iter_mut().enumerate() {
        let mut acc = 0.0;
        if let Some(b1) = first.bias() {
            for (di, &b) in b1.iter().enumerate() {
                for u in 0..kh {
                    for v in 0..kw {
                        acc += b * f2.at(ei, di, u, v);
                    }
                }
            }
        }
        *out = acc + second.bias().map_or(0.0, |b| b[ei]);
    }

    let padding = (
        first.padding().0 + second.padding().0,
        first.padding().1 + second.padding().1,
    );
    ConvParams::new(kernel, Some(bias), second.stride(), padding, 1)
}

/// Grouped variant of `fuse_conv_pair`: splits both stages into their groups,
/// fuses each group densely, and concatenates the results back into a
/// g-group conv.
pub fn fuse_conv_pair_grouped(first: &ConvParams, second: &ConvParams) -> Result<ConvParams> {
    let g = first.groups();
    if g != second.groups() {
        return Err(Error::config(format!(
            "pair stages disagree on groups: {g} vs {}",
            second.groups()
        )));
    }
    if g == 1 {
        return fuse_conv_pair(first, second);
    }
    check_pair(first, second)?;
    let (d_mid, c_per_g, _, _) = first.kernel().shape();
    let (e, _, kh, kw) = second.kernel().shape();
    if d_mid % g != 0 || e % g != 0 {
        return Err(Error::config(format!(
            "channel counts {d_mid}/{e} not divisible by groups {g}"
        )));
    }
    let (dg, eg) = (d_mid / g, e / g);

    let mut parts = Vec::with_capacity(g);
    for gi in 0..g {
        let f1 = Tensor4::from_fn(dg, c_per_g, 1, 1, |dj, ci, _, _| {
            first.kernel().at(gi * dg + dj, ci, 0, 0)
        });
        let b1 = first
            .bias()
            .map(|b| b[gi * dg..(gi + 1) * dg].to_vec());
        let f2 = Tensor4::from_fn(eg, dg, kh, kw, |ej, dj, u, v| {
            second.kernel().at(gi * eg + ej, dj, u, v)
        });
        let b2 = second
            .bias()
            .map(|b| b[gi * eg..(gi + 1) * eg].to_vec());
        let dense_first = ConvParams::new(f1, b1, first.stride(), first.padding(), 1)?;
        let dense_second = ConvParams::new(f2, b2, second.stride(), second.padding(), 1)?;
        parts.push(fuse_conv_pair(&dense_first, &dense_second)?);
    }
    let merged = concat_kernels(&parts)?;
    ConvParams::new(
        merged.kernel().clone(),
        merged.bias().map(<[f64]>::to_vec),
        merged.stride(),
        merged.padding(),
        g,
    )
}

/// Fuses a dense 1×1→K×K conv-BN sequence into one conv: both batch norms are
/// folded into their convs first, then the pair is collapsed.
pub fn fuse_sequential(seq: &SeqConvBn) -> Result<ConvParams> {
    if seq.groups() != 1 {
        return Err(Error::config(
            "fuse_sequential handles the dense case; use fuse_sequential_grouped",
        ));
    }
    fuse_conv_pair(&fuse_conv_bn(&seq.first), &fuse_conv_bn(&seq.second))
}

/// Grouped sequence fusion; dispatches to `fuse_sequential` when g = 1.
pub fn fuse_sequential_grouped(seq: &SeqConvBn) -> Result<ConvParams> {
    if seq.groups() == 1 {
        return fuse_sequential(seq);
    }
    fuse_conv_pair_grouped(&fuse_conv_bn(&seq.first), &fuse_conv_bn(&seq.second))
}

/// Pads every channel of `x` with a `pixels`-wide border holding that
/// channel's bias value. This is the evaluation-side counterpart of bias-pad
/// sequences: the border must carry the first stage's effective bias, not
/// zeros.
pub fn pad_input_with_bias(x: &Tensor4, b: &[f64], pixels: usize) -> Result<Tensor4> {
    let (n, c, h, w) = x.shape();
    if b.len() != c {
        return Err(Error::shape(format!(
            "bias has {} entries for {c} channels",
            b.len()
        )));
    }
    let out = Tensor4::from_fn(n, c, h + 2 * pixels, w + 2 * pixels, |i, j, y, x_| {
        let iy = y as isize - pixels as isize;
        let ix = x_ as isize - pixels as isize;
        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
            x.at(i, j, iy as usize, ix as usize)
        } else {
            b[j]
        }
    });
    Ok(out)
}

/// Concatenates convs along the output-channel axis, preserving part order.
/// All parts must share input channels, kernel size, stride, padding and
/// groups. Missing biases are treated as zero if any part carries one.
pub fn concat_kernels(parts: &[ConvParams]) -> Result<ConvParams> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("cannot concatenate an empty part list"))?;
    let (_, c, kh, kw) = first.kernel().shape();
    for p in &parts[1..] {
        let (_, pc, pkh, pkw) = p.kernel().shape();
        if (pc, pkh, pkw) != (c, kh, kw)
            || p.stride() != first.stride()
            || p.padding() != first.padding()
            || p.groups() != first.groups()
        {
            return Err(Error::config(
                "concatenated parts must share input channels, kernel size, stride, padding and groups",
            ));
        }
    }
    let d_total: usize = parts.iter().map(ConvParams::out_channels).sum();
    let mut data = Vec::with_capacity(d_total * c * kh * kw);
    for p in parts {
        data.extend_from_slice(p.kernel().data());
    }
    let kernel = Tensor4::new((d_total, c, kh, kw), data)?;
    let any_bias = parts.iter().any(|p| p.bias().is_some());
    let bias = any_bias.then(|| {
        let mut b = Vec::with_capacity(d_total);
        for p in parts {
            match p.bias() {
                Some(pb) => b.extend_from_slice(pb),
                None => b.extend(std::iter::repeat_n(0.0, p.out_channels())),
            }
        }
        b
    });
    ConvParams::new(kernel, bias, first.stride(), first.padding(), first.groups())
}

/// Builds the conv that computes k×k average pooling over `channels`
/// channels: each output channel reads only its own input channel with
/// uniform weight 1/k². No bias, no padding.
pub fn avgpool_to_conv(
    channels: usize,
    k: usize,
    stride: usize,
    groups: usize,
) -> Result<ConvParams> {
    if k == 0 || stride == 0 {
        return Err(Error::config("pooling kernel and stride must be positive"));
    }
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::config(format!(
            "channels {channels} not divisible by groups {groups}"
        )));
    }
    let c_per_g = channels / groups;
    let inv = 1.0 / (k * k) as f64;
    let kernel = Tensor4::from_fn(channels, c_per_g, k, k, |d, cl, _, _| {
        if cl == d % c_per_g {
            inv
        } else {
            0.0
        }
    });
    ConvParams::new(kernel, None, (stride, stride), (0, 0), groups)
}

/// Embeds a kh×kw kernel in a larger target kernel by centered zero-padding,
/// and grows the conv's padding by the same margin so the sliding windows of
/// the padded conv line up with the original. Only symmetric centering is
/// supported: the target/source difference must be even per axis.
pub fn pad_kernel(params: &ConvParams, target_kh: usize, target_kw: usize) -> Result<ConvParams> {
    let (d, c, kh, kw) = params.kernel().shape();
    if target_kh < kh || target_kw < kw {
        return Err(Error::config(format!(
            "target {target_kh}x{target_kw} smaller than kernel {kh}x{kw}"
        )));
    }
    if !(target_kh - kh).is_multiple_of(2) || !(target_kw - kw).is_multiple_of(2) {
        return Err(Error::config(format!(
            "cannot center a {kh}x{kw} kernel inside {target_kh}x{target_kw}"
        )));
    }
    let (off_h, off_w) = ((target_kh - kh) / 2, (target_kw - kw) / 2);
    let kernel = Tensor4::from_fn(d, c, target_kh, target_kw, |j, ci, u, v| {
        if u >= off_h && u < off_h + kh && v >= off_w && v < off_w + kw {
            params.kernel().at(j, ci, u - off_h, v - off_w)
        } else {
            0.0
        }
    });
    let padding = (params.padding().0 + off_h, params.padding().1 + off_w);
    ConvParams::new(
        kernel,
        params.bias().map(<[f64]>::to_vec),
        params.stride(),
        padding,
        params.groups(),
    )
}

/// Evaluates a 1×1→K×K sequence the way the training-time structure would,
/// honoring the pad placement. Used as the left-hand side of equivalence
/// checks against `fuse_sequential`.
pub fn forward_sequential(seq: &SeqConvBn, x: &Tensor4) -> Result<Tensor4> {
    let m = batchnorm_infer(&conv2d(x, &seq.first.conv)?, &seq.first.bn)?;
    let y = match seq.pad_mode {
        PadMode::PadFirst => conv2d(&m, &seq.second.conv)?,
        PadMode::BiasPad => {
            let (ph, pw) = seq.second.conv.padding();
            if ph != pw {
                return Err(Error::config(
                    "bias padding requires equal padding on both axes",
                ));
            }
            let border = folded_bias(seq.first.conv.bias(), &seq.first.bn);
            let padded = pad_input_with_bias(&m, &border, ph)?;
            conv2d(&padded, &seq.second.conv.with_padding((0, 0)))?
        }
    };
    batchnorm_infer(&y, &seq.second.bn)
}
