//! The training-time block zoo and its fusion pipeline.
//!
//! A block is a set of branches summed into one output: the original K×K
//! conv, a 1×1 conv, a 1×1→K×K sequence, a 1×1→average-pooling sequence,
//! asymmetric 1×K / K×1 kernels, or plain duplicates. Each branch collapses
//! to a K×K conv through the transforms, and the branch sum collapses through
//! kernel addition, so the whole block deploys as a single convolution.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    add, avgpool2d, batchnorm_infer, conv2d, BnParams, ConvParams, Tensor4,
};
use crate::transforms::{
    avgpool_to_conv, folded_bias, fuse_conv_bn, fuse_conv_pair_grouped, merge_branches,
    pad_input_with_bias, pad_kernel, ConvBn, PadMode,
};

/// Which branches a block carries in addition to nothing: the K×K conv and
/// the three enhancement paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSet {
    pub kxk: bool,
    pub one_by_one: bool,
    pub one_by_one_kxk: bool,
    pub one_by_one_avg: bool,
}

impl BranchSet {
    pub fn full() -> Self {
        BranchSet {
            kxk: true,
            one_by_one: true,
            one_by_one_kxk: true,
            one_by_one_avg: true,
        }
    }

    pub fn kxk_only() -> Self {
        BranchSet {
            kxk: true,
            one_by_one: false,
            one_by_one_kxk: false,
            one_by_one_avg: false,
        }
    }

    pub fn count(&self) -> usize {
        [self.kxk, self.one_by_one, self.one_by_one_kxk, self.one_by_one_avg]
            .iter()
            .filter(|&&b| b)
            .count()
    }
}

/// Per-branch batch norms (the usual training setup) or a single batch norm
/// after the branch addition (the purely linear setup).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    PerBranch,
    PostAddOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Branch set selected by `BlockSpec::branches`.
    Dbb,
    /// K×K plus 1×K and K×1 branches.
    Acb,
    /// N identical-config K×K branches.
    Duplicate(usize),
    /// A single K×K conv-BN.
    Baseline,
}

/// Declarative description of a block. `branches` is honored for the `Dbb`
/// variant; the other variants imply their branch structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub groups: usize,
    pub branches: BranchSet,
    pub bn_mode: BnMode,
    pub variant: Variant,
    pub pad_mode: PadMode,
}

impl BlockSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        groups: usize,
        variant: Variant,
    ) -> Self {
        BlockSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            groups,
            branches: BranchSet::full(),
            bn_mode: BnMode::PerBranch,
            variant,
            pad_mode: PadMode::default(),
        }
    }

    pub fn dbb(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, groups: usize) -> Self {
        let mut spec = BlockSpec::new(in_channels, out_channels, kernel_size, stride, groups, Variant::Dbb);
        if spec.is_depthwise() {
            spec.branches.one_by_one = false;
        }
        spec
    }

    pub fn baseline(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, groups: usize) -> Self {
        let mut spec = BlockSpec::new(in_channels, out_channels, kernel_size, stride, groups, Variant::Baseline);
        spec.branches = BranchSet::kxk_only();
        spec
    }

    pub fn with_branches(mut self, branches: BranchSet) -> Self {
        self.branches = branches;
        self
    }

    pub fn with_bn_mode(mut self, bn_mode: BnMode) -> Self {
        self.bn_mode = bn_mode;
        self
    }

    pub fn with_pad_mode(mut self, pad_mode: PadMode) -> Self {
        self.pad_mode = pad_mode;
        self
    }

    /// Every conv in a depthwise block keeps the full group count; the 1×1
    /// path is meaningless there (it would be a bare per-channel scaling).
    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    /// Padding that keeps the K×K conv shape-preserving at stride 1.
    pub fn block_padding(&self) -> usize {
        self.kernel_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernel_size;
        if k.is_multiple_of(2) || k <= 1 || k >= 7 {
            return Err(Error::config(format!(
                "kernel size must be odd and within (1, 7), got {k}"
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        if self.groups == 0
            || !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::config(format!(
                "groups {} must divide both channel counts {}/{}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        match self.variant {
            Variant::Dbb => {
                if self.branches.count() == 0 {
                    return Err(Error::config("a block needs at least one branch"));
                }
                if self.is_depthwise() && self.branches.one_by_one {
                    return Err(Error::config(
                        "depthwise blocks cannot carry the 1x1 branch",
                    ));
                }
            }
            Variant::Duplicate(0) => {
                return Err(Error::config("duplicate count must be positive"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// A conv with an optional batch norm (absent in purely linear blocks).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub conv: ConvParams,
    pub bn: Option<BnParams>,
}

impl ConvStage {
    /// The bias the stage contributes at positions whose input window is all
    /// virtual border: the folded conv-BN bias, or the raw conv bias.
    pub fn effective_bias(&self) -> Vec<f64> {
        match &self.bn {
            Some(bn) => folded_bias(self.conv.bias(), bn),
            None => self
                .conv
                .bias()
                .map_or_else(|| vec![0.0; self.conv.out_channels()], <[f64]>::to_vec),
        }
    }

    fn fold(&self) -> ConvParams {
        match &self.bn {
            Some(bn) => fuse_conv_bn(
                &ConvBn::new(self.conv.clone(), bn.clone()).expect("stage shapes agree"),
            ),
            None => self.conv.clone(),
        }
    }

    fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let y = conv2d(x, &self.conv)?;
        match &self.bn {
            Some(bn) => batchnorm_infer(&y, bn),
            None => Ok(y),
        }
    }
}

/// Average pooling over `channels` channels with an optional batch norm.
/// `padding` is the effective border the stage owes the block; it is realized
/// by filling the pool input border with the preceding stage's effective bias
/// (zeros when the pool is the first stage).
#[derive(Debug, Clone, PartialEq)]
pub struct PoolStage {
    pub channels: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bn: Option<BnParams>,
}

impl PoolStage {
    fn as_conv(&self) -> Result<ConvParams> {
        let conv = avgpool_to_conv(self.channels, self.k, self.stride, self.groups)?;
        Ok(conv.with_padding((self.padding, self.padding)))
    }

    fn fold(&self) -> Result<ConvParams> {
        let conv = self.as_conv()?;
        Ok(match &self.bn {
            Some(bn) => fuse_conv_bn(&ConvBn::new(conv, bn.clone()).expect("pool shapes agree")),
            None => conv,
        })
    }

    fn forward(&self, x: &Tensor4, border: &[f64]) -> Result<Tensor4> {
        let padded = if self.padding > 0 {
            pad_input_with_bias(x, border, self.padding)?
        } else {
            x.clone()
        };
        let y = avgpool2d(&padded, self.k, self.stride, 0)?;
        match &self.bn {
            Some(bn) => batchnorm_infer(&y, bn),
            None => Ok(y),
        }
    }
}

/// One branch of a block, as built for training.
#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    /// A single conv stage: the K×K branch, the 1×1 branch, or an
    /// asymmetric 1×K / K×1 branch.
    Conv(ConvStage),
    /// 1×1 stage followed by a K×K stage.
    ConvConv {
        first: ConvStage,
        second: ConvStage,
        pad_mode: PadMode,
    },
    /// 1×1 stage followed by average pooling.
    ConvPool {
        first: ConvStage,
        pool: PoolStage,
        pad_mode: PadMode,
    },
    /// Average pooling only (the depthwise form of the pooling branch).
    Pool(PoolStage),
}

impl Branch {
    fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        match self {
            Branch::Conv(stage) => stage.forward(x),
            Branch::ConvConv {
                first,
                second,
                pad_mode,
            } => {
                let m = first.forward(x)?;
                match pad_mode {
                    PadMode::PadFirst => second.forward(&m),
                    PadMode::BiasPad => {
                        let (ph, pw) = second.conv.padding();
                        if ph != pw {
                            return Err(Error::config(
                                "bias padding requires equal padding per axis",
                            ));
                        }
                        let padded = pad_input_with_bias(&m, &first.effective_bias(), ph)?;
                        let y = conv2d(&padded, &second.conv.with_padding((0, 0)))?;
                        match &second.bn {
                            Some(bn) => batchnorm_infer(&y, bn),
                            None => Ok(y),
                        }
                    }
                }
            }
            Branch::ConvPool {
                first,
                pool,
                pad_mode,
            } => {
                let m = first.forward(x)?;
                let border = match pad_mode {
                    // Padding already applied by the first stage.
                    PadMode::PadFirst => vec![0.0; pool.channels],
                    PadMode::BiasPad => first.effective_bias(),
                };
                pool.forward(&m, &border)
            }
            Branch::Pool(pool) => pool.forward(x, &vec![0.0; pool.channels]),
        }
    }

    /// Collapses the branch into one conv (kernel size still branch-specific).
    fn fuse(&self) -> Result<ConvParams> {
        match self {
            Branch::Conv(stage) => Ok(stage.fold()),
            Branch::ConvConv { first, second, .. } => {
                fuse_conv_pair_grouped(&first.fold(), &second.fold())
            }
            Branch::ConvPool { first, pool, .. } => {
                fuse_conv_pair_grouped(&first.fold(), &pool.fold()?)
            }
            Branch::Pool(pool) => pool.fold(),
        }
    }
}

/// The parameter bundle of a block: its branches plus the optional post-add
/// batch norm of purely linear setups.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    spec: BlockSpec,
    branches: Vec<Branch>,
    post_bn: Option<BnParams>,
}

impl BlockParams {
    pub fn new(spec: BlockSpec, branches: Vec<Branch>, post_bn: Option<BnParams>) -> Result<Self> {
        spec.validate()?;
        if branches.is_empty() {
            return Err(Error::config("a block needs at least one branch"));
        }
        if let Some(bn) = &post_bn {
            if bn.len() != spec.out_channels {
                return Err(Error::shape(format!(
                    "post-add batch norm over {} channels, block outputs {}",
                    bn.len(),
                    spec.out_channels
                )));
            }
        }
        Ok(BlockParams {
            spec,
            branches,
            post_bn,
        })
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [Branch] {
        &mut self.branches
    }

    pub fn post_bn(&self) -> Option<&BnParams> {
        self.post_bn.as_ref()
    }

    /// Wraps an already-fused conv as a single-branch baseline block with
    /// identity batch norm; evaluating it reproduces the conv bitwise.
    pub fn from_single_conv(conv: ConvParams) -> Result<Self> {
        let (kh, kw) = conv.kernel_size();
        if kh != kw {
            return Err(Error::config(format!(
                "baseline blocks need square kernels, got {kh}x{kw}"
            )));
        }
        if conv.stride().0 != conv.stride().1 {
            return Err(Error::config("baseline blocks need a uniform stride"));
        }
        if conv.padding() != (kh / 2, kw / 2) {
            return Err(Error::config(format!(
                "baseline blocks pad by K/2, got {:?}",
                conv.padding()
            )));
        }
        let spec = BlockSpec::baseline(
            conv.in_channels(),
            conv.out_channels(),
            kh,
            conv.stride().0,
            conv.groups(),
        );
        spec.validate()?;
        let bn = BnParams::identity(conv.out_channels());
        BlockParams::new(spec, vec![Branch::Conv(ConvStage { conv, bn: Some(bn) })], None)
    }
}

/// Role of a serialized tensor. Kernels, biases and the batch-norm affine
/// pair are learnable; batch-norm statistics are carried for inference but do
/// not count as parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    Bias,
    BnMean,
    BnStd,
    BnScale,
    BnShift,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        matches!(
            self,
            ParamKind::Kernel | ParamKind::Bias | ParamKind::BnScale | ParamKind::BnShift
        )
    }
}

/// One tensor of a block under its canonical name
/// (`branch<i>.stage<j>.kernel`, `branch<i>.stage<j>.bn.mean`, …,
/// `post_bn.scale`).
#[derive(Debug, Clone)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    pub kind: ParamKind,
}

fn push_bn<'a>(out: &mut Vec<NamedTensor<'a>>, prefix: &str, bn: &'a BnParams) {
    let d = bn.len();
    for (suffix, data, kind) in [
        ("mean", bn.mean(), ParamKind::BnMean),
        ("std", bn.std(), ParamKind::BnStd),
        ("scale", bn.scale(), ParamKind::BnScale),
        ("shift", bn.shift(), ParamKind::BnShift),
    ] {
        out.push(NamedTensor {
            name: format!("{prefix}.{suffix}"),
            shape: vec![d],
            data,
            kind,
        });
    }
}

fn push_conv_stage<'a>(out: &mut Vec<NamedTensor<'a>>, prefix: &str, stage: &'a ConvStage) {
    let (d, c, kh, kw) = stage.conv.kernel().shape();
    out.push(NamedTensor {
        name: format!("{prefix}.kernel"),
        shape: vec![d, c, kh, kw],
        data: stage.conv.kernel().data(),
        kind: ParamKind::Kernel,
    });
    if let Some(b) = stage.conv.bias() {
        out.push(NamedTensor {
            name: format!("{prefix}.bias"),
            shape: vec![d],
            data: b,
            kind: ParamKind::Bias,
        });
    }
    if let Some(bn) = &stage.bn {
        push_bn(out, &format!("{prefix}.bn"), bn);
    }
}

impl BlockParams {
    /// All tensors of the block in canonical serialization order.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (i, branch) in self.branches.iter().enumerate() {
            match branch {
                Branch::Conv(stage) => {
                    push_conv_stage(&mut out, &format!("branch{i}.stage0"), stage)
                }
                Branch::ConvConv { first, second, .. } => {
                    push_conv_stage(&mut out, &format!("branch{i}.stage0"), first);
                    push_conv_stage(&mut out, &format!("branch{i}.stage1"), second);
                }
                Branch::ConvPool { first, pool, .. } => {
                    push_conv_stage(&mut out, &format!("branch{i}.stage0"), first);
                    if let Some(bn) = &pool.bn {
                        push_bn(&mut out, &format!("branch{i}.stage1.bn"), bn);
                    }
                }
                Branch::Pool(pool) => {
                    if let Some(bn) = &pool.bn {
                        push_bn(&mut out, &format!("branch{i}.stage0.bn"), bn);
                    }
                }
            }
        }
        if let Some(bn) = &self.post_bn {
            push_bn(&mut out, "post_bn", bn);
        }
        out
    }

    /// Learnable parameter count (kernels, biases, batch-norm scale/shift).
    pub fn learnable_params(&self) -> u64 {
        self.named_tensors()
            .iter()
            .filter(|t| t.kind.learnable())
            .map(|t| t.shape.iter().product::<usize>() as u64)
            .sum()
    }

    /// Rebuilds a block from canonically named tensors, validating that the
    /// data matches the spec's expected parameter set exactly. Biases are
    /// optional per conv stage; everything else is required.
    pub fn from_named_data(
        spec: &BlockSpec,
        data: &HashMap<String, Vec<f64>>,
    ) -> Result<BlockParams> {
        let mut block = build_block(spec, 0)?;
        let mut used = HashSet::new();

        fn require<'m>(
            data: &'m HashMap<String, Vec<f64>>,
            used: &mut HashSet<String>,
            name: String,
            len: usize,
        ) -> Result<&'m [f64]> {
            let values = data
                .get(&name)
                .ok_or_else(|| Error::manifest(format!("missing entry {name}")))?;
            if values.len() != len {
                return Err(Error::manifest(format!(
                    "entry {name}: expected {len} values, got {}",
                    values.len()
                )));
            }
            used.insert(name);
            Ok(values)
        }

        fn read_bn(
            data: &HashMap<String, Vec<f64>>,
            used: &mut HashSet<String>,
            prefix: &str,
            channels: usize,
        ) -> Result<BnParams> {
            let mean = require(data, used, format!("{prefix}.mean"), channels)?.to_vec();
            let std = require(data, used, format!("{prefix}.std"), channels)?.to_vec();
            let scale = require(data, used, format!("{prefix}.scale"), channels)?.to_vec();
            let shift = require(data, used, format!("{prefix}.shift"), channels)?.to_vec();
            BnParams::from_std(mean, std, scale, shift)
                .map_err(|e| Error::manifest(format!("{prefix}: {e}")))
        }

        fn fill_conv_stage(
            data: &HashMap<String, Vec<f64>>,
            used: &mut HashSet<String>,
            prefix: &str,
            stage: &mut ConvStage,
        ) -> Result<()> {
            let shape = stage.conv.kernel().shape();
            let len = shape.0 * shape.1 * shape.2 * shape.3;
            let kernel = require(data, used, format!("{prefix}.kernel"), len)?.to_vec();
            let bias_name = format!("{prefix}.bias");
            let bias = match data.get(&bias_name) {
                Some(b) => {
                    if b.len() != shape.0 {
                        return Err(Error::manifest(format!(
                            "entry {bias_name}: expected {} values, got {}",
                            shape.0,
                            b.len()
                        )));
                    }
                    used.insert(bias_name);
                    Some(b.clone())
                }
                None => None,
            };
            stage.conv = stage.conv.with_params(Tensor4::new(shape, kernel)?, bias)?;
            if stage.bn.is_some() {
                stage.bn = Some(read_bn(data, used, &format!("{prefix}.bn"), shape.0)?);
            }
            Ok(())
        }

        for (i, branch) in block.branches.iter_mut().enumerate() {
            match branch {
                Branch::Conv(stage) => {
                    fill_conv_stage(data, &mut used, &format!("branch{i}.stage0"), stage)?
                }
                Branch::ConvConv { first, second, .. } => {
                    fill_conv_stage(data, &mut used, &format!("branch{i}.stage0"), first)?;
                    fill_conv_stage(data, &mut used, &format!("branch{i}.stage1"), second)?;
                }
                Branch::ConvPool { first, pool, .. } => {
                    fill_conv_stage(data, &mut used, &format!("branch{i}.stage0"), first)?;
                    if pool.bn.is_some() {
                        pool.bn = Some(read_bn(
                            data,
                            &mut used,
                            &format!("branch{i}.stage1.bn"),
                            pool.channels,
                        )?);
                    }
                }
                Branch::Pool(pool) => {
                    if pool.bn.is_some() {
                        pool.bn = Some(read_bn(
                            data,
                            &mut used,
                            &format!("branch{i}.stage0.bn"),
                            pool.channels,
                        )?);
                    }
                }
            }
        }
        if block.post_bn.is_some() {
            block.post_bn = Some(read_bn(data, &mut used, "post_bn", spec.out_channels)?);
        }

        for name in data.keys() {
            if !used.contains(name) {
                return Err(Error::manifest(format!("unexpected entry {name}")));
            }
        }
        Ok(block)
    }

    /// Quantizes every tensor through f32 and back; boundary conversion for
    /// 32-bit workflows.
    pub fn round_to_f32(&self) -> BlockParams {
        let quant_stage = |s: &ConvStage| ConvStage {
            conv: s.conv.round_to_f32(),
            bn: s.bn.as_ref().map(BnParams::round_to_f32),
        };
        let branches = self
            .branches
            .iter()
            .map(|b| match b {
                Branch::Conv(s) => Branch::Conv(quant_stage(s)),
                Branch::ConvConv {
                    first,
                    second,
                    pad_mode,
                } => Branch::ConvConv {
                    first: quant_stage(first),
                    second: quant_stage(second),
                    pad_mode: *pad_mode,
                },
                Branch::ConvPool {
                    first,
                    pool,
                    pad_mode,
                } => Branch::ConvPool {
                    first: quant_stage(first),
                    pool: PoolStage {
                        bn: pool.bn.as_ref().map(BnParams::round_to_f32),
                        ..pool.clone()
                    },
                    pad_mode: *pad_mode,
                },
                Branch::Pool(pool) => Branch::Pool(PoolStage {
                    bn: pool.bn.as_ref().map(BnParams::round_to_f32),
                    ..pool.clone()
                }),
            })
            .collect();
        BlockParams {
            spec: self.spec,
            branches,
            post_bn: self.post_bn.as_ref().map(BnParams::round_to_f32),
        }
    }
}

fn gaussian_kernel(rng: &mut ChaCha8Rng, d: usize, c: usize, kh: usize, kw: usize) -> Tensor4 {
    // Fan-in scaled init, fan_in = c·kh·kw.
    let std = (2.0 / (c * kh * kw) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor4::from_fn(d, c, kh, kw, |_, _, _, _| normal.sample(rng))
}

/// 1×1 kernel that maps every channel to itself under `groups`.
fn identity_one_by_one(channels: usize, groups: usize) -> Tensor4 {
    let c_per_g = channels / groups;
    Tensor4::from_fn(channels, c_per_g, 1, 1, |d, cl, _, _| {
        if cl == d % c_per_g {
            1.0
        } else {
            0.0
        }
    })
}

struct Builder {
    rng: ChaCha8Rng,
    per_branch_bn: bool,
}

impl Builder {
    fn bn(&self, d: usize) -> Option<BnParams> {
        self.per_branch_bn.then(|| BnParams::identity(d))
    }

    fn conv_stage(
        &mut self,
        d: usize,
        c_per_g: usize,
        k: (usize, usize),
        stride: usize,
        padding: (usize, usize),
        groups: usize,
    ) -> Result<ConvStage> {
        let kernel = gaussian_kernel(&mut self.rng, d, c_per_g, k.0, k.1);
        let conv = ConvParams::new(kernel, None, (stride, stride), padding, groups)?;
        Ok(ConvStage { conv, bn: self.bn(d) })
    }
}

/// Builds the block for a `Dbb` spec: branch parameters are allocated, conv
/// kernels take a fan-in-scaled Gaussian init from `seed`, the 1×1 stage of
/// the 1×1→K×K branch starts as the identity mapping over `in_channels`
/// internal channels, and every batch norm starts at identity statistics.
pub fn build_dbb(spec: &BlockSpec, seed: u64) -> Result<BlockParams> {
    spec.validate()?;
    if spec.variant != Variant::Dbb {
        return Err(Error::config("build_dbb expects the Dbb variant"));
    }
    let (c, d, k, s, g) = (
        spec.in_channels,
        spec.out_channels,
        spec.kernel_size,
        spec.stride,
        spec.groups,
    );
    let p = spec.block_padding();
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        per_branch_bn: spec.bn_mode == BnMode::PerBranch,
    };
    let mut branches = Vec::new();

    if spec.branches.kxk {
        branches.push(Branch::Conv(b.conv_stage(d, c / g, (k, k), s, (p, p), g)?));
    }
    if spec.branches.one_by_one {
        if spec.is_depthwise() {
            return Err(Error::config(
                "depthwise blocks cannot carry the 1x1 branch",
            ));
        }
        branches.push(Branch::Conv(b.conv_stage(d, c / g, (1, 1), s, (0, 0), g)?));
    }
    if spec.branches.one_by_one_kxk {
        // Internal channel count equals the input; the 1×1 starts as identity.
        let (p1, p2) = match spec.pad_mode {
            PadMode::PadFirst => ((p, p), (0, 0)),
            PadMode::BiasPad => ((0, 0), (p, p)),
        };
        let first = ConvStage {
            conv: ConvParams::new(identity_one_by_one(c, g), None, (1, 1), p1, g)?,
            bn: b.bn(c),
        };
        let second = b.conv_stage(d, c / g, (k, k), s, p2, g)?;
        branches.push(Branch::ConvConv {
            first,
            second,
            pad_mode: spec.pad_mode,
        });
    }
    if spec.branches.one_by_one_avg {
        if spec.is_depthwise() {
            // The 1×1 stage is elided; pooling reads the block input directly.
            branches.push(Branch::Pool(PoolStage {
                channels: d,
                k,
                stride: s,
                padding: p,
                groups: g,
                bn: b.bn(d),
            }));
        } else {
            let (p1, pool_pad) = match spec.pad_mode {
                PadMode::PadFirst => ((p, p), 0),
                PadMode::BiasPad => ((0, 0), p),
            };
            let first = ConvStage {
                conv: ConvParams::new(
                    gaussian_kernel(&mut b.rng, d, c / g, 1, 1),
                    None,
                    (1, 1),
                    p1,
                    g,
                )?,
                bn: b.bn(d),
            };
            branches.push(Branch::ConvPool {
                first,
                pool: PoolStage {
                    channels: d,
                    k,
                    stride: s,
                    padding: pool_pad,
                    groups: g,
                    bn: b.bn(d),
                },
                pad_mode: spec.pad_mode,
            });
        }
    }

    let post_bn = (spec.bn_mode == BnMode::PostAddOnly).then(|| BnParams::identity(d));
    BlockParams::new(*spec, branches, post_bn)
}

/// Builds the comparison blocks: asymmetric-kernel blocks, duplicate-branch
/// blocks and the single-conv baseline.
pub fn build_counterpart(spec: &BlockSpec, seed: u64) -> Result<BlockParams> {
    spec.validate()?;
    let (c, d, k, s, g) = (
        spec.in_channels,
        spec.out_channels,
        spec.kernel_size,
        spec.stride,
        spec.groups,
    );
    let p = spec.block_padding();
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        per_branch_bn: spec.bn_mode == BnMode::PerBranch,
    };

    let branches = match spec.variant {
        Variant::Acb => vec![
            Branch::Conv(b.conv_stage(d, c / g, (k, k), s, (p, p), g)?),
            Branch::Conv(b.conv_stage(d, c / g, (1, k), s, (0, p), g)?),
            Branch::Conv(b.conv_stage(d, c / g, (k, 1), s, (p, 0), g)?),
        ],
        Variant::Duplicate(n) => (0..n)
            .map(|_| Ok(Branch::Conv(b.conv_stage(d, c / g, (k, k), s, (p, p), g)?)))
            .collect::<Result<Vec<_>>>()?,
        Variant::Baseline => vec![Branch::Conv(b.conv_stage(d, c / g, (k, k), s, (p, p), g)?)],
        Variant::Dbb => return Err(Error::config("use build_dbb for the Dbb variant")),
    };

    let post_bn = (spec.bn_mode == BnMode::PostAddOnly).then(|| BnParams::identity(d));
    BlockParams::new(*spec, branches, post_bn)
}

/// Builds whichever block the spec's variant calls for.
pub fn build_block(spec: &BlockSpec, seed: u64) -> Result<BlockParams> {
    match spec.variant {
        Variant::Dbb => build_dbb(spec, seed),
        _ => build_counterpart(spec, seed),
    }
}

fn random_bn(rng: &mut ChaCha8Rng, d: usize) -> BnParams {
    BnParams::from_moments(
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..d).map(|_| rng.gen_range(0.05..2.0)).collect(),
        (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        1e-5,
    )
    .expect("generated statistics are valid")
}

fn randomize_stage(rng: &mut ChaCha8Rng, stage: &mut ConvStage) {
    let shape = stage.conv.kernel().shape();
    let kernel = Tensor4::from_fn(shape.0, shape.1, shape.2, shape.3, |_, _, _, _| {
        rng.gen_range(-1.0..1.0)
    });
    let bias = stage
        .conv
        .bias()
        .map(|b| b.iter().map(|_| rng.gen_range(-1.0..1.0)).collect());
    stage.conv = stage
        .conv
        .with_params(kernel, bias)
        .expect("shape is unchanged");
    if let Some(bn) = &mut stage.bn {
        *bn = random_bn(rng, bn.len());
    }
}

/// Replaces every learnable tensor and batch-norm statistic with random
/// draws. Equivalence checks use arbitrary parameters rather than the
/// training init.
pub fn randomize_block(block: &mut BlockParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for branch in &mut block.branches {
        match branch {
            Branch::Conv(stage) => randomize_stage(&mut rng, stage),
            Branch::ConvConv { first, second, .. } => {
                randomize_stage(&mut rng, first);
                randomize_stage(&mut rng, second);
            }
            Branch::ConvPool { first, pool, .. } => {
                randomize_stage(&mut rng, first);
                if let Some(bn) = &mut pool.bn {
                    *bn = random_bn(&mut rng, bn.len());
                }
            }
            Branch::Pool(pool) => {
                if let Some(bn) = &mut pool.bn {
                    *bn = random_bn(&mut rng, bn.len());
                }
            }
        }
    }
    if let Some(bn) = &mut block.post_bn {
        *bn = random_bn(&mut rng, bn.len());
    }
}

/// Evaluates the branched structure: every branch runs on the tensor-op
/// primitives (including bias padding where configured), branch outputs are
/// summed, and the post-add batch norm is applied if the block has one.
pub fn forward_block(block: &BlockParams, x: &Tensor4) -> Result<Tensor4> {
    let (_, c, _, _) = x.shape();
    if c != block.spec.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, block expects {}",
            block.spec.in_channels
        )));
    }
    let mut acc: Option<Tensor4> = None;
    for branch in &block.branches {
        let y = branch.forward(x)?;
        acc = Some(match acc {
            Some(a) => add(&a, &y)?,
            None => y,
        });
    }
    let summed = acc.expect("blocks carry at least one branch");
    match &block.post_bn {
        Some(bn) => batchnorm_infer(&summed, bn),
        None => Ok(summed),
    }
}

/// Collapses a block into a single conv: each branch is fused on its own,
/// kernels are zero-padded to the block's K×K, branches are merged by
/// addition, and a post-add batch norm (if any) is folded into the result.
pub fn fuse_block(block: &BlockParams) -> Result<ConvParams> {
    let k = block.spec.kernel_size;
    let mut fused = Vec::with_capacity(block.branches.len());
    for branch in &block.branches {
        let conv = branch.fuse()?;
        let conv = if conv.kernel_size() == (k, k) {
            conv
        } else {
            pad_kernel(&conv, k, k)?
        };
        fused.push(conv);
    }
    let merged = merge_branches(&fused)?;
    let merged = match &block.post_bn {
        Some(bn) => fuse_conv_bn(&ConvBn::new(merged, bn.clone())?),
        None => merged,
    };

    let spec = &block.spec;
    let expected_kernel = (
        spec.out_channels,
        spec.in_channels / spec.groups,
        k,
        k,
    );
    if merged.kernel().shape() != expected_kernel
        || merged.stride() != (spec.stride, spec.stride)
        || merged.padding() != (spec.block_padding(), spec.block_padding())
        || merged.groups() != spec.groups
    {
        return Err(Error::config(format!(
            "fused conv has shape {:?} stride {:?} padding {:?} groups {}, expected {:?}",
            merged.kernel().shape(),
            merged.stride(),
            merged.padding(),
            merged.groups(),
            expected_kernel
        )));
    }
    Ok(merged)
}
