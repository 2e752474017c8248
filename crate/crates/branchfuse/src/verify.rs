//! Randomized equivalence campaigns, architecture-level parameter accounting,
//! and fused-vs-branched timing.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    build_block, forward_block, fuse_block, randomize_block, BlockParams, BlockSpec, BnMode,
    BranchSet, Variant,
};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, ElementType, Tensor4};
use crate::transforms::PadMode;

/// Block families exercised by the campaign: every subset of the three
/// enhancement branches (the empty subset is the baseline), the depthwise
/// form, asymmetric kernels, duplicates, and the purely linear setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CampaignVariant {
    DbbSubset {
        one_by_one: bool,
        seq: bool,
        avg: bool,
    },
    DepthwiseDbb,
    Acb,
    Duplicate(usize),
    LinearDbb {
        one_by_one: bool,
        seq: bool,
        avg: bool,
    },
    LinearDuplicate(usize),
}

impl CampaignVariant {
    /// The full default menu: 8 branch subsets, the depthwise block, the
    /// asymmetric block, double/triple duplicates and three purely linear
    /// setups.
    pub fn all() -> Vec<CampaignVariant> {
        let mut v = Vec::new();
        for bits in 0..8u8 {
            v.push(CampaignVariant::DbbSubset {
                one_by_one: bits & 1 != 0,
                seq: bits & 2 != 0,
                avg: bits & 4 != 0,
            });
        }
        v.push(CampaignVariant::DepthwiseDbb);
        v.push(CampaignVariant::Acb);
        v.push(CampaignVariant::Duplicate(2));
        v.push(CampaignVariant::Duplicate(3));
        v.push(CampaignVariant::LinearDbb {
            one_by_one: true,
            seq: true,
            avg: true,
        });
        v.push(CampaignVariant::LinearDbb {
            one_by_one: true,
            seq: false,
            avg: false,
        });
        v.push(CampaignVariant::LinearDuplicate(2));
        v
    }

    pub fn label(&self) -> String {
        match self {
            CampaignVariant::DbbSubset {
                one_by_one,
                seq,
                avg,
            } => {
                let mut parts = vec!["kxk"];
                if *one_by_one {
                    parts.push("1x1");
                }
                if *seq {
                    parts.push("1x1_kxk");
                }
                if *avg {
                    parts.push("1x1_avg");
                }
                format!("dbb[{}]", parts.join("+"))
            }
            CampaignVariant::DepthwiseDbb => "dbb_depthwise".into(),
            CampaignVariant::Acb => "acb".into(),
            CampaignVariant::Duplicate(n) => format!("duplicate{n}"),
            CampaignVariant::LinearDbb {
                one_by_one,
                seq,
                avg,
            } => {
                let mut parts = vec!["kxk"];
                if *one_by_one {
                    parts.push("1x1");
                }
                if *seq {
                    parts.push("1x1_kxk");
                }
                if *avg {
                    parts.push("1x1_avg");
                }
                format!("linear_dbb[{}]", parts.join("+"))
            }
            CampaignVariant::LinearDuplicate(n) => format!("linear_duplicate{n}"),
        }
    }
}

/// Ranges and settings of one equivalence campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialConfig {
    pub trials: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub element_type: ElementType,
    pub variants: Vec<CampaignVariant>,
    /// Inclusive channel range for both input and output channels.
    pub channels: (usize, usize),
    /// Inclusive spatial extent range.
    pub spatial: (usize, usize),
    /// Inclusive batch size range.
    pub batch: (usize, usize),
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
}

impl TrialConfig {
    /// 64-bit campaign over the full variant menu at the default tolerance.
    pub fn default_f64(trials: usize, seed: u64) -> Self {
        TrialConfig {
            trials,
            tolerance: 1e-10,
            seed,
            element_type: ElementType::F64,
            variants: CampaignVariant::all(),
            channels: (1, 8),
            spatial: (4, 9),
            batch: (1, 2),
            kernel_sizes: vec![3, 5],
            strides: vec![1, 2],
        }
    }

    /// 32-bit campaign: parameters and inputs are quantized through f32 and
    /// the comparison uses relative error.
    pub fn default_f32(trials: usize, seed: u64) -> Self {
        TrialConfig {
            tolerance: 1e-3,
            element_type: ElementType::F32,
            ..TrialConfig::default_f64(trials, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("campaign needs at least one trial"));
        }
        if self.tolerance <= 0.0 || self.tolerance.is_nan() {
            return Err(Error::config("tolerance must be positive"));
        }
        if self.variants.is_empty()
            || self.kernel_sizes.is_empty()
            || self.strides.is_empty()
            || self.channels.0 == 0
            || self.channels.1 < self.channels.0
            || self.spatial.1 < self.spatial.0
            || self.batch.0 == 0
            || self.batch.1 < self.batch.0
        {
            return Err(Error::config("campaign ranges are empty or inverted"));
        }
        Ok(())
    }
}

/// Result of one trial: the configuration echo plus both error metrics.
/// 64-bit trials gate on absolute error, 32-bit trials on relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub index: usize,
    pub config: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub config: TrialConfig,
    pub trials: Vec<TrialOutcome>,
    pub max_error: f64,
    pub failures: usize,
}

impl TrialReport {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }

    /// Machine-readable key=value lines for scripting.
    pub fn summary_lines(&self) -> Vec<String> {
        vec![
            format!("trials={}", self.trials.len()),
            format!("failures={}", self.failures),
            format!("max_error={:.3e}", self.max_error),
            format!("tolerance={:.3e}", self.config.tolerance),
            format!("element_type={}", self.config.element_type.name()),
            format!("seed={}", self.config.seed),
            format!("pass={}", self.pass()),
        ]
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.gen_range(0..items.len())]
}

/// Group counts compatible with the draw: 1, 2 and C, filtered for
/// divisibility. The 1×1 branch cannot live in a depthwise block, so those
/// group counts are excluded when the subset carries it.
fn group_candidates(c: usize, d: usize, one_by_one: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for g in [1, 2, c] {
        if g == 0 || !c.is_multiple_of(g) || !d.is_multiple_of(g) || out.contains(&g) {
            continue;
        }
        let depthwise = g > 1 && g == c && g == d;
        if depthwise && one_by_one {
            continue;
        }
        out.push(g);
    }
    out
}

fn spec_for_trial(
    rng: &mut ChaCha8Rng,
    cfg: &TrialConfig,
    variant: CampaignVariant,
) -> BlockSpec {
    let (lo, hi) = cfg.channels;
    let k = pick(rng, &cfg.kernel_sizes);
    let s = pick(rng, &cfg.strides);
    let pad_mode = if rng.gen_bool(0.5) {
        PadMode::BiasPad
    } else {
        PadMode::PadFirst
    };

    let (c, d, g, variant_kind, branches, bn_mode) = match variant {
        CampaignVariant::DbbSubset {
            one_by_one,
            seq,
            avg,
        }
        | CampaignVariant::LinearDbb {
            one_by_one,
            seq,
            avg,
        } => {
            let c = rng.gen_range(lo..=hi);
            let d = rng.gen_range(lo..=hi);
            let g = pick(rng, &group_candidates(c, d, one_by_one));
            let branches = BranchSet {
                kxk: true,
                one_by_one,
                one_by_one_kxk: seq,
                one_by_one_avg: avg,
            };
            let bn_mode = match variant {
                CampaignVariant::LinearDbb { .. } => BnMode::PostAddOnly,
                _ => BnMode::PerBranch,
            };
            (c, d, g, Variant::Dbb, branches, bn_mode)
        }
        CampaignVariant::DepthwiseDbb => {
            let c = rng.gen_range(lo.max(2)..=hi.max(2));
            let branches = BranchSet {
                kxk: true,
                one_by_one: false,
                one_by_one_kxk: true,
                one_by_one_avg: true,
            };
            (c, c, c, Variant::Dbb, branches, BnMode::PerBranch)
        }
        CampaignVariant::Acb => {
            let c = rng.gen_range(lo..=hi);
            let d = rng.gen_range(lo..=hi);
            let g = pick(rng, &group_candidates(c, d, false));
            (c, d, g, Variant::Acb, BranchSet::kxk_only(), BnMode::PerBranch)
        }
        CampaignVariant::Duplicate(n) | CampaignVariant::LinearDuplicate(n) => {
            let c = rng.gen_range(lo..=hi);
            let d = rng.gen_range(lo..=hi);
            let g = pick(rng, &group_candidates(c, d, false));
            let bn_mode = match variant {
                CampaignVariant::LinearDuplicate(_) => BnMode::PostAddOnly,
                _ => BnMode::PerBranch,
            };
            (c, d, g, Variant::Duplicate(n), BranchSet::kxk_only(), bn_mode)
        }
    };

    BlockSpec {
        in_channels: c,
        out_channels: d,
        kernel_size: k,
        stride: s,
        groups: g,
        branches,
        bn_mode,
        variant: variant_kind,
        pad_mode,
    }
}

fn max_rel_error(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Runs a randomized campaign: every trial builds a block of the next variant
/// in the menu with random parameters, fuses it, and compares the branched
/// forward against the fused conv on a random input. Deterministic for a
/// fixed seed. Failures are reported, never thrown.
pub fn run_equivalence_campaign(cfg: &TrialConfig) -> Result<TrialReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials = Vec::with_capacity(cfg.trials);
    let mut max_error = 0.0f64;
    let mut failures = 0;

    for index in 0..cfg.trials {
        let variant = cfg.variants[index % cfg.variants.len()];
        let spec = spec_for_trial(&mut rng, cfg, variant);
        let mut block = build_block(&spec, rng.gen())?;
        randomize_block(&mut block, rng.gen());
        if cfg.element_type == ElementType::F32 {
            block = block.round_to_f32();
        }

        let n = rng.gen_range(cfg.batch.0..=cfg.batch.1);
        let h = rng.gen_range(cfg.spatial.0..=cfg.spatial.1);
        let w = rng.gen_range(cfg.spatial.0..=cfg.spatial.1);
        let mut x = {
            let mut data_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            Tensor4::from_fn(n, spec.in_channels, h, w, |_, _, _, _| {
                data_rng.gen_range(-1.0..1.0)
            })
        };

        let mut fused = fuse_block(&block)?;
        if cfg.element_type == ElementType::F32 {
            fused = fused.round_to_f32();
            x = x.round_to_f32();
        }

        let branched = forward_block(&block, &x)?;
        let direct = conv2d(&x, &fused)?;
        let abs = branched.max_abs_diff(&direct)?;
        let rel = max_rel_error(&branched, &direct);
        let metric = match cfg.element_type {
            ElementType::F64 => abs,
            ElementType::F32 => rel,
        };
        let pass = metric <= cfg.tolerance;
        if !pass {
            failures += 1;
        }
        max_error = max_error.max(metric);
        trials.push(TrialOutcome {
            index,
            config: format!(
                "{} C={} D={} K={} s={} g={} n={} h={} w={}",
                variant.label(),
                spec.in_channels,
                spec.out_channels,
                spec.kernel_size,
                spec.stride,
                spec.groups,
                n,
                h,
                w
            ),
            max_abs_error: abs,
            max_rel_error: rel,
            pass,
        });
    }

    Ok(TrialReport {
        config: cfg.clone(),
        trials,
        max_error,
        failures,
    })
}

/// One conv layer of an architecture description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub groups: usize,
    /// Whether the layer (and its batch norm) is replaced by a block when
    /// counting a multi-branch variant. Only odd kernels within (1, 7)
    /// qualify.
    pub replaceable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchLayer {
    Conv(ConvLayer),
    Fc { inputs: usize, outputs: usize },
}

/// Ordered layer list of a network, for parameter accounting. Every conv is
/// assumed to be followed by a batch norm during training; at inference every
/// conv carries a bias and batch norms are gone.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub layers: Vec<ArchLayer>,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        for layer in &self.layers {
            if let ArchLayer::Conv(conv) = layer {
                let k = conv.kernel_size;
                if conv.replaceable && (k.is_multiple_of(2) || k <= 1 || k >= 7) {
                    return Err(Error::config(format!(
                        "layer with kernel {k} cannot be replaceable"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The standard 18-layer residual classifier: 7×7 stem, sixteen
    /// replaceable 3×3 convs in eight two-conv blocks, 1×1 downsample convs
    /// on stage transitions, and a 1000-way classifier head.
    pub fn resnet18() -> ArchSpec {
        let conv = |cin, cout, k, stride, replaceable| {
            ArchLayer::Conv(ConvLayer {
                in_channels: cin,
                out_channels: cout,
                kernel_size: k,
                stride,
                groups: 1,
                replaceable,
            })
        };
        let mut layers = vec![conv(3, 64, 7, 2, false)];
        let stages: [(usize, usize, usize); 4] =
            [(64, 64, 1), (64, 128, 2), (128, 256, 2), (256, 512, 2)];
        for (cin, cout, stride) in stages {
            // First block of the stage; downsamples when the shape changes.
            layers.push(conv(cin, cout, 3, stride, true));
            layers.push(conv(cout, cout, 3, 1, true));
            if stride != 1 || cin != cout {
                layers.push(conv(cin, cout, 1, stride, false));
            }
            // Second block.
            layers.push(conv(cout, cout, 3, 1, true));
            layers.push(conv(cout, cout, 3, 1, true));
        }
        layers.push(ArchLayer::Fc {
            inputs: 512,
            outputs: 1000,
        });
        ArchSpec {
            name: "resnet18".into(),
            layers,
        }
    }
}

/// Which block replaces each replaceable conv during training-time counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub variant: Variant,
    pub branches: BranchSet,
    pub bn_mode: BnMode,
}

impl VariantSpec {
    pub fn baseline() -> Self {
        VariantSpec {
            variant: Variant::Baseline,
            branches: BranchSet::kxk_only(),
            bn_mode: BnMode::PerBranch,
        }
    }

    pub fn dbb_full() -> Self {
        VariantSpec {
            variant: Variant::Dbb,
            branches: BranchSet::full(),
            bn_mode: BnMode::PerBranch,
        }
    }

    pub fn dbb_subset(one_by_one: bool, seq: bool, avg: bool) -> Self {
        VariantSpec {
            variant: Variant::Dbb,
            branches: BranchSet {
                kxk: true,
                one_by_one,
                one_by_one_kxk: seq,
                one_by_one_avg: avg,
            },
            bn_mode: BnMode::PerBranch,
        }
    }

    pub fn acb() -> Self {
        VariantSpec {
            variant: Variant::Acb,
            branches: BranchSet::kxk_only(),
            bn_mode: BnMode::PerBranch,
        }
    }

    pub fn duplicate(n: usize) -> Self {
        VariantSpec {
            variant: Variant::Duplicate(n),
            branches: BranchSet::kxk_only(),
            bn_mode: BnMode::PerBranch,
        }
    }

    pub fn with_bn_mode(mut self, bn_mode: BnMode) -> Self {
        self.bn_mode = bn_mode;
        self
    }

    fn block_spec(&self, conv: &ConvLayer) -> BlockSpec {
        let mut spec = BlockSpec::new(
            conv.in_channels,
            conv.out_channels,
            conv.kernel_size,
            conv.stride,
            conv.groups,
            self.variant,
        );
        spec.branches = self.branches;
        spec.bn_mode = self.bn_mode;
        if spec.is_depthwise() {
            spec.branches.one_by_one = false;
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Training,
    Inference,
}

impl Phase {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "training" => Ok(Phase::Training),
            "inference" => Ok(Phase::Inference),
            other => Err(Error::config(format!(
                "unknown phase {other:?}, expected training or inference"
            ))),
        }
    }
}

/// Counts learnable parameters: conv kernels, conv biases where present,
/// batch-norm scale and shift, and classifier weights and bias. Batch-norm
/// running statistics are excluded. During training, replaceable convs are
/// expanded to the variant's block and every conv is bias-free (a batch norm
/// follows); at inference every conv is a single fused kernel plus bias and
/// batch norms are gone.
pub fn count_params(arch: &ArchSpec, variant: &VariantSpec, phase: Phase) -> Result<u64> {
    arch.validate()?;
    let mut total: u64 = 0;
    for layer in &arch.layers {
        total += match layer {
            ArchLayer::Conv(conv) => {
                let kernel = (conv.out_channels * (conv.in_channels / conv.groups)
                    * conv.kernel_size
                    * conv.kernel_size) as u64;
                match phase {
                    Phase::Inference => kernel + conv.out_channels as u64,
                    Phase::Training if conv.replaceable => {
                        let spec = variant.block_spec(conv);
                        build_block(&spec, 0)?.learnable_params()
                    }
                    Phase::Training => kernel + 2 * conv.out_channels as u64,
                }
            }
            ArchLayer::Fc { inputs, outputs } => (inputs * outputs + outputs) as u64,
        };
    }
    Ok(total)
}

/// Wall-clock medians for the branched and fused forward passes.
#[derive(Debug, Clone, Copy)]
pub struct BenchResult {
    pub branched: Duration,
    pub fused: Duration,
}

impl BenchResult {
    /// How many times faster the fused conv runs.
    pub fn speedup(&self) -> f64 {
        self.branched.as_secs_f64() / self.fused.as_secs_f64().max(1e-12)
    }
}

fn median(mut samples: Vec<Duration>) -> Duration {
    samples.sort();
    samples[samples.len() / 2]
}

/// Times the branched forward against the fused single-conv forward on the
/// same random input. One warmup round, then `repeats` timed rounds each;
/// medians are reported. Single-threaded.
pub fn bench_block(
    block: &BlockParams,
    input_shape: (usize, usize, usize, usize),
    repeats: usize,
) -> Result<BenchResult> {
    if repeats < 3 {
        return Err(Error::config("benchmark needs at least 3 repeats"));
    }
    let (n, c, h, w) = input_shape;
    if c != block.spec().in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, block expects {}",
            block.spec().in_channels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x8e4c);
    let x = Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.gen_range(-1.0..1.0));
    let fused = fuse_block(block)?;

    forward_block(block, &x)?;
    conv2d(&x, &fused)?;

    let mut branched = Vec::with_capacity(repeats);
    let mut direct = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let y = forward_block(block, &x)?;
        branched.push(t.elapsed());
        std::hint::black_box(&y);

        let t = Instant::now();
        let y = conv2d(&x, &fused)?;
        direct.push(t.elapsed());
        std::hint::black_box(&y);
    }
    Ok(BenchResult {
        branched: median(branched),
        fused: median(direct),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE_ROWS: &[(&str, f64)] = &[
        ("dbb_full", 26.33),
        ("dbb_seq_avg", 25.09),
        ("dbb_1x1_avg", 14.18),
        ("dbb_1x1_seq", 25.08),
        ("dbb_1x1", 12.93),
        ("dbb_seq", 23.84),
        ("dbb_avg", 12.95),
        ("baseline", 11.69),
        ("double_duplicate", 22.69),
        ("triple_duplicate", 33.70),
    ];

    fn variant_by_name(name: &str) -> VariantSpec {
        match name {
            "dbb_full" => VariantSpec::dbb_full(),
            "dbb_seq_avg" => VariantSpec::dbb_subset(false, true, true),
            "dbb_1x1_avg" => VariantSpec::dbb_subset(true, false, true),
            "dbb_1x1_seq" => VariantSpec::dbb_subset(true, true, false),
            "dbb_1x1" => VariantSpec::dbb_subset(true, false, false),
            "dbb_seq" => VariantSpec::dbb_subset(false, true, false),
            "dbb_avg" => VariantSpec::dbb_subset(false, false, true),
            "baseline" => VariantSpec::baseline(),
            "double_duplicate" => VariantSpec::duplicate(2),
            "triple_duplicate" => VariantSpec::duplicate(3),
            other => panic!("unknown variant {other}"),
        }
    }

    #[test]
    fn campaign_small_run_passes() {
        let report = run_equivalence_campaign(&TrialConfig::default_f64(30, 11)).unwrap();
        assert_eq!(report.failures, 0, "failures: {:#?}", report.trials);
        assert!(report.max_error <= 1e-10);
    }

    #[test]
    fn campaign_is_deterministic() {
        let cfg = TrialConfig::default_f64(20, 99);
        let a = run_equivalence_campaign(&cfg).unwrap();
        let b = run_equivalence_campaign(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_baseline_trial_error_is_tiny() {
        let cfg = TrialConfig {
            trials: 1,
            variants: vec![CampaignVariant::DbbSubset {
                one_by_one: false,
                seq: false,
                avg: false,
            }],
            ..TrialConfig::default_f64(1, 5)
        };
        let report = run_equivalence_campaign(&cfg).unwrap();
        assert_eq!(report.failures, 0);
        assert!(report.max_error <= 1e-13, "error {}", report.max_error);
    }

    #[test]
    fn f32_campaign_passes_relative_tolerance() {
        let report = run_equivalence_campaign(&TrialConfig::default_f32(30, 12)).unwrap();
        assert_eq!(report.failures, 0, "failures: {:#?}", report.trials);
    }

    #[test]
    fn campaign_rejects_bad_config() {
        let mut cfg = TrialConfig::default_f64(10, 1);
        cfg.trials = 0;
        assert!(run_equivalence_campaign(&cfg).is_err());
    }

    #[test]
    fn resnet18_has_sixteen_replaceable_convs() {
        let arch = ArchSpec::resnet18();
        arch.validate().unwrap();
        let replaceable = arch
            .layers
            .iter()
            .filter(|l| matches!(l, ArchLayer::Conv(c) if c.replaceable))
            .count();
        assert_eq!(replaceable, 16);
        let convs = arch
            .layers
            .iter()
            .filter(|l| matches!(l, ArchLayer::Conv(_)))
            .count();
        assert_eq!(convs, 20);
    }

    #[test]
    fn training_counts_match_frozen_expectations() {
        // Counts computed independently from the layer shapes under the
        // stated convention: bias-free convs before batch norm, batch-norm
        // scale/shift counted, running stats excluded.
        let expected: &[(&str, u64)] = &[
            ("dbb_full", 26_288_296),
            ("dbb_seq_avg", 25_060_008),
            ("dbb_1x1_avg", 14_153_768),
            ("dbb_1x1_seq", 25_052_328),
            ("dbb_1x1", 12_917_800),
            ("dbb_seq", 23_824_040),
            ("dbb_avg", 12_925_480),
            ("baseline", 11_689_512),
            ("double_duplicate", 22_682_664),
            ("triple_duplicate", 33_675_816),
        ];
        let arch = ArchSpec::resnet18();
        for (name, count) in expected {
            let got = count_params(&arch, &variant_by_name(name), Phase::Training).unwrap();
            assert_eq!(got, *count, "variant {name}");
        }
    }

    #[test]
    fn training_counts_match_published_table() {
        let arch = ArchSpec::resnet18();
        for (name, millions) in TABLE_ROWS {
            let got = count_params(&arch, &variant_by_name(name), Phase::Training).unwrap();
            let diff = (got as f64 / 1e6 - millions).abs();
            assert!(
                diff <= 0.05,
                "variant {name}: {got} vs {millions}M (diff {diff:.4}M)"
            );
        }
    }

    #[test]
    fn inference_counts_are_variant_independent() {
        let arch = ArchSpec::resnet18();
        let baseline = count_params(&arch, &VariantSpec::baseline(), Phase::Inference).unwrap();
        assert_eq!(baseline, 11_684_712);
        assert!((baseline as f64 / 1e6 - 11.68).abs() <= 0.05);
        for (name, _) in TABLE_ROWS {
            let got = count_params(&arch, &variant_by_name(name), Phase::Inference).unwrap();
            assert_eq!(got, baseline, "variant {name}");
        }
        let acb = count_params(&arch, &VariantSpec::acb(), Phase::Inference).unwrap();
        assert_eq!(acb, baseline);
    }

    #[test]
    fn bench_returns_nonzero_times() {
        let mut block = build_block(&BlockSpec::dbb(4, 4, 3, 1, 1), 3).unwrap();
        randomize_block(&mut block, 4);
        let result = bench_block(&block, (1, 4, 16, 16), 3).unwrap();
        assert!(result.branched > Duration::ZERO);
        assert!(result.fused > Duration::ZERO);
        assert!(bench_block(&block, (1, 4, 16, 16), 2).is_err());
    }
}
