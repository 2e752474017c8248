//! Command-line surface: initialize block weights, fuse them into a single
//! conv, run equivalence campaigns, count parameters and benchmark.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or IO error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use branchfuse::blocks::{
    build_block, forward_block, fuse_block, randomize_block, BlockParams, BnMode,
};
use branchfuse::error::{Error, Result};
use branchfuse::io::{load_spec, load_weights, save_spec, save_weights};
use branchfuse::tensor::{conv2d, ElementType, Tensor4};
use branchfuse::verify::{
    bench_block, count_params, run_equivalence_campaign, ArchSpec, Phase, TrialConfig, VariantSpec,
};

#[derive(Parser)]
#[command(
    name = "branchfuse",
    version,
    about = "Build multi-branch conv blocks and collapse them into a single conv"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write freshly initialized weights for a block spec.
    Init {
        /// Block spec TOML file.
        #[arg(long)]
        spec: PathBuf,
        /// Output weight manifest path (payload goes to <out>.bin).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "BRANCHFUSE_SEED", default_value_t = 0)]
        seed: u64,
        /// Element type of the payload: f32 or f64.
        #[arg(long, default_value = "f64")]
        dtype: String,
        /// Replace the training init with fully random parameters and
        /// batch-norm statistics.
        #[arg(long)]
        randomize: bool,
    },
    /// Collapse a block into one conv and write it as a baseline block.
    Fuse {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Output weight manifest path; the matching spec goes to <out>.spec.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "f64")]
        dtype: String,
        /// Seed for the built-in three-input spot check.
        #[arg(long, env = "BRANCHFUSE_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Run a randomized branched-vs-fused equivalence campaign.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Override the default tolerance (1e-10 for f64, 1e-3 relative for f32).
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, env = "BRANCHFUSE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "f64")]
        dtype: String,
        /// Print one line per trial.
        #[arg(long)]
        verbose: bool,
    },
    /// Count learnable parameters of an architecture under a block variant.
    CountParams {
        /// Architecture name (resnet18).
        arch: String,
        /// baseline | dbb | dbb:<branches> | acb | duplicate:<n>,
        /// optionally prefixed with linear- to move batch norm after the
        /// addition. Branches are +-separated from {1x1, 1x1_kxk, 1x1_avg}.
        variant: String,
        /// training | inference
        phase: String,
    },
    /// Time the branched forward against the fused single conv.
    Bench {
        #[arg(long)]
        spec: PathBuf,
        /// Weight manifest; omitted, the block is built from --seed.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Input shape as N,C,H,W.
        #[arg(long, default_value = "1,64,56,56")]
        input: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, env = "BRANCHFUSE_SEED", default_value_t = 0)]
        seed: u64,
    },
}

fn parse_variant(s: &str) -> Result<VariantSpec> {
    let (linear, body) = match s.strip_prefix("linear-") {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let spec = match body {
        "baseline" => VariantSpec::baseline(),
        "dbb" => VariantSpec::dbb_full(),
        "acb" => VariantSpec::acb(),
        _ => {
            if let Some(branches) = body.strip_prefix("dbb:") {
                let (mut one, mut seq, mut avg) = (false, false, false);
                for b in branches.split('+').filter(|b| !b.is_empty()) {
                    match b {
                        "1x1" => one = true,
                        "1x1_kxk" => seq = true,
                        "1x1_avg" => avg = true,
                        "kxk" => {}
                        other => {
                            return Err(Error::config(format!(
                                "unknown branch {other:?} in variant {s:?}"
                            )))
                        }
                    }
                }
                VariantSpec::dbb_subset(one, seq, avg)
            } else if let Some(n) = body.strip_prefix("duplicate:") {
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::config(format!("bad duplicate count in {s:?}")))?;
                VariantSpec::duplicate(n)
            } else {
                return Err(Error::config(format!(
                    "unknown variant {s:?}; expected baseline, dbb, dbb:<branches>, acb or duplicate:<n>"
                )));
            }
        }
    };
    Ok(if linear {
        spec.with_bn_mode(BnMode::PostAddOnly)
    } else {
        spec
    })
}

fn parse_arch(s: &str) -> Result<ArchSpec> {
    match s {
        "resnet18" => Ok(ArchSpec::resnet18()),
        other => Err(Error::config(format!(
            "unknown architecture {other:?}; available: resnet18"
        ))),
    }
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("bad input shape {s:?}, expected N,C,H,W")))?;
    match parts.as_slice() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(Error::config(format!(
            "bad input shape {s:?}, expected four comma-separated sizes"
        ))),
    }
}

fn cmd_init(spec: &Path, out: &Path, seed: u64, dtype: &str, randomize: bool) -> Result<ExitCode> {
    let element_type = ElementType::parse(dtype)?;
    let spec = load_spec(spec)?;
    let mut block = build_block(&spec, seed)?;
    if randomize {
        randomize_block(&mut block, seed.wrapping_add(1));
    }
    let block = match element_type {
        ElementType::F32 => block.round_to_f32(),
        ElementType::F64 => block,
    };
    save_weights(&block, out, element_type)?;
    println!("out={}", out.display());
    println!("tensors={}", block.named_tensors().len());
    println!("learnable_params={}", block.learnable_params());
    println!("seed={seed}");
    Ok(ExitCode::SUCCESS)
}

const SPOT_CHECK_TOLERANCE: f64 = 1e-10;

fn cmd_fuse(spec: &Path, weights: &Path, out: &Path, dtype: &str, seed: u64) -> Result<ExitCode> {
    let element_type = ElementType::parse(dtype)?;
    let spec = load_spec(spec)?;
    let block = load_weights(weights, &spec)?;
    let fused = fuse_block(&block)?;

    // Spot check: three random inputs through the branched block against the
    // fused conv.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let h = rng.gen_range(5..9);
        let w = rng.gen_range(5..9);
        let x = Tensor4::from_fn(1, spec.in_channels, h, w, |_, _, _, _| {
            rng.gen_range(-1.0..1.0)
        });
        let branched = forward_block(&block, &x)?;
        let direct = conv2d(&x, &fused)?;
        worst = worst.max(branched.max_abs_diff(&direct)?);
    }

    let (d, c, kh, kw) = fused.kernel().shape();
    let wrapped = BlockParams::from_single_conv(fused)?;
    let wrapped = match element_type {
        ElementType::F32 => wrapped.round_to_f32(),
        ElementType::F64 => wrapped,
    };
    save_weights(&wrapped, out, element_type)?;
    let spec_out = PathBuf::from(format!("{}.spec", out.display()));
    save_spec(wrapped.spec(), &spec_out)?;

    println!("fused_kernel_shape={d}x{c}x{kh}x{kw}");
    println!("spot_check_max_abs_err={worst:.3e}");
    println!("out={}", out.display());
    println!("out_spec={}", spec_out.display());
    if worst <= SPOT_CHECK_TOLERANCE {
        println!("pass=true");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("pass=false");
        Ok(ExitCode::from(1))
    }
}

fn cmd_verify(
    trials: usize,
    tolerance: Option<f64>,
    seed: u64,
    dtype: &str,
    verbose: bool,
) -> Result<ExitCode> {
    let element_type = ElementType::parse(dtype)?;
    let mut cfg = match element_type {
        ElementType::F64 => TrialConfig::default_f64(trials, seed),
        ElementType::F32 => TrialConfig::default_f32(trials, seed),
    };
    if let Some(t) = tolerance {
        cfg.tolerance = t;
    }
    let report = run_equivalence_campaign(&cfg)?;
    if verbose {
        for t in &report.trials {
            println!(
                "trial={} abs_err={:.3e} rel_err={:.3e} pass={} config=\"{}\"",
                t.index, t.max_abs_error, t.max_rel_error, t.pass, t.config
            );
        }
    }
    for line in report.summary_lines() {
        println!("{line}");
    }
    Ok(if report.pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_count_params(arch: &str, variant: &str, phase: &str) -> Result<ExitCode> {
    let arch_spec = parse_arch(arch)?;
    let variant_spec = parse_variant(variant)?;
    let phase = Phase::parse(phase)?;
    let count = count_params(&arch_spec, &variant_spec, phase)?;
    println!("arch={arch}");
    println!("variant={variant}");
    println!(
        "phase={}",
        match phase {
            Phase::Training => "training",
            Phase::Inference => "inference",
        }
    );
    println!("params={count}");
    println!("params_millions={:.4}", count as f64 / 1e6);
    println!("convention=learnable-only;training-convs-bias-free;bn-scale-shift-counted;bn-running-stats-excluded;fused-convs-biased");
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(
    spec: &Path,
    weights: Option<&Path>,
    input: &str,
    repeats: usize,
    seed: u64,
) -> Result<ExitCode> {
    let shape = parse_shape(input)?;
    let spec = load_spec(spec)?;
    let block = match weights {
        Some(path) => load_weights(path, &spec)?,
        None => {
            let mut block = build_block(&spec, seed)?;
            randomize_block(&mut block, seed.wrapping_add(1));
            block
        }
    };
    let result = bench_block(&block, shape, repeats)?;
    println!("input={},{},{},{}", shape.0, shape.1, shape.2, shape.3);
    println!("repeats={repeats}");
    println!("branched_ms={:.3}", result.branched.as_secs_f64() * 1e3);
    println!("fused_ms={:.3}", result.fused.as_secs_f64() * 1e3);
    println!("speedup={:.2}", result.speedup());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Init {
            spec,
            out,
            seed,
            dtype,
            randomize,
        } => cmd_init(spec, out, *seed, dtype, *randomize),
        Command::Fuse {
            spec,
            weights,
            out,
            dtype,
            seed,
        } => cmd_fuse(spec, weights, out, dtype, *seed),
        Command::Verify {
            trials,
            tolerance,
            seed,
            dtype,
            verbose,
        } => cmd_verify(*trials, *tolerance, *seed, dtype, *verbose),
        Command::CountParams {
            arch,
            variant,
            phase,
        } => cmd_count_params(arch, variant, phase),
        Command::Bench {
            spec,
            weights,
            input,
            repeats,
            seed,
        } => cmd_bench(spec, weights.as_deref(), input, *repeats, *seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
