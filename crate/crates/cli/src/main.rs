//! Command-line surface: dataset synthesis, GAN training (with the ablation
//! harness), evaluation, the attention scaling benchmark, and the gradient
//! check suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cloudless_core::bench::{self, BenchRecord, KernelKind};
use cloudless_core::data::{self, CloudParams, ImagePair};
use cloudless_core::gan::{self, GanLossParams, TrainConfig};
use cloudless_core::gradcheck;
use cloudless_core::metrics::{self, MetricReport};
use cloudless_core::models::{Checkpoint, Discriminator, DiscriminatorConfig, EncoderKind, Generator, GeneratorConfig};
use cloudless_core::{CoreError, Result, Tensor};

#[derive(Parser)]
#[command(name = "cloudless", version, about = "Thin-cloud removal with multi-head linear attention: synthesize data, train, evaluate, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EncoderArg {
    Attention,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Test,
    Train,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired cloudy/clear dataset on disk
    Synth {
        /// Number of pairs (at least 5)
        #[arg(long)]
        n: usize,
        /// Image side in pixels (at least 8)
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Upper bound of the cloud opacity field, in (0, 1]
        #[arg(long, default_value_t = 0.9)]
        alpha_max: f64,
        /// Octaves of the opacity noise field
        #[arg(long, default_value_t = 3)]
        octaves: usize,
    },
    /// Train the conditional GAN (or the full ablation sweep)
    Train {
        /// Dataset directory (as produced by `synth`)
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        /// Attention heads per encoder block
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for checkpoint + metrics CSV
        #[arg(long)]
        out: PathBuf,
        /// Encoder block type; `conv` swaps attention for conv blocks
        #[arg(long, value_enum, default_value_t = EncoderArg::Attention)]
        encoder: EncoderArg,
        #[arg(long, default_value_t = 16)]
        base_channels: usize,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        /// Uniform per-channel L1 weight
        #[arg(long, default_value_t = 100.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1)]
        d_steps: usize,
        #[arg(long, default_value_t = 100)]
        log_every: u64,
        /// Use the saturating generator loss instead of the default
        /// non-saturating one
        #[arg(long)]
        literal_adv: bool,
        /// Resume from a checkpoint (steps is the absolute total)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run the ablation sweep (conv encoder, heads 1/2/4) and write one
        /// summary CSV row per arm
        #[arg(long)]
        ablation: bool,
        /// Skip unpaired files instead of aborting
        #[arg(long)]
        allow_skip: bool,
    },
    /// Evaluate baseline (cloudy vs clear) or a trained checkpoint
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint; without it the cloudy images themselves are scored
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Report CSV path
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        #[arg(long)]
        allow_skip: bool,
    },
    /// Time both attention kernels across sequence lengths
    Bench {
        /// Comma-separated ascending sequence lengths
        #[arg(long, default_value = "256,1024,4096")]
        sizes: String,
        #[arg(long, default_value_t = 32)]
        dims: usize,
        /// Timed repetitions per point (median reported), at least 5
        #[arg(long, default_value_t = 7)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Run every finite-difference gradient check at 64-bit
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                CoreError::Usage(_) | CoreError::Config(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { n, side, seed, out, alpha_max, octaves } => cmd_synth(n, side, seed, &out, alpha_max, octaves),
        Command::Train {
            data,
            steps,
            heads,
            seed,
            out,
            encoder,
            base_channels,
            levels,
            batch_size,
            lr,
            lambda,
            d_steps,
            log_every,
            literal_adv,
            resume,
            ablation,
            allow_skip,
        } => {
            let opts = TrainOpts {
                steps,
                heads,
                seed,
                encoder,
                base_channels,
                levels,
                batch_size,
                lr,
                lambda,
                d_steps,
                log_every,
                literal_adv,
            };
            if ablation {
                cmd_ablation(&data, &out, &opts, allow_skip)
            } else {
                cmd_train(&data, &out, &opts, resume.as_deref(), allow_skip)
            }
        }
        Command::Eval { data, checkpoint, split, out, allow_skip } => {
            cmd_eval(&data, checkpoint.as_deref(), split, &out, allow_skip)
        }
        Command::Bench { sizes, dims, reps, seed, out } => cmd_bench(&sizes, dims, reps, seed, &out),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(n: usize, side: usize, seed: u64, out: &Path, alpha_max: f64, octaves: usize) -> Result<()> {
    if n == 0 {
        return Err(CoreError::Usage("--n must be positive".into()));
    }
    let params = CloudParams { octaves, alpha_max, seed: 0 };
    let (train, test) = data::make_dataset::<f32>(n, side, seed, &params)?;
    data::write_dataset(out, &train, &test)?;
    println!(
        "wrote {n} pairs ({} train / {} test, side {side}, seed {seed}) to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
    steps: u64,
    heads: usize,
    seed: u64,
    encoder: EncoderArg,
    base_channels: usize,
    levels: usize,
    batch_size: usize,
    lr: f64,
    lambda: f64,
    d_steps: usize,
    log_every: u64,
    literal_adv: bool,
}

fn load_dataset(dir: &Path, seed: u64, allow_skip: bool) -> Result<cloudless_core::data::Split<f32>> {
    data::load_paired_dir::<f32>(&dir.join("cloud"), &dir.join("label"), seed, allow_skip)
}

fn image_side(pairs: &[ImagePair<f32>]) -> Result<usize> {
    let first = pairs.first().ok_or_else(|| CoreError::Data("empty dataset".into()))?;
    let shape = first.cloudy.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(CoreError::Data(format!("expected square 3×S×S images, got {shape:?}")));
    }
    Ok(shape[1])
}

fn build_models(
    opts: &TrainOpts,
    side: usize,
    encoder: EncoderKind,
    heads: usize,
) -> Result<(Generator<f32>, Discriminator<f32>)> {
    let gen_cfg = GeneratorConfig {
        in_channels: 3,
        base_channels: opts.base_channels,
        levels: opts.levels,
        heads,
        side,
        encoder,
    };
    let gen = Generator::build(gen_cfg, opts.seed)?;
    let disc = Discriminator::build(DiscriminatorConfig::default(), opts.seed ^ 0xD15C)?;
    Ok((gen, disc))
}

fn train_config(opts: &TrainOpts) -> TrainConfig {
    TrainConfig {
        steps: opts.steps,
        batch_size: opts.batch_size,
        lr: opts.lr,
        seed: opts.seed,
        d_steps: opts.d_steps,
        loss: GanLossParams::uniform(opts.lambda, 3),
        literal_adv_loss: opts.literal_adv,
        log_every: opts.log_every,
        ..Default::default()
    }
}

fn run_one_training(
    data_dir: &Path,
    out_dir: &Path,
    opts: &TrainOpts,
    encoder: EncoderKind,
    heads: usize,
    resume: Option<&Path>,
    allow_skip: bool,
) -> Result<(f64, f64)> {
    let (train, test) = load_dataset(data_dir, opts.seed, allow_skip)?;
    let side = image_side(&train)?;
    let (mut gen, mut disc) = build_models(opts, side, encoder, heads)?;
    let cfg = train_config(opts);
    let resume_ckpt = resume.map(Checkpoint::load).transpose()?;
    let outcome = gan::train_loop(&mut gen, &mut disc, &train, &test, &cfg, out_dir, resume_ckpt.as_ref())?;
    println!(
        "trained {} steps ({} train / {} test pairs) -> {} (held-out PSNR {:.4} dB, SSIM {:.4})",
        cfg.steps,
        train.len(),
        test.len(),
        outcome.checkpoint_path.display(),
        outcome.final_psnr,
        outcome.final_ssim
    );
    Ok((outcome.final_psnr, outcome.final_ssim))
}

fn cmd_train(
    data_dir: &Path,
    out_dir: &Path,
    opts: &TrainOpts,
    resume: Option<&Path>,
    allow_skip: bool,
) -> Result<()> {
    let encoder = match opts.encoder {
        EncoderArg::Attention => EncoderKind::Attention,
        EncoderArg::Conv => EncoderKind::Conv,
    };
    run_one_training(data_dir, out_dir, opts, encoder, opts.heads, resume, allow_skip)?;
    Ok(())
}

pub const ABLATION_CSV_HEADER: &str = "arm,attention,heads,psnr_db,ssim";

fn cmd_ablation(data_dir: &Path, out_dir: &Path, opts: &TrainOpts, allow_skip: bool) -> Result<()> {
    let arms: [(&str, EncoderKind, usize); 4] = [
        ("conv", EncoderKind::Conv, 0),
        ("heads1", EncoderKind::Attention, 1),
        ("heads2", EncoderKind::Attention, 2),
        ("heads4", EncoderKind::Attention, 4),
    ];
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for (name, encoder, heads) in arms {
        let arm_dir = out_dir.join(name);
        let effective_heads = if heads == 0 { 1 } else { heads };
        let (psnr, ssim) = run_one_training(data_dir, &arm_dir, opts, encoder, effective_heads, None, allow_skip)?;
        rows.push((name, encoder == EncoderKind::Attention, heads, psnr, ssim));
    }

    let csv_path = out_dir.join("ablation.csv");
    {
        use std::io::Write;
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "{ABLATION_CSV_HEADER}")?;
        for (name, attention, heads, psnr, ssim) in &rows {
            let heads_col = if *attention { heads.to_string() } else { "-".to_string() };
            writeln!(f, "{name},{},{heads_col},{psnr},{ssim}", if *attention { "yes" } else { "no" })?;
        }
    }
    println!("ablation summary -> {}", csv_path.display());
    // Directional comparisons are reported, not asserted: toy-scale numbers
    // do not reproduce full-scale orderings.
    let conv = rows[0].3;
    for (name, attention, _, psnr, _) in &rows[1..] {
        if *attention {
            println!("  {name}: PSNR {psnr:.4} dB ({:+.4} vs conv arm)", psnr - conv);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Recover the generator architecture from checkpoint entry names/shapes.
fn infer_generator_config(entries: &BTreeMap<String, Tensor<f32>>, side: usize) -> Result<GeneratorConfig> {
    let stem = entries
        .get("gen.stem.w")
        .ok_or_else(|| CoreError::Checkpoint("checkpoint lacks gen.stem.w".into()))?;
    let base_channels = stem.shape()[0];
    let in_channels = stem.shape()[1];
    let mut levels = 1;
    while entries.contains_key(&format!("gen.enc{levels}.down.w")) {
        levels += 1;
    }
    let encoder = if entries.contains_key("gen.enc1.attn.wo") {
        EncoderKind::Attention
    } else {
        EncoderKind::Conv
    };
    let mut heads = 0;
    while entries.contains_key(&format!("gen.enc1.attn.h{heads}.wq")) {
        heads += 1;
    }
    if encoder == EncoderKind::Attention && heads == 0 {
        return Err(CoreError::Checkpoint("attention checkpoint lists no heads".into()));
    }
    Ok(GeneratorConfig {
        in_channels,
        base_channels,
        levels,
        heads: heads.max(1),
        side,
        encoder,
    })
}

fn cmd_eval(
    data_dir: &Path,
    checkpoint: Option<&Path>,
    split: SplitArg,
    out: &Path,
    allow_skip: bool,
) -> Result<()> {
    let (train, test) = load_dataset(data_dir, 0, allow_skip)?;
    let pairs: Vec<ImagePair<f32>> = match split {
        SplitArg::Test => test,
        SplitArg::Train => train,
        SplitArg::All => train.into_iter().chain(test).collect(),
    };
    if pairs.is_empty() {
        return Err(CoreError::Data("selected split is empty".into()));
    }

    let report: MetricReport = match checkpoint {
        None => {
            let baseline: Vec<(String, Tensor<f32>, Tensor<f32>)> =
                pairs.iter().map(|p| (p.id.clone(), p.cloudy.clone(), p.clear.clone())).collect();
            metrics::evaluate_pairs(&baseline)?
        }
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let map = ckpt.entry_map();
            let side = image_side(&pairs)?;
            let cfg = infer_generator_config(&map, side)?;
            let mut gen = Generator::<f32>::build(cfg, 0)?;
            gen.load_params(&map, "gen.")?;
            gan::eval_generator(&gen, &pairs)?
        }
    };

    report.write_csv(out)?;
    println!(
        "{} images: mean PSNR {:.4} dB, mean SSIM {:.4} -> {}",
        report.count,
        report.mean_psnr_db,
        report.mean_ssim,
        out.display()
    );
    for note in &report.notes {
        println!("note: {note}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CoreError::Usage(format!("bad size `{p}` in --sizes")))
        })
        .collect()
}

fn cmd_bench(sizes: &str, dims: usize, reps: usize, seed: u64, out: &Path) -> Result<()> {
    let sizes = parse_sizes(sizes)?;
    let records = bench::run_scaling_bench(&sizes, dims, reps, seed)?;
    bench::write_bench_csv(&records, out)?;
    println!("{:<8} {:>6} {:>4} {:>14} {:>16}", "kernel", "n", "d", "time_ns", "peak_elements");
    for r in &records {
        println!(
            "{:<8} {:>6} {:>4} {:>14} {:>16}",
            r.kernel.name(),
            r.n,
            r.d,
            r.wall_time_ns,
            r.peak_transient_elements
        );
    }
    print_scaling_ratios(&records, KernelKind::Softmax);
    print_scaling_ratios(&records, KernelKind::Linear);
    println!("bench CSV -> {}", out.display());
    Ok(())
}

fn print_scaling_ratios(records: &[BenchRecord], kernel: KernelKind) {
    let of_kind: Vec<&BenchRecord> = records.iter().filter(|r| r.kernel == kernel).collect();
    for w in of_kind.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ratio = b.wall_time_ns as f64 / a.wall_time_ns.max(1) as f64;
        println!(
            "{}: t({}) / t({}) = {ratio:.2} (size ratio {})",
            kernel.name(),
            b.n,
            a.n,
            b.n / a.n
        );
    }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let results = gradcheck::run_all(seed)?;
    let mut failures = 0;
    for r in &results {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{status}  {:<44} max_rel_err {:>12.3e}  tol {:>8.0e}  worst coord {}",
            r.name, r.max_rel_err, r.tol, r.worst_coord
        );
        if !r.passed() {
            failures += 1;
        }
    }
    println!("{} checks, {} failures", results.len(), failures);
    if failures > 0 {
        return Err(CoreError::Data(format!("{failures} gradient check(s) failed")));
    }
    Ok(())
}
