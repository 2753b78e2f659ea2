use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use maskrank::data::{apply_mask, gen_synthetic, read_raster, write_raster, SyntheticSpec};
use maskrank::encoder::EncoderParams;
use maskrank::eval::Pooling;
use maskrank::experiment::{
    compare_losses, evaluate, loss_csv, standard_benchmark_spec, sweep, sweep_csv, train, Corpus,
    ExperimentConfig, LossKind, Protocol, SweepGrid,
};
use maskrank::verify::{run_grad_check, GradCase};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(
    name = "maskrank",
    version,
    about = "Ranking-loss re-identification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write checkpoint.bin, train_log.csv and config.json.
    Train(TrainArgs),
    /// Score a checkpoint on the query and gallery splits of a manifest.
    Eval(EvalArgs),
    /// Train and evaluate over an alpha x lambda grid, or across losses.
    Sweep(SweepArgs),
    /// Compare analytic and finite-difference gradients on random batches.
    GradCheck(GradCheckArgs),
    /// Zero the background of an image using a foreground mask.
    MaskApply(MaskApplyArgs),
    /// Write a seeded synthetic corpus with masks and a manifest.
    GenSynth(GenSynthArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// softmax, triplet, npair or ranking.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Feed a zero masked stream regardless of available masks.
    #[arg(long)]
    no_masks: bool,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = &self.manifest {
            config.manifest = m.clone();
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(d) = &self.out_dir {
            config.out_dir = d.clone();
        }
        if let Some(l) = &self.loss {
            config.loss = l.parse()?;
        }
        if let Some(a) = self.alpha {
            config.loss_params.alpha = a;
        }
        if let Some(l) = self.lambda {
            config.loss_params.lambda = l;
        }
        if let Some(s) = self.steps {
            config.steps = s;
        }
        if self.no_masks {
            config.use_masks = false;
        }
        config.validate_paths()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// single or multi.
    #[arg(long, default_value = "single")]
    protocol: String,
    /// Multi-query pooling: mean or max.
    #[arg(long, default_value = "mean")]
    pooling: String,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long)]
    no_masks: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Comma-separated alpha values.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Compare losses instead of sweeping alpha and lambda.
    #[arg(long)]
    losses: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    /// npair, ranking-full, ranking, triplet, softmax, encoder-ranking or all.
    #[arg(long, default_value = "all")]
    loss: String,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Defaults to 1e-5 for losses and 1e-4 for the encoder chain.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write grad_check.json here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MaskApplyArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON synthetic spec; defaults to the standard benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = args.experiment.resolve()?;
    let corpus = Corpus::from_manifest(&config.manifest)?;
    let outcome = train(&config, &corpus)?;
    create_dir(&config.out_dir)?;
    outcome
        .params
        .save(&config.out_dir.join("checkpoint.bin"))?;
    write_file(&config.out_dir.join("train_log.csv"), outcome.log_csv())?;
    write_file(&config.out_dir.join("config.json"), config.to_json() + "\n")?;
    let first = outcome.losses.first().copied().unwrap_or(f64::NAN);
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps: loss {first:.6} -> {last:.6}",
        outcome.losses.len()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let protocol: Protocol = args.protocol.parse()?;
    let pooling = match args.pooling.as_str() {
        "mean" => Pooling::Mean,
        "max" => Pooling::Max,
        other => return Err(maskrank::Error::Config(format!("unknown pooling {other:?}")).into()),
    };
    let params = EncoderParams::load(&args.checkpoint)?;
    let corpus = Corpus::from_manifest(&args.manifest)?;
    let report = evaluate(&params, &corpus, protocol, pooling, !args.no_masks)?;
    create_dir(&args.out_dir)?;
    let json = serde_json::to_string_pretty(&report.summary())?;
    write_file(&args.out_dir.join("eval_report.json"), json + "\n")?;
    println!(
        "rank1={:.4} rank5={:.4} rank10={:.4} map={:.4} skipped={}",
        report.rank(1),
        report.rank(5),
        report.rank(10),
        report.map,
        report.skipped
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let config = args.experiment.resolve()?;
    let corpus = Corpus::from_manifest(&config.manifest)?;
    create_dir(&config.out_dir)?;
    if args.losses {
        let rows = compare_losses(&config, &corpus, &LossKind::ALL)?;
        let csv = loss_csv(&rows);
        write_file(&config.out_dir.join("loss_comparison.csv"), &csv)?;
        print!("{csv}");
        return Ok(());
    }
    let default = SweepGrid::default();
    let grid = SweepGrid {
        alphas: args.alphas.clone().unwrap_or(default.alphas),
        lambdas: args.lambdas.clone().unwrap_or(default.lambdas),
    };
    let rows = sweep(&config, &corpus, &grid)?;
    let csv = sweep_csv(&rows);
    write_file(&config.out_dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Returns whether every case passed.
fn cmd_grad_check(args: &GradCheckArgs) -> Result<bool> {
    let cases: Vec<GradCase> = match args.loss.as_str() {
        "all" => GradCase::ALL.to_vec(),
        name => vec![name.parse()?],
    };
    let mut reports = Vec::with_capacity(cases.len());
    for case in cases {
        let tol = args.tolerance.unwrap_or(case.default_tolerance());
        let report = run_grad_check(case, args.trials, tol, args.seed)?;
        println!("{report}");
        reports.push(report);
    }
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        write_file(
            &dir.join("grad_check.json"),
            serde_json::to_string_pretty(&reports)? + "\n",
        )?;
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn cmd_mask_apply(args: &MaskApplyArgs) -> Result<()> {
    let image = read_raster(&args.image)?;
    let mask = read_raster(&args.mask)?;
    let masked = apply_mask(&image, &mask).with_context(|| {
        format!(
            "masking {} with {}",
            args.image.display(),
            args.mask.display()
        )
    })?;
    write_raster(&args.out, &masked)?;
    Ok(())
}

fn cmd_gen_synth(args: &GenSynthArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| maskrank::Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| maskrank::Error::Config(format!("{}: {e}", path.display())))?
        }
        None => standard_benchmark_spec(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let corpus = gen_synthetic(&spec)?;
    create_dir(&args.out_dir)?;
    let manifest = corpus.write(&args.out_dir)?;
    println!(
        "wrote {} records to {}",
        corpus.records.len(),
        manifest.display()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<maskrank::Error>() {
        Some(e) if e.is_config_error() => EXIT_CONFIG,
        Some(e) if e.is_data_error() => EXIT_DATA,
        _ => EXIT_FAILURE,
    }
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Sweep(a) => cmd_sweep(a)?,
        Command::GradCheck(a) => {
            if !cmd_grad_check(a)? {
                return Ok(EXIT_VERIFY);
            }
        }
        Command::MaskApply(a) => cmd_mask_apply(a)?,
        Command::GenSynth(a) => cmd_gen_synth(a)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
