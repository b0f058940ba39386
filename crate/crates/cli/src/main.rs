use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use repvgg::analysis::CostReport;
use repvgg::bench::{bench_forward, bench_interleaved, BenchResult};
use repvgg::trainer::{self, TrainConfig, TrainError, ToyDataset};
use repvgg::{convert_model, forward, instantiate, io, ConvAlgo, Mode, Model, ModelSpec, Preset, Tensor4};

/// Build, train, convert, verify, cost and time RepVGG models.
#[derive(Parser)]
#[command(name = "repvgg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Instantiate a train-mode model and write it to a weight file.
    Build(BuildArgs),
    /// Train a train-mode model on a synthetic dataset.
    Train(TrainArgs),
    /// Fold every block of a train-mode model into a single 3x3 conv.
    Convert(ConvertArgs),
    /// Compare a train-mode model with its converted counterpart on random inputs.
    Verify(VerifyArgs),
    /// Print parameter, FLOP, Wino MUL, memory and ensemble counts.
    Count(CountArgs),
    /// Time forward passes.
    Bench(BenchArgs),
    /// Write the per-layer cost table as CSV.
    ExportCsv(ExportArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct SpecSource {
    /// Named architecture (A0 ... B3g4).
    #[arg(long)]
    preset: Option<Preset>,
    /// JSON model spec file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Three-block network sized for the toy dataset.
    #[arg(long)]
    toy: bool,
}

impl SpecSource {
    fn resolve(&self, classes: usize) -> anyhow::Result<ModelSpec> {
        if let Some(p) = self.preset {
            return Ok(p.spec(classes));
        }
        if let Some(path) = &self.spec {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
        }
        Ok(ModelSpec::custom("toy", vec![1, 1, 1], vec![8, 16, 32], 1, vec![], classes, 3)?)
    }
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    source: SpecSource,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resolution of the random batch used to set batch-norm running statistics.
    #[arg(long, default_value_t = 64)]
    calibrate_res: usize,
    #[arg(long, default_value_t = 4)]
    calibrate_batch: usize,
    /// Keep identity batch-norm statistics (mean 0, variance 1).
    #[arg(long)]
    no_calibrate: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "toy", value_parser = ["toy"])]
    dataset: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Keep the learning rate constant instead of cosine annealing.
    #[arg(long)]
    no_cosine: bool,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    deploy: PathBuf,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 224)]
    res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    source: SpecSource,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    #[arg(long, default_value_t = 224)]
    res: usize,
    #[arg(long, default_value_t = Mode::Deploy, value_parser = parse_mode)]
    mode: Mode,
    /// Per-layer CSV instead of the summary.
    #[arg(long)]
    csv: bool,
    /// Append the per-layer table to the summary.
    #[arg(long)]
    layers: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    res: usize,
    #[arg(long, default_value = "auto", value_parser = parse_algo)]
    mode: ConvAlgo,
    /// Time the train-mode model and its conversion: `train,deploy`.
    #[arg(long, value_parser = parse_compare)]
    compare: Option<(Mode, Mode)>,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 30)]
    iters: usize,
}

#[derive(Args)]
struct ExportArgs {
    /// Weight file whose spec and mode are costed.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 224)]
    res: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "train" => Ok(Mode::Train),
        "deploy" => Ok(Mode::Deploy),
        _ => Err(format!("expected train or deploy, got {s:?}")),
    }
}

fn parse_algo(s: &str) -> Result<ConvAlgo, String> {
    s.parse().map_err(|e: repvgg::Error| e.to_string())
}

fn parse_compare(s: &str) -> Result<(Mode, Mode), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => {
            let (a, b) = (parse_mode(a)?, parse_mode(b)?);
            if a == b {
                return Err("compare needs two different modes".into());
            }
            Ok((a, b))
        }
        _ => Err(format!("expected two comma-separated modes, got {s:?}")),
    }
}

fn load(path: &Path) -> anyhow::Result<Model<f32>> {
    io::load(path).with_context(|| format!("loading {}", path.display()))
}

fn save(model: &Model<f32>, path: &Path) -> anyhow::Result<()> {
    io::save(model, path).with_context(|| format!("writing {}", path.display()))
}

fn build(args: BuildArgs) -> anyhow::Result<()> {
    let spec = args.source.resolve(args.classes)?;
    let mut model = instantiate::<f32>(&spec, args.seed);
    if !args.no_calibrate {
        let res = args.calibrate_res.max(spec.min_input_size());
        let shape = [args.calibrate_batch.max(2), spec.input_channels(), res, res];
        trainer::calibrate_bn(&mut model, &Tensor4::random_uniform(shape, -1.0, 1.0, args.seed))?;
    }
    save(&model, &args.out)?;
    println!(
        "built {} ({} mode, {} parameters) -> {}",
        spec.name(),
        model.mode(),
        model.num_params(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let model = load(&args.model)?;
    let data = ToyDataset::<f32>::generate(model.spec().num_classes(), 64, 16, 32, args.seed)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        cosine: !args.no_cosine,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
    };
    let write_curve = |curve: &trainer::LossCurve| -> anyhow::Result<()> {
        if let Some(path) = &args.curve {
            fs::write(path, curve.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    };
    match trainer::train(&model, &data, &cfg) {
        Ok(out) => {
            for p in &out.curve.points {
                println!(
                    "epoch {:>3}  lr {:.5}  train loss {:.6}  val acc {:.4}",
                    p.epoch, p.lr, p.train_loss, p.val_acc
                );
            }
            write_curve(&out.curve)?;
            save(&out.model, &args.out)?;
            Ok(())
        }
        Err(TrainError::Diverged { epoch, model, curve }) => {
            write_curve(&curve)?;
            save(&model, &args.out)?;
            bail!("training diverged in epoch {epoch}; wrote the last finite model to {}", args.out.display())
        }
        Err(TrainError::Invalid(e)) => Err(e.into()),
    }
}

fn convert(args: ConvertArgs) -> anyhow::Result<()> {
    let model = load(&args.model)?;
    let deploy = convert_model(&model)?;
    save(&deploy, &args.out)?;
    println!(
        "converted {}: {} -> {} parameters -> {}",
        model.spec().name(),
        model.num_params(),
        deploy.num_params(),
        args.out.display()
    );
    Ok(())
}

/// Returns whether every trial stayed within tolerance.
fn verify(args: VerifyArgs) -> anyhow::Result<bool> {
    let train = load(&args.train)?;
    let deploy = load(&args.deploy)?;
    if train.spec() != deploy.spec() {
        bail!("the two files hold different model specs");
    }
    if deploy.mode() != Mode::Deploy {
        bail!("{} is not a deploy-mode model", args.deploy.display());
    }
    let spec = train.spec();
    let res = args.res.max(spec.min_input_size());
    let mut max_dev: f64 = 0.0;
    let mut argmax_mismatches = 0;
    for t in 0..args.trials {
        let x = Tensor4::random_uniform([1, spec.input_channels(), res, res], -1.0, 1.0, args.seed + t as u64);
        let a = forward(&train, &x)?;
        let b = forward(&deploy, &x)?;
        max_dev = max_dev.max(a.max_abs_diff(&b)?);
        if a.argmax_per_batch() != b.argmax_per_batch() {
            argmax_mismatches += 1;
        }
    }
    println!("trials: {}", args.trials);
    println!("max abs deviation: {max_dev:e}");
    println!("argmax mismatches: {argmax_mismatches}");
    let ok = max_dev <= args.tol;
    println!("{} (tolerance {:e})", if ok { "PASS" } else { "FAIL" }, args.tol);
    Ok(ok)
}

fn count(args: CountArgs) -> anyhow::Result<()> {
    let spec = args.source.resolve(args.classes)?;
    let report = CostReport::new(&spec, args.res, args.mode);
    if args.csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.summary());
        if args.layers {
            print!("\n{}", report.to_table());
        }
    }
    Ok(())
}

fn bench(args: BenchArgs) -> anyhow::Result<()> {
    let model = load(&args.model)?;
    let run = |m: &Model<f32>| -> anyhow::Result<BenchResult> {
        Ok(bench_forward(m, args.batch, args.res, args.mode, args.warmup, args.iters)?)
    };
    match args.compare {
        None => println!("{}", run(&model)?),
        Some(modes) => {
            if model.mode() != Mode::Train {
                bail!("--compare needs a train-mode model to convert");
            }
            let deploy = convert_model(&model)?;
            let pick = |mode: Mode| if mode == Mode::Train { &model } else { &deploy };
            let results = bench_interleaved(
                &[pick(modes.0), pick(modes.1)],
                args.batch,
                args.res,
                args.mode,
                args.warmup,
                args.iters,
            )?;
            for r in &results {
                println!("{r}");
            }
            let medians = [results[0].median_secs(), results[1].median_secs()];
            println!(
                "median time ratio {}/{}: {:.3}",
                modes.1,
                modes.0,
                medians[1] / medians[0]
            );
        }
    }
    Ok(())
}

fn export_csv(args: ExportArgs) -> anyhow::Result<()> {
    let model = load(&args.model)?;
    let report = CostReport::new(model.spec(), args.res, model.mode());
    fs::write(&args.out, report.to_csv()).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} rows to {}", report.rows.len() + 1, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build(a) => build(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Convert(a) => convert(a).map(|_| true),
        Command::Verify(a) => verify(a),
        Command::Count(a) => count(a).map(|_| true),
        Command::Bench(a) => bench(a).map(|_| true),
        Command::ExportCsv(a) => export_csv(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
