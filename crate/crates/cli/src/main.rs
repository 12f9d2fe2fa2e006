use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, FromArgMatches, Parser, Subcommand, ValueEnum};

use scribreg::data::{Benchmark, BenchmarkSpec, Scene};
use scribreg::grid::GridShape;
use scribreg::model::ParamSet;
use scribreg::oracle::{verification_suite, SuiteOptions};
use scribreg::trainer::{evaluate, run_ablation, AblationGrid, TrainConfig, Trainer, CONFIG_KEYS, PRESETS};
use scribreg::Error;

const CHECKPOINT: &str = "checkpoint.bin";
const METRICS: &str = "metrics.jsonl";
const RESOLVED_CONFIG: &str = "config.txt";

/// Scribble-supervised segmentation with a dynamic feature regularized loss.
#[derive(Parser, Debug)]
#[command(name = "scribreg", version)]
#[command(after_help = "Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O failure.\n\
                        SCRIBREG_THREADS caps the number of worker threads.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scribble benchmark.
    GenData(GenData),
    /// Train a model and write a checkpoint plus per-iteration metrics.
    Train(Train),
    /// Score a checkpoint and print per-class IoU and mIoU as CSV.
    Eval(Eval),
    /// Train every row of an ablation grid and print the comparison table as CSV.
    Ablate(Ablate),
    /// Run the oracle and finite-difference verification suite.
    Gradcheck(Gradcheck),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    Train,
    Val,
    All,
}

#[derive(Args, Debug)]
struct GenData {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Number of training scenes.
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    /// Number of validation scenes [default: a quarter of --scenes, at least 1].
    #[arg(long)]
    val_scenes: Option<usize>,
    /// Scene size as HxW.
    #[arg(long, default_value = "48x48", value_parser = parse_size)]
    size: GridShape,
    /// Number of classes including background.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(2..=32))]
    classes: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Give every scene a boundary between two same-colored shapes.
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    ambiguous: Switch,
}

#[derive(Args, Debug)]
struct Train {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Config file of `key = value` lines; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint, metrics and resolved config.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which scenes to score against their dense masks.
    #[arg(long, value_enum, default_value_t = SplitChoice::Val)]
    split: SplitChoice,
}

#[derive(Args, Debug)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    /// Grid file with `seeds ...` and `row <name> key=value ...` lines.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    grid: Option<PathBuf>,
    /// Built-in grid: loss-terms, kernel-terms or supervision.
    #[arg(long)]
    preset: Option<String>,
    /// Base config file the rows are layered on.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, replacing those of the grid.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args, Debug)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances for the loss value comparison.
    #[arg(long, default_value_t = 200)]
    instances: usize,
}

fn parse_size(s: &str) -> Result<GridShape, String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let side = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size component {v:?}"));
    GridShape::new(side(h)?, side(w)?).map_err(|e| e.to_string())
}

fn key_help(key: &str) -> &'static str {
    match key {
        "lambda1" => "Weight of the regularized segmentation loss",
        "lambda2" => "Weight of the feature distance and feature regularized losses",
        "r" => "Pair window radius",
        "gamma" => "Pseudo-label confidence threshold",
        "sigma1" => "Kernel bandwidth for pixel positions",
        "sigma2" => "Kernel bandwidth for colors",
        "sigma3" => "Kernel bandwidth for learned features",
        "lr" => "Learning rate",
        "momentum" => "Momentum coefficient",
        "iterations" => "Number of parameter updates",
        "batch_size" => "Scenes per update",
        "seed" => "Seed for initialization and batch order",
        "enable_dfr" => "Use the regularized segmentation loss (on/off)",
        "enable_fd" => "Use the feature distance loss (on/off)",
        "enable_fr" => "Use the feature regularized loss (on/off)",
        "feature_in_kernel" => "Include learned features in the kernel (on/off)",
        "rgb_in_kernel" => "Include colors in the kernel (on/off)",
        "supervision_source" => "Feature head labels: pseudo, groundtruth_scribbles or both",
        "patch" => "Side of the color patch in each pixel descriptor",
        "hidden" => "Hidden layer width",
        "feat_dim" => "Feature head dimension",
        "eval_every" => "Validation interval in iterations (0: only at the end)",
        _ => "",
    }
}

/// One `--<key>` flag per config key, applied on top of the config file.
#[derive(Debug, Default)]
struct ConfigOverrides(Vec<(String, String)>);

impl ConfigOverrides {
    fn apply(&self, config: &mut TrainConfig) -> scribreg::Result<()> {
        for (k, v) in &self.0 {
            config.set(k, v)?;
        }
        Ok(())
    }
}

impl FromArgMatches for ConfigOverrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = ConfigOverrides::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        for key in CONFIG_KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                self.0.push((key.to_string(), v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for ConfigOverrides {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        CONFIG_KEYS.iter().fold(cmd, |cmd, key| {
            cmd.arg(
                Arg::new(*key)
                    .long(key.replace('_', "-"))
                    .value_name("VALUE")
                    .help(key_help(key))
                    .help_heading("Config overrides"),
            )
        })
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) | Error::Format(_) => Failure::Io(msg),
            Error::Config(_) | Error::InvalidParam(_) | Error::InvalidShape { .. } | Error::Placement { .. } => {
                Failure::Usage(msg)
            }
            _ => Failure::Numerical(msg),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn load_config(file: Option<&Path>, overrides: &ConfigOverrides) -> Result<TrainConfig, Failure> {
    let mut config = TrainConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        config.apply_text(&text)?;
    }
    overrides.apply(&mut config)?;
    config.validate()?;
    Ok(config)
}

fn load_data(dir: &Path) -> Result<Benchmark, Failure> {
    Benchmark::load(dir).map_err(|e| match e {
        Error::Io(io) => Failure::Io(format!("cannot read dataset in {}: {io}", dir.display())),
        other => other.into(),
    })
}

fn gen_data(args: GenData) -> Result<(), Failure> {
    let val = args.val_scenes.unwrap_or(args.scenes.div_ceil(4).max(1));
    let spec = BenchmarkSpec::new(
        args.scenes,
        val,
        args.size,
        args.classes as usize,
        args.ambiguous == Switch::On,
        args.seed,
    );
    let bench = spec.generate()?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    bench.save(&args.out)?;
    println!("annotated fraction: {:.6}", bench.annotated_fraction());
    Ok(())
}

fn train(args: Train) -> Result<(), Failure> {
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let bench = load_data(&args.data)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    fs::write(args.out.join(RESOLVED_CONFIG), config.to_text()).map_err(io_err(&args.out))?;
    let metrics_path = args.out.join(METRICS);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let mut trainer = Trainer::new(config, bench.classes)?;
    let summary = trainer.fit(&bench.train, &bench.val, |rec| {
        writeln!(metrics, "{}", rec.to_json())?;
        Ok(())
    })?;
    metrics.flush().map_err(io_err(&metrics_path))?;
    let ckpt = args.out.join(CHECKPOINT);
    let file = BufWriter::new(File::create(&ckpt).map_err(io_err(&ckpt))?);
    trainer.params.write_checkpoint(file)?;
    if let Some(last) = &summary.last {
        println!("final loss: {:.6}", last.total);
    }
    if let Some(report) = &summary.final_eval {
        println!("val miou: {:.6}", report.miou);
    }
    Ok(())
}

fn eval(args: Eval) -> Result<(), Failure> {
    let file = File::open(&args.checkpoint).map_err(io_err(&args.checkpoint))?;
    let params = ParamSet::read_checkpoint(BufReader::new(file)).map_err(|e| {
        Failure::Io(format!("corrupt checkpoint {}: {e}", args.checkpoint.display()))
    })?;
    let bench = load_data(&args.data)?;
    if params.dims().classes != bench.classes {
        return Err(Failure::Usage(format!(
            "checkpoint predicts {} classes, dataset has {}",
            params.dims().classes,
            bench.classes
        )));
    }
    let scenes: Vec<Scene> = match args.split {
        SplitChoice::Train => bench.train,
        SplitChoice::Val => bench.val,
        SplitChoice::All => bench.train.into_iter().chain(bench.val).collect(),
    };
    print!("{}", evaluate(&params, &scenes)?.to_csv());
    Ok(())
}

fn ablate(args: Ablate) -> Result<(), Failure> {
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    let mut grid = match (&args.grid, &args.preset) {
        (Some(path), _) => AblationGrid::parse(&fs::read_to_string(path).map_err(io_err(path))?)?,
        (None, Some(name)) => AblationGrid::preset(name).ok_or_else(|| {
            Failure::Usage(format!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")))
        })?,
        (None, None) => return Err(Failure::Usage("ablate needs --grid or --preset".into())),
    };
    if !args.seeds.is_empty() {
        grid = grid.with_seeds(args.seeds.clone());
    }
    let bench = load_data(&args.data)?;
    let table = run_ablation(&base, &grid, bench.classes, &bench.train, &bench.val, |r| {
        eprintln!("{} seed {}: miou {:.4}", r.row, r.seed, r.miou);
    })?;
    match &args.out {
        Some(path) => fs::write(path, table.to_csv()).map_err(io_err(path))?,
        None => print!("{}", table.to_csv()),
    }
    Ok(())
}

fn gradcheck(args: Gradcheck) -> Result<(), Failure> {
    let opts = SuiteOptions {
        loss_instances: args.instances,
        seed: args.seed,
        ..Default::default()
    };
    let checks = verification_suite(&opts)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("SCRIBREG_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("SCRIBREG_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
