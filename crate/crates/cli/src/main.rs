use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use zigma::complexity::{bench, BenchPoint};
use zigma::interpolant::{SamplerConfig, SamplerRegistry};
use zigma::scan::{render_arrows, validate, GridDims, ScanRegistry};
use zigma::train::{checkpoint, generate, write_samples, RunConfig, Trainer};
use zigma::ZigmaError;

#[derive(Parser)]
#[command(name = "zigma", version, about = "Scan orders, toy diffusion training, sampling and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a scan order and its continuity report.
    Scan(ScanArgs),
    /// Train from a JSON run configuration.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Time layer forwards over a token grid.
    Bench(BenchArgs),
    /// Write an example run configuration.
    InitConfig(InitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    scheme: String,
    #[arg(long, default_value_t = 0)]
    variant: usize,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    /// Frame count; selects a volume scan.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from `<out_dir>/checkpoint` if it exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    Ema,
    Live,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 250)]
    steps: usize,
    #[arg(long, default_value = "ode_euler")]
    sampler: String,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Weights::Ema)]
    weights: Weights,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated layer kinds.
    #[arg(long, value_delimiter = ',', default_value = "attention,mamba,zigzag")]
    kind: Vec<String>,
    /// Comma-separated token counts.
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value = "zigzag")]
    scan: String,
    #[arg(long, default_value_t = 1)]
    orf: usize,
    /// Per-point allocation budget in bytes.
    #[arg(long)]
    memory_limit: Option<usize>,
    /// Directory receiving bench.csv and bench.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    /// Config file to write.
    #[arg(long)]
    out: PathBuf,
    /// Run directory recorded in the config.
    #[arg(long, default_value = "runs/example")]
    run_dir: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ZigmaError> for Failure {
    fn from(e: ZigmaError) -> Self {
        match e {
            ZigmaError::UnsupportedVariant { .. } | ZigmaError::UnknownStrategy { .. } | ZigmaError::Scan(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Scan(a) => scan(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Bench(a) => run_bench(a),
        Command::InitConfig(a) => init_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn scan(a: ScanArgs) -> CmdResult {
    let dims = match a.depth {
        Some(frames) => GridDims::volume(frames, a.width, a.height),
        None => GridDims::plane(a.width, a.height),
    };
    let registry = ScanRegistry::builtin();
    let order = registry.get(&a.scheme)?.generate(&dims, a.variant)?;
    let report = validate(order.order(), &dims).map_err(|e| Failure::Runtime(format!("not a bijection: {e}")))?;
    let text = match a.format {
        Format::Json => {
            let v = json!({
                "scheme": a.scheme,
                "variant": a.variant,
                "dims": dims.extents(),
                "order": order.order(),
                "report": report,
            });
            serde_json::to_string_pretty(&v).map_err(ZigmaError::from)? + "\n"
        }
        Format::Text => format!(
            "{} variant {} on {dims}\norder: {:?}\nspace_filling: {}  max_step: {}  breaks: {}\n{}",
            a.scheme,
            a.variant,
            order.order(),
            report.is_space_filling,
            report.max_step,
            report.breaks,
            render_arrows(order.order(), &dims)
        ),
    };
    emit(a.out.as_deref(), &text)
}

fn train(a: TrainArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.config).map_err(|e| Failure::Runtime(format!("{}: {e}", a.config.display())))?;
    let ckpt = cfg.out_dir.join("checkpoint");
    let mut trainer = if a.resume && ckpt.exists() {
        // Only the step target may change between the stored run and --config.
        let mut t = Trainer::resume(&ckpt)?;
        let mut stored = t.cfg.clone();
        stored.optimizer.steps = cfg.optimizer.steps;
        if stored != cfg {
            return Err(Failure::Runtime("checkpoint run differs from --config beyond `steps`".into()));
        }
        t.cfg.optimizer.steps = cfg.optimizer.steps;
        t
    } else {
        Trainer::new(cfg)?
    };
    let logged = trainer.run()?;
    if let Some(last) = logged.last() {
        eprintln!(
            "step {} loss {} -> {}",
            last.step,
            last.loss.map_or("nan".into(), |l| format!("{l:.6}")),
            ckpt.display()
        );
    }
    Ok(())
}

fn sample(a: SampleArgs) -> CmdResult {
    let loaded = checkpoint::load(&a.ckpt)?;
    SamplerRegistry::builtin().get(&a.sampler)?;
    let sampler = SamplerConfig::new(&a.sampler, a.steps);
    sampler.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let parameterization = zigma::interpolant::ObjectiveRegistry::builtin()
        .get(&loaded.run.objective)?
        .parameterization();
    let params = match a.weights {
        Weights::Ema => &loaded.ema,
        Weights::Live => &loaded.params,
    };
    let samples = generate(
        &loaded.model,
        params,
        parameterization,
        &loaded.run.schedule()?,
        &sampler,
        a.n,
        a.seed,
    )?;
    write_samples(&a.out, &samples)?;
    Ok(())
}

fn run_bench(a: BenchArgs) -> CmdResult {
    if a.grid.is_empty() || a.kind.is_empty() {
        return Err(Failure::Usage("--kind and --grid need at least one entry".into()));
    }
    let mut points = Vec::new();
    for kind in &a.kind {
        for &tokens in &a.grid {
            points.push(BenchPoint {
                n: a.n,
                k: a.k,
                layers: a.layers,
                scan: a.scan.clone(),
                orf: a.orf,
                ..BenchPoint::new(kind, tokens, a.d)
            });
        }
    }
    let report = bench(&points, a.reps, a.memory_limit)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("bench.csv"), report.to_csv())?;
    fs::write(a.out.join("bench.json"), report.to_json()?)?;
    Ok(())
}

fn init_config(a: InitArgs) -> CmdResult {
    let cfg = RunConfig::example(a.run_dir);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, cfg.to_json()? + "\n")?;
    Ok(())
}
