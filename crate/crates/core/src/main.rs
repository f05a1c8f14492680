use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use profagent::baselines::BaselineMethod;
use profagent::evaluation::TimingMode;
use profagent::llm::BackendKind;
use profagent::pipeline::{render_report, run_pipeline, Precision, RunConfig, Stage, StageStatus, STAGE_ORDER};
use profagent::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "profagent", version, about = "Profile, compress and evaluate vision classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Static and dynamic profile of the model.
    Profile(Common),
    /// Ask for a compression plan based on the profile.
    Analyze(Common),
    /// Apply the plan's pruning directives.
    Prune(Common),
    /// Apply the plan's quantization directives, or quantize every linear layer.
    Quantize(Common),
    /// Evaluate the original and every compressed variant of the run.
    Evaluate(Common),
    /// Run one baseline method (`--method`, `--ratio`).
    Baseline(Common),
    /// Iterative pruning loop.
    Iterate(Common),
    /// Every configured stage in order.
    Run(Common),
    /// Render the comparison table of an existing run.
    Report {
        #[arg(long)]
        run_id: String,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Live,
    Scripted,
    Offline,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TimingArg {
    Wall,
    Modeled,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    device: Option<String>,
    #[arg(long, value_enum)]
    llm_backend: Option<BackendArg>,
    /// Directory of scripted LLM responses.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    /// Baseline method: l1, l2, random or quant-int8.
    #[arg(long)]
    method: Option<String>,
    /// Quantization dtype: qint8 or float16.
    #[arg(long)]
    dtype: Option<String>,
    /// Quantize the pruned model instead of the original.
    #[arg(long)]
    compose: bool,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long, value_enum)]
    timing: Option<TimingArg>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
}

impl Common {
    fn into_config(self, stage: Option<Stage>) -> Result<(RunConfig, PathBuf), Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.model {
            cfg.model_id = v;
        }
        if let Some(v) = self.dataset {
            cfg.dataset_id = v;
        }
        if let Some(v) = self.device {
            cfg.device = v;
        }
        if let Some(v) = self.llm_backend {
            cfg.llm_backend = match v {
                BackendArg::Live => BackendKind::Live,
                BackendArg::Scripted => BackendKind::Scripted,
                BackendArg::Offline => BackendKind::Offline,
            };
        }
        if let Some(v) = self.fixtures {
            cfg.llm_fixtures = Some(v);
        }
        if let Some(v) = self.samples {
            cfg.n_samples = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.ratio {
            cfg.baseline_ratio = Some(v);
        }
        if let Some(v) = self.method {
            cfg.baseline_method = Some(BaselineMethod::parse(&v)?);
        }
        if let Some(v) = self.dtype {
            cfg.quant_dtype = v;
        }
        if self.compose {
            cfg.compose = true;
        }
        if let Some(v) = self.precision {
            cfg.precision = match v {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if let Some(v) = self.timing {
            cfg.timing = match v {
                TimingArg::Wall => TimingMode::Wall,
                TimingArg::Modeled => TimingMode::Modeled,
            };
        }
        if let Some(v) = self.run_id {
            cfg.run_id = v;
        }
        if let Some(s) = stage {
            cfg.stages = vec![s];
        } else if cfg.baseline_method.is_some() && !cfg.stages.contains(&Stage::Baseline) {
            cfg.stages.push(Stage::Baseline);
            cfg.stages.sort_by_key(|s| STAGE_ORDER.iter().position(|o| o == s));
        }
        Ok((cfg, self.runs_dir))
    }
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::UnknownModel(_) | Error::DatasetUnavailable(_) | Error::DeviceUnavailable(_) => {
            ExitCode::from(EXIT_CONFIG)
        }
        _ => ExitCode::from(EXIT_STAGE),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, stage) = match cli.command {
        Command::Report { run_id, runs_dir } => {
            return match render_report(&runs_dir.join(run_id)) {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            };
        }
        Command::Profile(c) => (c, Some(Stage::Profile)),
        Command::Analyze(c) => (c, Some(Stage::Analyze)),
        Command::Prune(c) => (c, Some(Stage::Prune)),
        Command::Quantize(c) => (c, Some(Stage::Quantize)),
        Command::Evaluate(c) => (c, Some(Stage::Evaluate)),
        Command::Baseline(c) => (c, Some(Stage::Baseline)),
        Command::Iterate(c) => (c, Some(Stage::Iterate)),
        Command::Run(c) => (c, None),
    };
    let (cfg, runs_dir) = match common.into_config(stage) {
        Ok(v) => v,
        Err(e) => return exit_for(&e),
    };
    let manifest = match run_pipeline(cfg, &runs_dir) {
        Ok(m) => m,
        Err(e) => return exit_for(&e),
    };
    println!("run {} in {}", manifest.run_id, runs_dir.join(&manifest.run_id).display());
    for s in &manifest.stages {
        let status = match s.status {
            StageStatus::Ok => "ok",
            StageStatus::Cached => "skipped (cached)",
            StageStatus::DependencyFailed => "skipped (dependency failed)",
            StageStatus::Failed => "failed",
        };
        match &s.detail {
            Some(d) => println!("  {:<9} {status}: {d}", s.stage.as_str()),
            None => println!("  {:<9} {status} ({:.2}s)", s.stage.as_str(), s.wall_s),
        }
    }
    if let Ok(text) = render_report(&runs_dir.join(&manifest.run_id)) {
        print!("\n{text}");
    }
    if manifest.failed() {
        ExitCode::from(EXIT_STAGE)
    } else {
        ExitCode::SUCCESS
    }
}
