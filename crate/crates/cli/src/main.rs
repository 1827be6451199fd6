use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use specdec_core::bench::{emit_grid, run_bench, BenchMetadata, GridFormat};
use specdec_core::checkpoint::{file_hash, Container};
use specdec_core::config::RunConfig;
use specdec_core::corpus::Tokenizer;
use specdec_core::decode::{batched_speculative_generate, greedy_generate, Drafter};
use specdec_core::model::BaseModel;
use specdec_core::speculator::{Speculator, SpeculatorConfig};
use specdec_core::train::{losses_to_csv, run_two_stage_training, train_base, RunOptions};
use specdec_core::{Error, Result};

#[derive(Parser)]
#[command(name = "specdec", version, about = "Speculative decoding with a multi-stage MLP speculator")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides every seed in the configuration except the corpus seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on next-token prediction.
    TrainBase {
        #[arg(long)]
        out: PathBuf,
        /// Write the per-step loss curve as CSV.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Two-stage speculator training against a frozen base model.
    TrainSpec {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        losses: Option<PathBuf>,
        /// Directory for periodic checkpoints.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Continue from the latest checkpoint in --checkpoint-dir.
        #[arg(long, requires = "checkpoint_dir")]
        resume: bool,
    },
    /// Greedy generation, speculative when --k is positive.
    Generate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        speculator: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        k: usize,
        /// Print decode statistics as JSON on stderr.
        #[arg(long)]
        stats: bool,
    },
    /// Latency grid over the bench section of the configuration.
    Bench {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        speculator: Option<PathBuf>,
        #[arg(long, default_value = "text")]
        format: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise a checkpoint: kind, tensor shapes, parameter count, hash.
    Inspect { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.command {
        Command::TrainBase { out, losses } => cmd_train_base(&cfg, &out, losses.as_deref()),
        Command::TrainSpec {
            base,
            out,
            losses,
            checkpoint_dir,
            resume,
        } => cmd_train_spec(&cfg, &base, &out, losses.as_deref(), checkpoint_dir, resume),
        Command::Generate {
            base,
            speculator,
            prompt,
            max_new,
            k,
            stats,
        } => cmd_generate(&base, speculator.as_deref(), &prompt, max_new, k, stats),
        Command::Bench {
            base,
            speculator,
            format,
            out,
        } => cmd_bench(&cfg, &base, speculator.as_deref(), &format, out.as_deref()),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_base(path: &Path) -> Result<BaseModel> {
    BaseModel::from_container(Container::load(path)?)
}

fn load_speculator(path: &Path) -> Result<Speculator> {
    Speculator::from_container(Container::load(path)?)
}

fn cmd_train_base(cfg: &RunConfig, out: &Path, losses: Option<&Path>) -> Result<()> {
    let (train, _) = cfg.corpus.load()?;
    let every = (cfg.train.base_steps / 20).max(1);
    let (model, curve) = train_base(&cfg.train, cfg.base_model.clone(), &train, |step, loss| {
        if step % every == 0 || step + 1 == cfg.train.base_steps {
            eprintln!("base step {step}: loss {loss:.4}");
        }
    })?;
    model.to_container()?.save(out)?;
    if let Some(path) = losses {
        let mut csv = String::from("step,loss\n");
        for (i, l) in curve.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        write_file(path, csv.as_bytes())?;
    }
    eprintln!("saved base model to {} (checksum {})", out.display(), model.checksum());
    Ok(())
}

fn cmd_train_spec(
    cfg: &RunConfig,
    base_path: &Path,
    out: &Path,
    losses: Option<&Path>,
    checkpoint_dir: Option<PathBuf>,
    resume: bool,
) -> Result<()> {
    let base = load_base(base_path)?;
    let (train, _) = cfg.corpus.load()?;
    let total = cfg.train.stage1_steps + cfg.train.stage2_steps;
    let every = (total / 20).max(1);
    let opts = RunOptions {
        checkpoint_dir,
        resume,
        stop_after: None,
    };
    let outcome = run_two_stage_training(&cfg.train, cfg.speculator.clone(), &base, &train, &opts, |r| {
        if r.step % every == 0 || r.step + 1 == total {
            let heads: Vec<String> = r.per_head.iter().map(|l| format!("{l:.4}")).collect();
            eprintln!("stage {} step {}: {}", r.stage.tag(), r.step, heads.join(" "));
        }
    })?;
    outcome.speculator.to_container()?.save(out)?;
    if let Some(path) = losses {
        write_file(path, losses_to_csv(&outcome.losses, cfg.speculator.n_stages).as_bytes())?;
    }
    eprintln!("saved speculator to {}", out.display());
    Ok(())
}

fn cmd_generate(
    base_path: &Path,
    spec_path: Option<&Path>,
    prompt: &str,
    max_new: usize,
    k: usize,
    show_stats: bool,
) -> Result<()> {
    let base = load_base(base_path)?;
    let tok = Tokenizer;
    let prompt = tok.encode(prompt.as_bytes());
    let (out, stats) = if k == 0 {
        greedy_generate(&base, &[prompt], max_new)?
    } else {
        let path = spec_path.ok_or_else(|| Error::Config("--k > 0 needs --speculator".into()))?;
        let spec = load_speculator(path)?;
        check_pair(&base, spec.config())?;
        batched_speculative_generate(&base, &spec as &dyn Drafter, &[prompt], max_new, k)?
    };
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(&tok.decode(&out[0]))
        .and_then(|_| stdout.write_all(b"\n"))
        .map_err(|e| Error::io("<stdout>", e))?;
    if show_stats {
        eprintln!("{}", serde_json::to_string(&stats)?);
    }
    Ok(())
}

fn check_pair(base: &BaseModel, spec: &SpeculatorConfig) -> Result<()> {
    if spec.d_base != base.config().d_model || spec.vocab_size != base.config().vocab_size {
        return Err(Error::Config(
            "speculator was trained for a different base model".into(),
        ));
    }
    Ok(())
}

fn cmd_bench(
    cfg: &RunConfig,
    base_path: &Path,
    spec_path: Option<&Path>,
    format: &str,
    out: Option<&Path>,
) -> Result<()> {
    let format: GridFormat = format.parse()?;
    let base = load_base(base_path)?;
    let spec = spec_path.map(load_speculator).transpose()?;
    if let Some(s) = &spec {
        check_pair(&base, s.config())?;
    }
    let (_, heldout) = cfg.corpus.load()?;
    let meta = BenchMetadata::describe(&base, spec.as_ref())?;
    let drafter = spec.as_ref().map(|s| s as &dyn Drafter);
    let grid = run_bench(&cfg.bench, &base, drafter, &heldout, meta, |c| {
        eprintln!(
            "b={} p={} k={}: {:.3} ms/token, tau {:.2}",
            c.b, c.p, c.k, c.ms_per_token_mean, c.tau
        );
    })?;
    let report = emit_grid(&grid, format)?;
    match out {
        Some(path) => write_file(path, report.as_bytes()),
        None => {
            print!("{report}");
            Ok(())
        }
    }
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let c = Container::load(path)?;
    println!("file: {}", path.display());
    println!("sha256: {}", file_hash(path)?);
    println!("kind: {}", c.kind);
    println!("config: {}", serde_json::to_string(&c.config)?);
    println!("param_count: {}", c.param_count());
    if c.kind == "speculator" {
        let cfg: SpeculatorConfig = serde_json::from_value(c.config.clone())?;
        println!("formula_param_count: {}", cfg.expected_param_count());
    }
    for (name, t) in &c.tensors {
        println!("tensor {name} {:?}", t.shape());
    }
    Ok(())
}
