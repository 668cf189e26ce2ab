use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vpgate_core::backends::CostMeter;
use vpgate_core::runner::{self, Mode, RunConfig, RunError, VariantMetrics};
use vpgate_core::synth::NoiseConfig;
use vpgate_core::Variant;

#[derive(Parser)]
#[command(name = "vpgate", version, about = "Predicate-gated refinement for text-to-image generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Image-model executions per prompt.
    #[arg(long)]
    budget: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// synthetic or live.
    #[arg(long)]
    mode: Option<String>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Prompts {
    /// Prompt file, one prompt per line.
    #[arg(long, conflicts_with = "suite")]
    prompts: Option<PathBuf>,
    /// Generate N random prompts of the synthetic language instead.
    #[arg(long)]
    suite: Option<usize>,
    /// Seed for the generated suite.
    #[arg(long, default_value_t = 0)]
    suite_seed: u64,
    /// Use the benchmark failure rates in synthetic mode.
    #[arg(long)]
    benchmark_noise: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, compile and normalize one prompt.
    Compile {
        prompt: Option<String>,
        /// Read the prompt from a file instead.
        #[arg(long, conflicts_with = "prompt")]
        file: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Verify a program document against an evidence document.
    Verify {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        evidence: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Refine a batch of prompts.
    Run {
        #[command(flatten)]
        prompts: Prompts,
        #[arg(long, default_value = "full")]
        variant: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run the same batch under several controller variants.
    Ablate {
        #[command(flatten)]
        prompts: Prompts,
        /// Comma-separated variants; all by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize a run or ablation directory.
    Report { dir: PathBuf },
}

fn config(common: &Common) -> Result<RunConfig, RunError> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env(|k| std::env::var(k).ok());
            c
        }
    };
    if let Some(b) = common.budget {
        c.budget = b;
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(m) = &common.mode {
        c.mode = Mode::parse(m).ok_or_else(|| RunError::MalformedInput(format!("unknown mode {m:?}")))?;
    }
    c.validate()?;
    Ok(c)
}

fn prompt_list(p: &Prompts, c: &mut RunConfig) -> Result<Vec<String>, RunError> {
    if p.benchmark_noise {
        c.synthetic.noise = NoiseConfig::benchmark();
    }
    let list = match (&p.prompts, p.suite) {
        (Some(path), _) => runner::read_prompts(&std::fs::read_to_string(path)?),
        (None, Some(n)) => {
            if c.mode != Mode::Synthetic {
                return Err(RunError::MalformedInput("--suite needs synthetic mode".into()));
            }
            runner::synthetic_prompts(n, p.suite_seed, &c.synthetic)
        }
        (None, None) => return Err(RunError::MalformedInput("give --prompts FILE or --suite N".into())),
    };
    if list.is_empty() {
        return Err(RunError::MalformedInput("no prompts".into()));
    }
    Ok(list)
}

fn variant(name: &str) -> Result<Variant, RunError> {
    Variant::parse(name).ok_or_else(|| RunError::MalformedInput(format!("unknown variant {name:?}")))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Compile { prompt, file, common } => {
            let c = config(&common)?;
            let prompt = match (prompt, file) {
                (Some(p), _) => p,
                (None, Some(f)) => std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?,
                (None, None) => bail!(RunError::MalformedInput("no prompt given".into())),
            };
            let suite = c.backends()?;
            let out = runner::compile_prompt(&suite.client(Arc::new(CostMeter::new())), &prompt)?;
            match common.out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("program.json"), out.program.canonical_string())?;
                    std::fs::write(dir.join("report.json"), runner::pretty(&out.report))?;
                    if let Some(r) = &out.review {
                        std::fs::write(dir.join("review.json"), runner::pretty(r))?;
                    }
                }
                None => print!("{}", runner::pretty(&out)),
            }
        }
        Command::Verify { program, evidence, common } => {
            let c = config(&common)?;
            let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
            let out = runner::verify_files(&read(&program)?, &read(&evidence)?, &c.thresholds, c.phase)?;
            emit(common.out.as_deref(), &runner::pretty(&out))?;
        }
        Command::Run { prompts, variant: v, common } => {
            let mut c = config(&common)?;
            let v = variant(&v)?;
            let list = prompt_list(&prompts, &mut c)?;
            let batch = runner::run_batch(&c.backends()?, &c, v, &list)?;
            if let Some(dir) = &common.out {
                runner::write_batch(dir, &batch)?;
            }
            print!("{}", runner::pretty(&batch.metrics));
        }
        Command::Ablate { prompts, variants, common } => {
            let mut c = config(&common)?;
            let vs = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| variant(v)).collect::<Result<_, _>>()?
            };
            let list = prompt_list(&prompts, &mut c)?;
            let (batches, table) = runner::ablate(&c.backends()?, &c, &vs, &list)?;
            if let Some(dir) = &common.out {
                for (b, v) in batches.iter().zip(&vs) {
                    runner::write_batch(&dir.join(v.name()), b)?;
                }
                std::fs::write(dir.join("ablation.json"), runner::pretty(&table))?;
            }
            print!("{}", runner::render_table(&table));
        }
        Command::Report { dir } => {
            let rows: Vec<VariantMetrics> = runner::report(&dir)?;
            print!("{}", runner::render_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let input_error = matches!(
                e.downcast_ref::<RunError>(),
                Some(RunError::SchemaViolation(_) | RunError::MalformedInput(_) | RunError::Config(_))
            );
            ExitCode::from(if input_error { 2 } else { 1 })
        }
    }
}
