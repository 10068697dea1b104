use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use probgate_core::config::RunConfig;
use probgate_core::pipeline;
use probgate_core::{GateMode, RsConfig, ScorerKind};

#[derive(Parser)]
#[command(name = "probgate", version, about = "Confidence gating and reliability scoring for text-to-SQL outputs")]
struct Cli {
    /// JSON run configuration; flags override it field by field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    run: RunArgs,

    /// Log filter, e.g. `info` or `probgate_core=debug`.
    #[arg(long, global = true, default_value = "warn", env = "PROBGATE_LOG")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct RunArgs {
    #[arg(long, global = true, value_parser = parse_scorer)]
    scorer: Option<ScorerKind>,
    /// Number of lowest content-token log probabilities averaged.
    #[arg(long, global = true)]
    t: Option<usize>,
    #[arg(long, global = true, value_parser = parse_gate_mode)]
    gate_mode: Option<GateMode>,
    /// Abstain on the k least confident records.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Abstain on this fraction of records, rounded to the nearest count.
    #[arg(long, global = true)]
    fraction: Option<f64>,
    /// Abstain on records scoring strictly below this value.
    #[arg(long, global = true, allow_hyphen_values = true)]
    absolute_threshold: Option<f64>,
    /// Penalty optimised by the sweep: a number or `N`.
    #[arg(long, global = true)]
    sweep_penalty: Option<RsConfig>,
    /// Penalties reported by evaluation, e.g. `0,5,10,N`.
    #[arg(long, global = true, value_delimiter = ',')]
    penalty_grid: Option<Vec<RsConfig>>,
    #[arg(long = "db", global = true, env = "PROBGATE_DB")]
    db_path: Option<PathBuf>,
    #[arg(long, global = true)]
    exec_timeout_ms: Option<u64>,
    #[arg(long, global = true)]
    generations: Option<PathBuf>,
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Reserved-word list, one entry per line, replacing the built-in one.
    #[arg(long, global = true)]
    lexicon: Option<PathBuf>,
    #[arg(long, global = true)]
    histogram_bin_width: Option<f64>,
}

impl RunArgs {
    fn into_config(self) -> RunConfig {
        RunConfig {
            scorer: self.scorer,
            t: self.t,
            gate_mode: self.gate_mode,
            k: self.k,
            fraction: self.fraction,
            absolute_threshold: self.absolute_threshold,
            sweep_penalty: self.sweep_penalty,
            penalty_grid: self.penalty_grid,
            db_path: self.db_path,
            exec_timeout_ms: self.exec_timeout_ms,
            generations: self.generations,
            labels: self.labels,
            out_dir: self.out_dir,
            lexicon: self.lexicon,
            histogram_bin_width: self.histogram_bin_width,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Score every generation by its bottom-t content log probability.
    Score {
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn scores into answer/abstain decisions.
    Gate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Abstain on answered queries that fail to execute.
    ExecFilter {
        #[arg(long)]
        decisions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the id -> SQL-or-"null" prediction file.
    Predict {
        #[arg(long)]
        decisions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Find the rank-gate size that maximises RS on labeled data.
    Sweep {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-bin counts of scores for answerable and unanswerable records.
    Histogram {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run score, gate, execution filter, predict and evaluate in one go.
    Pipeline,
    /// Query an OpenAI-compatible endpoint and write generations.jsonl.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// JSONL with `id` and `question` fields.
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "PROBGATE_BASE_URL")]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    request_timeout_ms: Option<u64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_logprobs: Option<u8>,
    #[arg(long)]
    concurrency: Option<usize>,
}

fn parse_scorer(s: &str) -> Result<ScorerKind, String> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "probgate" => Ok(ScorerKind::Probgate),
        "max_entropy" => Ok(ScorerKind::MaxEntropy),
        _ => Err(format!("unknown scorer {s:?}, expected probgate or max-entropy")),
    }
}

fn parse_gate_mode(s: &str) -> Result<GateMode, String> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "fixed_k" | "k" => Ok(GateMode::FixedK),
        "fraction" => Ok(GateMode::Fraction),
        "absolute" => Ok(GateMode::Absolute),
        "sweep" => Ok(GateMode::Sweep),
        _ => Err(format!("unknown gate mode {s:?}, expected fixed-k, fraction, absolute or sweep")),
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| anyhow!("missing --{flag} (or `{}` in the config file)", flag.replace('-', "_")))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let cfg = base.merged(cli.run.into_config());

    match cli.command {
        Command::Score { out } => {
            let lex = pipeline::load_lexicon(cfg.lexicon.as_deref())?;
            let scores = pipeline::cmd_score(require(&cfg.generations, "generations")?, &cfg.scorer_config()?, &lex, &out)?;
            let unscorable = scores.iter().filter(|s| s.is_unscorable()).count();
            println!("scored {} records ({unscorable} unscorable) -> {}", scores.len(), out.display());
        }
        Command::Gate { scores, out } => {
            let gate = cfg.gate_config()?;
            let output = pipeline::cmd_gate(&scores, &gate, &out)?;
            let abstained = output.decisions.iter().filter(|d| !d.answer()).count();
            println!("abstained on {abstained} of {} records -> {}", output.decisions.len(), out.display());
        }
        Command::ExecFilter { decisions, out } => {
            let filtered = pipeline::cmd_exec_filter(
                &decisions,
                require(&cfg.generations, "generations")?,
                require(&cfg.db_path, "db")?,
                cfg.exec_timeout_ms(),
                &out,
            )?;
            let dropped = filtered.iter().filter(|d| d.stage == probgate_core::GateStage::ExecutionGate).count();
            println!("execution filter abstained on {dropped} answered records -> {}", out.display());
        }
        Command::Predict { decisions, out } => {
            let preds = pipeline::cmd_predict(&decisions, require(&cfg.generations, "generations")?, &out)?;
            println!("wrote {} predictions -> {}", preds.len(), out.display());
        }
        Command::Evaluate { predictions } => {
            let out_dir = require(&cfg.out_dir, "out-dir")?;
            let db = cfg.db_path.as_deref().map(|p| (p, cfg.exec_timeout_ms()));
            let eval =
                pipeline::cmd_evaluate(&predictions, require(&cfg.labels, "labels")?, db, &cfg.penalty_grid(), out_dir)?;
            for row in &eval.rs_table {
                println!("RS({})\t{:.2}", row.penalty, row.rs);
            }
        }
        Command::Sweep { scores, out } => {
            let penalty = cfg
                .sweep_penalty
                .ok_or_else(|| anyhow!("missing --sweep-penalty (or `sweep_penalty` in the config file)"))?;
            let result = pipeline::cmd_sweep(
                &scores,
                require(&cfg.generations, "generations")?,
                require(&cfg.labels, "labels")?,
                require(&cfg.db_path, "db")?,
                cfg.exec_timeout_ms(),
                penalty,
                &out,
            )?;
            println!("k* = {}  RS({penalty}) = {:.2}", result.k_star, result.rs_star);
        }
        Command::Histogram { scores, out } => {
            let hist = pipeline::cmd_histogram(&scores, require(&cfg.labels, "labels")?, cfg.histogram_spec(), &out)?;
            let fmt = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "{} bins, mean answerable {}, mean unanswerable {} -> {}",
                hist.bins.len(),
                fmt(hist.answerable_mean),
                fmt(hist.unanswerable_mean),
                out.display()
            );
        }
        Command::Pipeline => {
            let summary = pipeline::run_pipeline(&cfg)?;
            print_json(&summary)?;
        }
        Command::Generate(args) => generate(args)?,
    }
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    use probgate_client::{fetch_all, read_questions, ClientConfig, HttpTransport};

    let mut cfg = ClientConfig::default();
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { cfg.$field = v; })*
        };
    }
    set!(base_url, model, api_key_env, max_retries, request_timeout_ms, temperature, top_logprobs, concurrency);
    cfg.validate()?;

    let questions = read_questions(&args.questions)?;
    if questions.is_empty() {
        bail!("{} contains no questions", args.questions.display());
    }
    let transport = HttpTransport::new(cfg.request_timeout_ms)?;
    let fetched = fetch_all(&transport, &cfg, &questions)?;
    let retries: u32 = fetched.iter().map(|f| f.retries).sum();
    let records: Vec<_> = fetched.into_iter().map(|f| f.record).collect();
    probgate_core::io::write_generations(&args.out, &records)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} generations ({retries} retries) -> {}", records.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "warn".into());
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
