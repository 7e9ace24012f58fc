mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use atr_core::rerank::RerankStrategy;
use atr_core::scorer::ScoreError;
use clap::{Parser, Subcommand, ValueEnum};

use config::{EngineConfig, ProviderKind, ScorerKind};

/// Adaptive table retrieval: similarity search, threshold-token reranking
/// and evaluation.
#[derive(Parser, Debug)]
#[command(name = "atr", version)]
struct Cli {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for per-query stages.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Threshold,
    Literal,
}

impl From<StrategyArg> for RerankStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Threshold => RerankStrategy::Threshold,
            StrategyArg::Literal => RerankStrategy::Literal,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build corpus.jsonl (and joins.jsonl beside it) from schema documents.
    Ingest {
        #[arg(long)]
        schemas: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write (hashed) or validate (file) the table embedding store.
    Embed {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        provider: Option<ProviderKind>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// First-stage top-N candidates per query.
    Retrieve {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        top_n: Option<usize>,
        #[arg(long, value_enum)]
        provider: Option<ProviderKind>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-window threshold reranking of candidate lists.
    Rerank {
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        scorer: Option<ScorerKind>,
        /// Lookup file for the mock scorer.
        #[arg(long)]
        mock: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        /// spider, bird or spider2.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        retain: Option<usize>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        max_sequence_tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Keep per-pass records in the output.
        #[arg(long)]
        trace: bool,
    },
    /// Precision, recall, complete recall and F1 against gold labels.
    Eval {
        #[arg(long)]
        rerank: PathBuf,
        /// Query file with gold table ids.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Logit-group ANOVA (needs a traced rerank file).
        #[arg(long)]
        anova: bool,
        #[arg(long)]
        plot_tsv: Option<PathBuf>,
    },
    /// Training examples with size filtering and a train/val split.
    Preprocess {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        max_table_tokens: Option<usize>,
        #[arg(long)]
        split_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Loss values and finite-difference gradient checks for batch files.
    Losscheck {
        #[arg(long)]
        batches: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        fd_h: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn pick(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| anyhow::anyhow!("missing --{what} (or paths.{what} in the config)"))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    match cli.command {
        Command::Ingest { schemas, out } => {
            cfg.validate()?;
            commands::ingest(&schemas, &out)
        }
        Command::Embed {
            corpus,
            provider,
            embeddings,
            dim,
        } => {
            if let Some(d) = dim {
                cfg.first_stage.dim = d;
            }
            cfg.validate()?;
            let corpus = pick(corpus, &cfg.paths.corpus, "corpus")?;
            commands::embed(&cfg, &corpus, provider.unwrap_or(cfg.first_stage.provider), embeddings)
        }
        Command::Retrieve {
            corpus,
            queries,
            top_n,
            provider,
            embeddings,
            out,
        } => {
            if let Some(n) = top_n {
                cfg.first_stage.top_n = n;
            }
            cfg.validate()?;
            commands::retrieve(
                &cfg,
                commands::RetrieveArgs {
                    corpus: pick(corpus, &cfg.paths.corpus, "corpus")?,
                    queries: pick(queries, &cfg.paths.queries, "queries")?,
                    top_n: cfg.first_stage.top_n,
                    provider: provider.unwrap_or(cfg.first_stage.provider),
                    embeddings,
                    out,
                },
            )
        }
        Command::Rerank {
            candidates,
            corpus,
            scorer,
            mock,
            endpoint,
            preset,
            window,
            retain,
            strategy,
            max_sequence_tokens,
            out,
            trace,
        } => {
            if preset.is_some() {
                cfg.rerank.preset = preset;
                cfg.rerank.window_size = None;
                cfg.rerank.retention_size = None;
            }
            cfg.rerank.window_size = window.or(cfg.rerank.window_size);
            cfg.rerank.retention_size = retain.or(cfg.rerank.retention_size);
            if let Some(s) = strategy {
                cfg.rerank.strategy = s.into();
            }
            if let Some(m) = max_sequence_tokens {
                cfg.scorer.max_sequence_tokens = m;
            }
            cfg.validate()?;
            commands::rerank(
                &cfg,
                commands::RerankArgs {
                    candidates: pick(candidates, &cfg.paths.candidates, "candidates")?,
                    corpus: pick(corpus, &cfg.paths.corpus, "corpus")?,
                    scorer: scorer.unwrap_or(cfg.scorer.kind),
                    mock,
                    endpoint,
                    strategy: cfg.rerank.strategy,
                    out,
                    trace,
                },
            )
        }
        Command::Eval {
            rerank,
            gold,
            out,
            anova,
            plot_tsv,
        } => commands::eval(commands::EvalArgs {
            rerank,
            gold,
            out,
            anova,
            plot_tsv,
        }),
        Command::Preprocess {
            corpus,
            queries,
            out_dir,
            max_table_tokens,
            split_ratio,
            seed,
        } => {
            let p = &mut cfg.preprocess;
            p.max_table_tokens = max_table_tokens.unwrap_or(p.max_table_tokens);
            p.split_ratio = split_ratio.unwrap_or(p.split_ratio);
            p.seed = seed.unwrap_or(p.seed);
            cfg.validate()?;
            commands::preprocess(
                &cfg,
                commands::PreprocessArgs {
                    corpus: pick(corpus, &cfg.paths.corpus, "corpus")?,
                    queries: pick(queries, &cfg.paths.queries, "queries")?,
                    out_dir: pick(out_dir, &cfg.paths.output_dir, "output_dir")?,
                },
            )
        }
        Command::Losscheck { batches, fd_h, out } => {
            cfg.validate()?;
            commands::losscheck(&cfg.loss.weights(), &batches, fd_h, &out)
        }
    }
}

/// 3 for scorer and protocol failures, 2 for everything the user can fix.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ScoreError>() {
            return match e {
                ScoreError::EmptyRequest
                | ScoreError::TooManyTables { .. }
                | ScoreError::SequenceTooLong { .. }
                | ScoreError::BadSpec(_)
                | ScoreError::Jsonl(_) => 2,
                _ => 3,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
