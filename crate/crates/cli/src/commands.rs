use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use atr_core::corpus::{default_joins_path, Corpus, DefaultTokenizer, QueryRecord};
use atr_core::firststage::{
    write_embeddings, CandidateList, DenseIndex, EmbeddingProvider, FileProvider, HashedProvider,
};
use atr_core::jsonl;
use atr_core::losses::{finite_difference_check, loss, Component, LossBatch, LossWeights};
use atr_core::metrics::{aggregate, anova_logits, LogitGroups, QueryReport, PLOT_HEADER};
use atr_core::preprocess::{build_examples, filter_corpus, split_train_val, write_outputs, SEGMENT_SIZE};
use atr_core::rerank::{resolve_candidates, RerankRecord, RerankStrategy, Reranker};
use atr_core::scorer::{MockScorer, RelevanceScorer, RemoteScorer};
use log::info;
use rayon::prelude::*;

use crate::config::{EngineConfig, ProviderKind, ScorerKind};

fn existing(path: &Path) -> Result<&Path> {
    if !path.exists() {
        bail!("input not found: {}", path.display());
    }
    Ok(path)
}

fn pool(config: &EngineConfig) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.workers {
        builder = builder.num_threads(n);
    }
    builder.build().context("cannot start worker pool")
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    existing(path)?;
    let joins = default_joins_path(path);
    existing(&joins)?;
    Ok(Corpus::read_jsonl(path, &joins)?)
}

fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    Ok(QueryRecord::read_jsonl(existing(path)?)?)
}

pub fn ingest(schemas: &Path, out: &Path) -> Result<()> {
    if !existing(schemas)?.is_dir() {
        bail!("schemas path is not a directory: {}", schemas.display());
    }
    let corpus = Corpus::ingest_dir(schemas)?;
    let joins = default_joins_path(out);
    corpus.write_jsonl(out, &joins)?;
    info!(
        "ingest: {} tables, {} join edges, {} databases with foreign keys -> {}",
        corpus.len(),
        corpus.joins().edges.len(),
        corpus.databases_with_joins().len(),
        out.display()
    );
    Ok(())
}

fn provider(config: &EngineConfig, kind: ProviderKind, embeddings: Option<&Path>) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match kind {
        ProviderKind::Hashed => Box::new(HashedProvider::new(config.first_stage.dim)?),
        ProviderKind::File => {
            let path = embeddings.context("the file provider needs --embeddings")?;
            Box::new(FileProvider::load(existing(path)?)?)
        }
    })
}

pub fn embed(config: &EngineConfig, corpus: &Path, kind: ProviderKind, embeddings: Option<PathBuf>) -> Result<()> {
    let corpus_data = load_corpus(corpus)?;
    let store = embeddings
        .or_else(|| config.paths.embeddings.clone())
        .unwrap_or_else(|| corpus.with_file_name("embeddings.jsonl"));
    match kind {
        ProviderKind::Hashed => {
            let p = HashedProvider::new(config.first_stage.dim)?;
            let index = DenseIndex::build(&corpus_data, &p)?;
            write_embeddings(&store, p.dim(), index.vectors())?;
            info!("embed: {} tables, dim {} -> {}", corpus_data.len(), p.dim(), store.display());
        }
        ProviderKind::File => {
            let p = FileProvider::load(existing(&store)?)?;
            DenseIndex::build(&corpus_data, &p)?;
            info!("embed: {} covers all {} tables (dim {})", store.display(), corpus_data.len(), p.dim());
        }
    }
    Ok(())
}

pub struct RetrieveArgs {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub top_n: usize,
    pub provider: ProviderKind,
    pub embeddings: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn retrieve(config: &EngineConfig, args: RetrieveArgs) -> Result<()> {
    if args.top_n == 0 {
        bail!("--top-n must be at least 1");
    }
    let corpus = load_corpus(&args.corpus)?;
    let queries = load_queries(&args.queries)?;
    let embeddings = args.embeddings.or_else(|| config.paths.embeddings.clone());
    let provider = provider(config, args.provider, embeddings.as_deref())?;
    let index = DenseIndex::build(&corpus, provider.as_ref())?;
    let lists: Vec<CandidateList> = pool(config)?.install(|| {
        queries
            .par_iter()
            .map(|q| {
                let candidates = index
                    .retrieve_top_n(q, provider.as_ref(), args.top_n)
                    .with_context(|| format!("query {}", q.query_id))?;
                Ok(CandidateList {
                    query_id: q.query_id.clone(),
                    text: q.text.clone(),
                    candidates,
                })
            })
            .collect::<Result<_>>()
    })?;
    jsonl::write(&args.out, &lists)?;
    info!("retrieve: {} queries, top {} -> {}", lists.len(), args.top_n, args.out.display());
    Ok(())
}

pub struct RerankArgs {
    pub candidates: PathBuf,
    pub corpus: PathBuf,
    pub scorer: ScorerKind,
    pub mock: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub strategy: RerankStrategy,
    pub out: PathBuf,
    pub trace: bool,
}

fn scorer(config: &EngineConfig, args: &RerankArgs) -> Result<Box<dyn RelevanceScorer>> {
    Ok(match args.scorer {
        ScorerKind::Mock => {
            let path = args
                .mock
                .clone()
                .or_else(|| config.scorer.mock_path.clone())
                .context("the mock scorer needs --mock or scorer.mock_path")?;
            Box::new(MockScorer::from_file(existing(&path)?)?)
        }
        ScorerKind::Remote => {
            let endpoint = args
                .endpoint
                .clone()
                .or_else(|| config.endpoint())
                .context("the remote scorer needs --endpoint, ATR_SCORER_ENDPOINT or scorer.endpoint")?;
            Box::new(
                RemoteScorer::new(&endpoint)?
                    .with_retries(config.scorer.retries, Duration::from_millis(config.scorer.backoff_ms)),
            )
        }
    })
}

pub fn rerank(config: &EngineConfig, args: RerankArgs) -> Result<()> {
    let window = config.window()?;
    let corpus = load_corpus(&args.corpus)?;
    let lists: Vec<CandidateList> = jsonl::read(existing(&args.candidates)?)?;
    let scorer = scorer(config, &args)?;
    let reranker = Reranker::new(window)
        .with_strategy(args.strategy)
        .with_max_sequence_tokens(config.scorer.max_sequence_tokens);
    info!(
        "rerank: {} queries, W={} R={}, {:?} strategy",
        lists.len(),
        window.window_size,
        window.retention_size,
        args.strategy
    );
    let records: Vec<RerankRecord> = pool(config)?.install(|| {
        lists
            .par_iter()
            .map(|list| {
                let tables = resolve_candidates(&corpus, &list.candidates)
                    .with_context(|| format!("candidates for {}", list.query_id))?;
                let outcome = reranker
                    .rerank(&list.text, &tables, scorer.as_ref())
                    .with_context(|| format!("reranking {}", list.query_id))?;
                Ok(RerankRecord::from_outcome(&list.query_id, outcome, args.trace))
            })
            .collect::<Result<_>>()
    })?;
    jsonl::write(&args.out, &records)?;
    info!("rerank: wrote {}", args.out.display());
    Ok(())
}

pub struct EvalArgs {
    pub rerank: PathBuf,
    pub gold: PathBuf,
    pub out: PathBuf,
    pub anova: bool,
    pub plot_tsv: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let records: Vec<RerankRecord> = jsonl::read(existing(&args.rerank)?)?;
    let gold: HashMap<String, QueryRecord> = load_queries(&args.gold)?
        .into_iter()
        .map(|q| (q.query_id.clone(), q))
        .collect();
    let mut per_query = Vec::with_capacity(records.len());
    let mut groups = LogitGroups::default();
    for r in &records {
        let q = gold
            .get(&r.query_id)
            .with_context(|| format!("no gold labels for query {}", r.query_id))?;
        per_query.push(QueryReport::new(&r.query_id, &r.retrieved, &q.gold, r.input_tokens, r.pass_count)?);
        if args.anova {
            let trace = r
                .trace
                .as_ref()
                .with_context(|| format!("--anova needs traces; rerun rerank with --trace ({})", r.query_id))?;
            groups.add_trace(trace, &q.gold);
        }
    }
    let report = aggregate(per_query)?;
    report.write_csv_file(&args.out)?;
    let json = args.out.with_extension("json");
    report.write_json_file(&json)?;
    let m = report.macro_scores;
    info!(
        "eval: P {:.2} R {:.2} CR {:.2} F1 {:.2}, mean input tokens {:.1} -> {}",
        m.precision,
        m.recall,
        m.complete_recall,
        m.f1,
        report.mean_input_tokens,
        args.out.display()
    );
    if let Some(tsv) = &args.plot_tsv {
        std::fs::write(tsv, format!("{PLOT_HEADER}\n{}\n", report.plot_row()))
            .with_context(|| format!("cannot write {}", tsv.display()))?;
    }
    if args.anova {
        let a = anova_logits(&groups)?;
        let path = args.out.with_file_name("anova.json");
        std::fs::write(&path, serde_json::to_string_pretty(&a)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        info!("eval: anova F {:.3}, eta^2 {:.4} -> {}", a.f_statistic, a.eta_squared, path.display());
    }
    Ok(())
}

pub struct PreprocessArgs {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub out_dir: PathBuf,
}

pub fn preprocess(config: &EngineConfig, args: PreprocessArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let queries = load_queries(&args.queries)?;
    let p = &config.preprocess;
    let filtered = filter_corpus(&corpus, &queries, &DefaultTokenizer, p.max_table_tokens);
    info!(
        "preprocess: removed {} tables over {} tokens, dropped {} queries",
        filtered.removed_tables.len(),
        p.max_table_tokens,
        filtered.dropped.len()
    );
    let provider = HashedProvider::new(config.first_stage.dim)?;
    let (examples, mut dropped) = pool(config)?.install(|| {
        build_examples(&filtered.queries, &filtered.corpus, &provider, SEGMENT_SIZE)
    })?;
    let (train, val) = split_train_val(&examples, p.split_ratio, p.seed)?;
    let mut all_dropped = filtered.dropped;
    all_dropped.append(&mut dropped);
    write_outputs(&args.out_dir, &train, &val, &filtered.removed_tables, &all_dropped)?;
    info!(
        "preprocess: {} examples, {} train / {} val -> {}",
        examples.len(),
        train.len(),
        val.len(),
        args.out_dir.display()
    );
    Ok(())
}

pub const LOSSCHECK_HEADER: &str = "batch,component,value,max_rel_error,max_abs_error,parameters,status";

pub fn losscheck(weights: &LossWeights, batches: &Path, h: f64, out: &Path) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        bail!("--fd-h must be positive");
    }
    weights.validate()?;
    let rows: Vec<LossBatch> = jsonl::read(existing(batches)?)?;
    let mut csv = String::from(LOSSCHECK_HEADER);
    csv.push('\n');
    let mut worst: f64 = 0.0;
    for (i, b) in rows.iter().enumerate() {
        b.validate().with_context(|| format!("batch {}", i + 1))?;
        for which in Component::ALL {
            let name = which.name();
            match loss(b, weights, which).and_then(|v| Ok((v, finite_difference_check(b, weights, which, h)?))) {
                Ok((value, fd)) => {
                    worst = worst.max(fd.max_rel_error);
                    writeln!(
                        csv,
                        "{},{name},{value:.12},{:.3e},{:.3e},{},ok",
                        i + 1,
                        fd.max_rel_error,
                        fd.max_abs_error,
                        fd.parameters
                    )?;
                }
                // Components whose preconditions the batch does not meet.
                Err(e) => writeln!(csv, "{},{name},,,,,\"skipped: {e}\"", i + 1)?,
            }
        }
    }
    std::fs::write(out, csv).with_context(|| format!("cannot write {}", out.display()))?;
    info!("losscheck: {} batches, worst relative error {worst:.2e} -> {}", rows.len(), out.display());
    Ok(())
}
