//! Command-line entry point: training, perplexity evaluation, EWC
//! fine-tuning, Fisher estimation, checkpoint averaging, n-best document
//! reranking, and corpus filtering.
//!
//! Every run resolves its configuration from defaults, then an optional
//! `key = value` config file, then flags (flags win), logs the resolved
//! configuration and seed to stderr, and only then executes. Exit codes:
//! 0 success, 1 runtime failure, 2 usage error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use doclm::corpus::{build_vocab, load_documents, load_raw_documents, Vocabulary};
use doclm::filter::{filter_corpus, FilterConfig};
use doclm::langid::TrigramDetector;
use doclm::model::{
    init_params, log_prob, perplexity, windows_for_mode, Mode, ModelConfig, DEFAULT_C_CTX,
};
use doclm::rerank::{
    greedy_rerank, parse_doc_groups, parse_nbest, LmScorer, NBestDocument, RerankConfig,
};
use doclm::train::{
    average_checkpoints, estimate_fisher, finetune_ewc, load_checkpoint, load_fisher,
    save_checkpoint, save_fisher, train, Checkpoint, EWCState, OptimizerConfig, TrainOutcome,
};

#[derive(Parser)]
#[command(name = "doclm", version, about = "Document-level language modelling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a language model on a document corpus
    Train(TrainArgs),
    /// Report corpus and per-document perplexity under a checkpoint
    EvalPpl(EvalArgs),
    /// Fine-tune a checkpoint with the EWC objective
    Finetune(FinetuneArgs),
    /// Estimate per-parameter Fisher information on a corpus
    Fisher(FisherArgs),
    /// Average checkpoints into one parameter set
    Average(AverageArgs),
    /// Greedily rerank sentence n-best lists with a document LM
    Rerank(RerankArgs),
    /// Filter a parallel corpus with the heuristic rules
    Filter(FilterArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file of `key = value` lines; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model variant: sentence, doc-standard, or intra-inter
    #[arg(long)]
    mode: Option<String>,
    /// Training corpus (one sentence per line, blank line between documents)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Total micro-batch iterations
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for checkpoints, vocabulary, and the loss log
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Vocabulary threshold: words seen fewer times map to <unk>
    #[arg(long)]
    min_count: Option<usize>,
    /// Trailing-context budget for continuation windows
    #[arg(long)]
    c_ctx: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// SGD delay factor: micro-batches accumulated per update
    #[arg(long)]
    delay: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    /// Dump a checkpoint every this many updates (0 = final only)
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Emit a machine-readable JSON report on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Unadapted checkpoint (the EWC anchor)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Fine-tuning corpus (task B)
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Fisher file from the fisher subcommand
    #[arg(long)]
    fisher: Option<PathBuf>,
    /// EWC strength
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated lambda values; runs one fine-tuning per value
    #[arg(long)]
    lambda_sweep: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    c_ctx: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    delay: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct FisherArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Task-A corpus the Fisher information is estimated on
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Number of micro-batches to average squared gradients over
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    c_ctx: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AverageArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoints to average
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RerankArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// n-best file: `sentence_id ||| hypothesis ||| score`
    #[arg(long)]
    nbest: Option<PathBuf>,
    /// Document grouping file: `doc_id sentence_id` per line
    #[arg(long)]
    docs: Option<PathBuf>,
    /// Document LM checkpoint
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// LM interpolation weight
    #[arg(long)]
    lambda: Option<f64>,
    /// Translation-score admissibility threshold
    #[arg(long)]
    tau: Option<f64>,
    /// Reranked one-best output
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tab-separated replacement trace
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    trg: Option<PathBuf>,
    #[arg(long)]
    src_lang: Option<String>,
    #[arg(long)]
    trg_lang: Option<String>,
    /// Optional external sentence-pair scores, one per line
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    score_threshold: Option<f64>,
    /// Accepted pairs go to <prefix>.src and <prefix>.trg
    #[arg(long)]
    out_prefix: Option<PathBuf>,
    /// JSON report of per-rule counts
    #[arg(long)]
    report: Option<PathBuf>,
}

enum AppError {
    Usage(String),
    Runtime(doclm::Error),
}

impl From<doclm::Error> for AppError {
    fn from(e: doclm::Error) -> Self {
        AppError::Runtime(e)
    }
}

type AppResult<T> = Result<T, AppError>;

/// Layered configuration: defaults, then the config file, then flags.
/// Records every resolved value so the run can be logged in full.
struct Resolver {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    fn load(path: Option<&Path>) -> AppResult<Self> {
        let mut file = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| {
                AppError::Usage(format!("--config {}: {e}", p.display()))
            })?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    AppError::Usage(format!(
                        "config file line {}: expected `key = value`, found {line:?}",
                        i + 1
                    ))
                })?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Resolver {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn parse_file_value<T: FromStr>(&self, key: &str, raw: &str) -> AppResult<T> {
        raw.parse().map_err(|_| {
            AppError::Usage(format!("config file: bad value {raw:?} for key {key}"))
        })
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> AppResult<T> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key).cloned() {
                Some(raw) => self.parse_file_value(key, &raw)?,
                None => default,
            },
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> AppResult<T> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key).cloned() {
                Some(raw) => self.parse_file_value(key, &raw)?,
                None => {
                    return Err(AppError::Usage(format!(
                        "missing required option --{key} (or config key {key})"
                    )))
                }
            },
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn require_path(&mut self, key: &str, flag: Option<PathBuf>) -> AppResult<PathBuf> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => PathBuf::from(raw),
                None => {
                    return Err(AppError::Usage(format!(
                        "missing required option --{key} (or config key {key})"
                    )))
                }
            },
        };
        self.resolved.insert(key.to_string(), value.display().to_string());
        Ok(value)
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>, default: &str) -> PathBuf {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => PathBuf::from(raw),
                None => PathBuf::from(default),
            },
        };
        self.resolved.insert(key.to_string(), value.display().to_string());
        value
    }

    fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        let value = flag.or_else(|| self.file.get(key).map(PathBuf::from));
        if let Some(p) = &value {
            self.resolved.insert(key.to_string(), p.display().to_string());
        }
        value
    }

    /// Log the fully resolved configuration before executing.
    fn log(&self, subcommand: &str) {
        eprintln!("# doclm {subcommand}: resolved configuration");
        for (k, v) in &self.resolved {
            eprintln!("# {k} = {v}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::EvalPpl(args) => cmd_eval_ppl(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Fisher(args) => cmd_fisher(args),
        Command::Average(args) => cmd_average(args),
        Command::Rerank(args) => cmd_rerank(args),
        Command::Filter(args) => cmd_filter(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn corpus_windows(
    config: &ModelConfig,
    docs: &[doclm::corpus::Document],
    c_ctx: usize,
) -> doclm::Result<Vec<doclm::corpus::TrainingWindow>> {
    let mut windows = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        windows.extend(windows_for_mode(config, d, i, c_ctx)?);
    }
    Ok(windows)
}

fn write_outcome(out_dir: &Path, outcome: &TrainOutcome) -> doclm::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let (last, intermediate) = outcome
        .checkpoints
        .split_last()
        .expect("training always emits a final checkpoint");
    for ckpt in intermediate {
        save_checkpoint(&out_dir.join(format!("ckpt-{:06}.ckpt", ckpt.updates)), ckpt)?;
    }
    save_checkpoint(&out_dir.join("model.ckpt"), last)?;
    let mut csv = String::from("update,iteration,mean_nll\n");
    for r in &outcome.loss_log {
        csv.push_str(&format!("{},{},{}\n", r.update, r.iteration, r.mean_nll));
    }
    doclm::write_atomic(&out_dir.join("loss.csv"), csv.as_bytes())?;
    Ok(())
}

fn optimizer_from(
    r: &mut Resolver,
    steps: Option<usize>,
    batch_size: Option<usize>,
    delay: Option<usize>,
    warmup: Option<usize>,
    step_size: Option<f64>,
    checkpoint_every: Option<usize>,
    default_checkpoint_every: usize,
) -> AppResult<OptimizerConfig> {
    let defaults = OptimizerConfig::default();
    Ok(OptimizerConfig {
        step_size: r.get("step_size", step_size, defaults.step_size)?,
        delay: r.get("delay", delay, defaults.delay)?,
        warmup: r.get("warmup", warmup, defaults.warmup)?,
        iterations: r.require("steps", steps)?,
        batch_size: r.get("batch_size", batch_size, defaults.batch_size)?,
        checkpoint_every: r.get("checkpoint_every", checkpoint_every, default_checkpoint_every)?,
        ..defaults
    })
}

fn cmd_train(args: TrainArgs) -> AppResult<()> {
    let mut r = Resolver::load(args.common.config.as_deref())?;
    let seed = r.get("seed", args.common.seed, 0)?;
    let mode: Mode = r
        .require("mode", args.mode)?
        .parse()
        .map_err(|e: doclm::Error| AppError::Usage(e.to_string()))?;
    let corpus_path = r.require_path("corpus", args.corpus)?;
    let out_dir = r.path("out", args.out, "run");
    let min_count = r.get("min_count", args.min_count, 1)?;
    let c_ctx = r.get("c_ctx", args.c_ctx, DEFAULT_C_CTX)?;
    let opt = optimizer_from(
        &mut r,
        args.steps,
        args.batch_size,
        args.delay,
        args.warmup,
        args.step_size,
        args.checkpoint_every,
        OptimizerConfig::default().checkpoint_every,
    )?;

    let raw = load_raw_documents(&corpus_path)?;
    let vocab = build_vocab(&raw, min_count)?;
    let config = ModelConfig {
        mode,
        d_model: r.get("d_model", args.d_model, 64)?,
        n_heads: r.get("n_heads", args.n_heads, 4)?,
        n_layers: r.get("n_layers", args.n_layers, 2)?,
        d_ff: r.get("d_ff", args.d_ff, 256)?,
        vocab_size: vocab.len(),
        l_max: r.get("l_max", args.l_max, 256)?,
        dropout: r.get("dropout", args.dropout, 0.1)?,
    };
    r.log("train");

    let docs: Vec<_> = raw.iter().map(|d| vocab.encode_document(d)).collect();
    let windows = corpus_windows(&config, &docs, c_ctx)?;
    let params = init_params(&config, seed)?;
    let outcome = train(params, &config, &windows, &opt, seed)?;

    std::fs::create_dir_all(&out_dir).map_err(doclm::Error::from)?;
    vocab.save(&out_dir.join("vocab.txt"))?;
    write_outcome(&out_dir, &outcome)?;
    let last = outcome.loss_log.last();
    println!(
        "trained {} updates, final mean NLL {}",
        outcome.loss_log.len(),
        last.map(|r| r.mean_nll.to_string()).unwrap_or_else(|| "n/a".into())
    );
    println!("wrote {}", out_dir.join("model.ckpt").display());
    Ok(())
}

fn load_model(ckpt: &Path) -> AppResult<Checkpoint> {
    Ok(load_checkpoint(ckpt)?)
}

fn load_vocab_checked(path: &Path, config: &ModelConfig) -> AppResult<Vocabulary> {
    let vocab = Vocabulary::load(path)?;
    if vocab.len() != config.vocab_size {
        return Err(AppError::Runtime(doclm::Error::validation(format!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            config.vocab_size
        ))));
    }
    Ok(vocab)
}

fn cmd_eval_ppl(args: EvalArgs) -> AppResult<()> {
    let mut r = Resolver::load(args.common.config.as_deref())?;
    let _seed = r.get("seed", args.common.seed, 0)?;
    let ckpt_path = r.require_path("ckpt", args.ckpt)?;
    let corpus_path = r.require_path("corpus", args.corpus)?;
    let vocab_path = r.require_path("vocab", args.vocab)?;
    r.log("eval-ppl");

    let ckpt = load_model(&ckpt_path)?;
    let vocab = load_vocab_checked(&vocab_path, &ckpt.config)?;
    let docs = load_documents(&corpus_path, &vocab)?;
    let corpus_ppl = perplexity(&ckpt.params, &ckpt.config, &docs)?;

    let mut per_doc = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        let lps = log_prob(&ckpt.params, &ckpt.config, doc)?;
        let tokens = lps.len();
        let ppl = (-lps.iter().sum::<f64>() / tokens as f64).exp();
        per_doc.push((i, ppl, tokens));
    }

    if args.json {
        let docs_json: Vec<serde_json::Value> = per_doc
            .iter()
            .map(|(i, ppl, tokens)| {
                serde_json::json!({ "id": i, "ppl": ppl, "tokens": tokens })
            })
            .collect();
        let report = serde_json::json!({ "corpus_ppl": corpus_ppl, "documents": docs_json });
        println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    } else {
        println!("corpus_ppl = {corpus_ppl}");
        for (i, ppl, tokens) in &per_doc {
            println!("doc {i} ppl = {ppl} ({tokens} tokens)");
        }
    }
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> AppResult<()> {
    let mut r = Resolver::load(args.common.config.as_deref())?;
    let seed = r.get("seed", args.common.seed, 0)?;
    let ckpt_path = r.require_path("ckpt", args.ckpt)?;
    let corpus_path = r.require_path("corpus", args.corpus)?;
    let vocab_path = r.require_path("vocab", args.vocab)?;
    let fisher_path = r.require_path("fisher", args.fisher)?;
    let lambda = r.get("lambda", args.lambda, 0.01)?;
    let sweep = args
        .lambda_sweep
        .or_else(|| r.file.get("lambda_sweep").cloned());
    let out_dir = r.path("out", args.out, "finetune");
    let c_ctx = r.get("c_ctx", args.c_ctx, DEFAULT_C_CTX)?;
    let opt = optimizer_from(
        &mut r,
        args.steps,
        args.batch_size,
        args.delay,
        args.warmup,
        args.step_size,
        args.checkpoint_every,
        500,
    )?;
    r.log("finetune");

    let ckpt = load_model(&ckpt_path)?;
    let vocab = load_vocab_checked(&vocab_path, &ckpt.config)?;
    let docs = load_documents(&corpus_path, &vocab)?;
    let windows = corpus_windows(&ckpt.config, &docs, c_ctx)?;
    let (fisher_config, fisher) = load_fisher(&fisher_path)?;
    if fisher_config != ckpt.config {
        return Err(AppError::Runtime(doclm::Error::validation(
            "fisher file was estimated under a different model config",
        )));
    }

    let lambdas: Vec<f64> = match sweep {
        None => vec![lambda],
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    AppError::Usage(format!("--lambda-sweep: bad value {:?}", s.trim()))
                })
            })
            .collect::<AppResult<Vec<f64>>>()?,
    };

    for &strength in &lambdas {
        let ewc = EWCState::new(ckpt.params.clone(), fisher.clone(), strength)?;
        let outcome = finetune_ewc(&ckpt, &windows, &ewc, &opt, seed)?;
        let dir = if lambdas.len() == 1 {
            out_dir.clone()
        } else {
            out_dir.join(format!("lambda-{strength}"))
        };
        std::fs::create_dir_all(&dir).map_err(doclm::Error::from)?;
        write_outcome(&dir, &outcome)?;
        let final_nll = outcome
            .loss_log
            .last()
            .map(|l| l.mean_nll.to_string())
            .unwrap_or_else(|| "n/a".into());
        println!("lambda {strength}: final mean NLL {final_nll}, wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_fisher(args: FisherArgs) -> AppResult<()> {
    let mut r = Resolver::load(args.common.config.as_deref())?;
    let seed = r.get("seed", args.common.seed, 0)?;
    let ckpt_path = r.require_path("ckpt", args.ckpt)?;
    let corpus_path = r.require_path("corpus", args.corpus)?;
    let vocab_path = r.require_path("vocab", args.vocab)?;
    let samples = r.get("samples", args.samples, 16)?;
    let batch_size = r.get("batch_size", args.batch_size, 8)?;
    let c_ctx = r.get("c_ctx", args.c_ctx, DEFAULT_C_CTX)?;
    let out = r.path("out", args.out, "fisher.bin");
    r.log("fisher");

    let ckpt = load_model(&ckpt_path)?;
    let vocab = load_vocab_checked(&vocab_path, &ckpt.config)?;
    let docs = load_documents(&corpus_path, &vocab)?;
    let windows = corpus_windows(&ckpt.config, &docs, c_ctx)?;
    let fisher = estimate_fisher(&ckpt.params, &ckpt.config, &windows, samples, batch_size, seed)?;
    save_fisher(&out, &ckpt.config, &fisher)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_average(args: AverageArgs) -> AppResult<()> {
    let mut r = Resolver::load(args.common.config.as_deref())?;
    let _seed = r.get("seed", args.common.seed, 0)?;
    let out = r.path("out", args.out, "averaged.ckpt");
    r.resolved.insert(
        "checkpoints".to_string(),
        args.checkpoints
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    r.log("average");

    let mut ckpts = Vec::new();
    for p in &args.checkpoints {
        ckpts.push(load_checkpoint(p)?);
    }
    let params = average_checkpoints(&ckpts)?;
    let averaged = Checkpoint {
        config: ckpts[0].config.clone(),
        params,
        optimizer: None,
        iteration: ckpts.iter().map(|c| c.iteration).max().unwrap_or(0),
        updates: ckpts.iter().map(|c| c.updates).max().unwrap_or(0),
    };
    save_checkpoint(&out, &averaged)?;
    println!("averaged {} checkpoints into {}", ckpts.len(), out.display());
    Ok(())
}

fn cmd_rerank(args: RerankArgs) -> AppResult<()> {
    let mut r = Resolver::load(args.common.config.as_deref())?;
    let _seed = r.get("seed", args.common.seed, 0)?;
    let nbest_path = r.require_path("nbest", args.nbest)?;
    let docs_path = r.require_path("docs", args.docs)?;
    let lm_path = r.require_path("lm", args.lm)?;
    let vocab_path = r.require_path("vocab", args.vocab)?;
    let lambda = r.get("lambda", args.lambda, 1.0)?;
    let tau = r.require("tau", args.tau)?;
    let out = r.path("out", args.out, "reranked.txt");
    let trace_path = r.path("trace", args.trace, "rerank-trace.tsv");
    r.log("rerank");

    let ckpt = load_model(&lm_path)?;
    let vocab = load_vocab_checked(&vocab_path, &ckpt.config)?;
    let all = parse_nbest(&nbest_path)?;
    let groups = parse_doc_groups(&docs_path, all.sentences.len())?;
    let scorer = LmScorer {
        params: &ckpt.params,
        config: &ckpt.config,
        vocab: &vocab,
    };
    let config = RerankConfig {
        lambda_lm: lambda,
        tau,
    };

    let mut selected: Vec<Option<&str>> = vec![None; all.sentences.len()];
    let mut trace_out = String::from("doc_id\tsentence_id\told_rank\tnew_rank\tdelta\n");
    for (doc_id, sentence_ids) in &groups {
        let doc = NBestDocument {
            sentences: sentence_ids
                .iter()
                .map(|&s| all.sentences[s].clone())
                .collect(),
        };
        let outcome = greedy_rerank(&doc, &scorer, &config)?;
        for (local, &global) in sentence_ids.iter().enumerate() {
            selected[global] = Some(all.sentences[global].hyps[outcome.selection[local]].text.as_str());
        }
        for e in &outcome.trace {
            trace_out.push_str(&format!(
                "{doc_id}\t{}\t{}\t{}\t{}\n",
                sentence_ids[e.sentence], e.old_rank, e.new_rank, e.delta
            ));
        }
    }

    let mut out_text = String::new();
    for s in &selected {
        out_text.push_str(s.expect("grouping covers every sentence"));
        out_text.push('\n');
    }
    doclm::write_atomic(&out, out_text.as_bytes())?;
    doclm::write_atomic(&trace_path, trace_out.as_bytes())?;
    println!("wrote {} and {}", out.display(), trace_path.display());
    Ok(())
}

fn cmd_filter(args: FilterArgs) -> AppResult<()> {
    let mut r = Resolver::load(args.common.config.as_deref())?;
    let _seed = r.get("seed", args.common.seed, 0)?;
    let src = r.require_path("src", args.src)?;
    let trg = r.require_path("trg", args.trg)?;
    let src_lang = r.require("src_lang", args.src_lang)?;
    let trg_lang = r.require("trg_lang", args.trg_lang)?;
    let scores = r.optional_path("scores", args.scores);
    let score_threshold = match args.score_threshold {
        Some(v) => Some(v),
        None => match r.file.get("score_threshold") {
            Some(raw) => Some(r.parse_file_value("score_threshold", &raw.clone())?),
            None => None,
        },
    };
    if let Some(t) = score_threshold {
        r.resolved.insert("score_threshold".into(), t.to_string());
    }
    let out_prefix = r.require_path("out_prefix", args.out_prefix)?;
    let report_path = r.path(
        "report",
        args.report,
        &format!("{}.json", out_prefix.display()),
    );
    r.log("filter");

    if scores.is_none() && score_threshold.is_some() {
        return Err(AppError::Usage(
            "--score-threshold requires --scores".to_string(),
        ));
    }
    let mut config = FilterConfig::new(src_lang, trg_lang);
    config.score_threshold = score_threshold;
    let detector = TrigramDetector::builtin();
    let report = filter_corpus(
        &src,
        &trg,
        scores.as_deref(),
        &config,
        &detector,
        &out_prefix,
        &report_path,
    )?;
    println!(
        "kept {} of {} pairs; report at {}",
        report.pairs_out,
        report.pairs_in,
        report_path.display()
    );
    Ok(())
}
