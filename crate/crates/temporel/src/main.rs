//! Command-line front end. Every subcommand is a thin shell over the
//! library: `eval` drives a full run, the rest operate on artifacts a run
//! leaves behind (result logs, prediction files, frame directories).
//!
//! Exit codes: 0 success, 1 terminal runtime errors, 2 configuration and
//! input mistakes the user must fix.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use temporel::corpus::{corpus_stats, load_corpus, MAX_HORIZON};
use temporel::distill::{emit_training_file, generate_pseudo_labels, DistillError};
use temporel::gateway::{HttpModel, ModelEndpoint};
use temporel::harness::{self, load_run_config, HarnessError, ProtocolChoice};
use temporel::judge::{judge_score, s_at_t, JudgeError, JudgeScore};
use temporel::metrics::text::{
    mean_over_horizons, text_similarity, CiderContext, SimilarityScores,
};
use temporel::report::{emit_from_log, read_result_log, EmitFormat, LogRecord, ReportError};
use temporel::visual_prep::{plan_window_budgets_from_paths, ChangeMapConfig};

#[derive(Parser)]
#[command(name = "temporel", version, about = "Consistency and temporal-reasoning measurements for vision-language models on driving VQA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an evaluation protocol over a corpus and append a result log.
    Eval(EvalArgs),
    /// Score prediction texts against reference texts.
    Score(ScoreArgs),
    /// Re-score logged future descriptions with a judge model.
    Judge(JudgeArgs),
    /// Plan per-frame visual token budgets for a chronological window.
    Budget(BudgetArgs),
    /// Generate horizon-weighted pseudo-label training data.
    Distill(DistillArgs),
    /// Aggregate a result log into report tables.
    Report(ReportArgs),
    /// Check a config file and its corpus without querying any model.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Continue an interrupted run in the same output directory.
    #[arg(long)]
    resume: bool,
    /// Override the protocol in the config: regular, multitrial,
    /// distribution, self-align, or cot.
    #[arg(long)]
    protocol: Option<ProtocolChoice>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Predictions, JSONL of {"id", "horizon", "text"}.
    #[arg(long)]
    pred_file: PathBuf,
    /// References in the same schema, matched to predictions by id.
    #[arg(long)]
    ref_file: PathBuf,
    /// Directory receiving scores.jsonl and horizon_means.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct JudgeArgs {
    /// Result log holding self-align records to judge.
    #[arg(long)]
    pred_log: PathBuf,
    /// Judge API root, e.g. http://localhost:8000/v1.
    #[arg(long)]
    judge_endpoint: String,
    /// Judge model name sent with every request.
    #[arg(long)]
    judge_model: String,
    /// Environment variable holding the judge API key.
    #[arg(long)]
    api_key_env: Option<String>,
    /// Directory receiving judge_scores.jsonl and s_at_t.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct BudgetArgs {
    /// Window frames, oldest first; the last is the anchor.
    #[arg(long, num_args = 1.., required = true)]
    frames: Vec<PathBuf>,
    /// Visual token budget of the newest frame.
    #[arg(long, default_value_t = 64)]
    n0: u32,
    /// Write the plan here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    /// TOML run config supplying the teacher model and default corpus.
    #[arg(long)]
    config: PathBuf,
    /// Corpus of clips to label; defaults to the corpus in the config.
    #[arg(long)]
    clips: Option<PathBuf>,
    /// Horizons to label: a range like 1..12 or a list like 1,4,12.
    #[arg(long, default_value = "1..12")]
    horizons: String,
    /// Also record descriptions at the intermediate reasoning targets.
    #[arg(long)]
    with_cot: bool,
    /// Teacher model name; defaults to the first model in the config.
    #[arg(long)]
    model: Option<String>,
    /// Output training JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Result log to aggregate.
    #[arg(long)]
    log: PathBuf,
    /// Corpus for the category breakdown; omitting it skips that table.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Directory receiving the tables and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated output formats: csv, json.
    #[arg(long, default_value = "csv,json")]
    format: String,
}

#[derive(Args)]
struct ValidateArgs {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn dispatch(command: Command) -> Result<i32, HarnessError> {
    match command {
        Command::Eval(args) => eval(args),
        Command::Score(args) => score(args).map(|()| 0),
        Command::Judge(args) => judge(args).map(|()| 0),
        Command::Budget(args) => budget(args).map(|()| 0),
        Command::Distill(args) => distill(args).map(|()| 0),
        Command::Report(args) => report(args).map(|()| 0),
        Command::Validate(args) => validate(args).map(|()| 0),
    }
}

fn csv_error(e: csv::Error) -> HarnessError {
    HarnessError::Report(ReportError::from(e))
}

fn config_error(message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        message: message.into(),
    }
}

fn eval(args: EvalArgs) -> Result<i32, HarnessError> {
    let mut config = load_run_config(&args.config)?;
    if let Some(protocol) = args.protocol {
        config.protocol = protocol;
    }
    let summary = harness::run(&config, args.resume)?;
    println!("result log: {}", summary.result_log.display());
    println!(
        "work units: {} total, {} completed, {} failed",
        summary.items_total, summary.items_completed, summary.items_failed
    );
    println!(
        "queries: {} issued, {} replayed from the journal",
        summary.queries_issued, summary.queries_replayed
    );
    if summary.items_failed > 0 {
        eprintln!(
            "{} work units failed; rerun with --resume to retry only those",
            summary.items_failed
        );
    }
    Ok(summary.exit_code())
}

/// One line of a score input file.
#[derive(Debug, Deserialize)]
struct TextLine {
    id: String,
    horizon: u8,
    text: String,
}

#[derive(Serialize)]
struct ScoredPair<'a> {
    id: &'a str,
    horizon: u8,
    #[serde(flatten)]
    scores: SimilarityScores,
}

fn read_text_lines(path: &PathBuf) -> Result<Vec<TextLine>, HarnessError> {
    let reader = BufReader::new(File::open(path).map_err(|e| {
        config_error(format!("cannot read {}: {e}", path.display()))
    })?);
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TextLine = serde_json::from_str(&line).map_err(|e| {
            config_error(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        lines.push(parsed);
    }
    if lines.is_empty() {
        return Err(config_error(format!("{} has no records", path.display())));
    }
    Ok(lines)
}

fn score(args: ScoreArgs) -> Result<(), HarnessError> {
    let preds = read_text_lines(&args.pred_file)?;
    let refs = read_text_lines(&args.ref_file)?;
    let mut by_id = BTreeMap::new();
    for r in &refs {
        if by_id.insert(r.id.as_str(), r).is_some() {
            return Err(config_error(format!(
                "duplicate reference id {:?} in {}",
                r.id,
                args.ref_file.display()
            )));
        }
    }
    let ctx = CiderContext::from_refs(
        &refs.iter().map(|r| r.text.as_str()).collect::<Vec<_>>(),
    );

    std::fs::create_dir_all(&args.out)?;
    let scores_path = args.out.join("scores.jsonl");
    let mut scores_file = BufWriter::new(File::create(&scores_path)?);
    let mut per_horizon: BTreeMap<u8, Vec<SimilarityScores>> = BTreeMap::new();
    for pred in &preds {
        let reference = by_id.get(pred.id.as_str()).ok_or_else(|| {
            config_error(format!("prediction {:?} has no reference", pred.id))
        })?;
        let scores = text_similarity(&pred.text, &reference.text, &ctx);
        serde_json::to_writer(
            &mut scores_file,
            &ScoredPair {
                id: &pred.id,
                horizon: pred.horizon,
                scores,
            },
        )?;
        scores_file.write_all(b"\n")?;
        per_horizon.entry(pred.horizon).or_default().push(scores);
    }
    scores_file.flush()?;

    let means: Vec<(u8, usize, SimilarityScores)> = per_horizon
        .iter()
        .map(|(&h, v)| {
            let pairs: Vec<(u8, SimilarityScores)> = v.iter().map(|&s| (h, s)).collect();
            let mean = mean_over_horizons(&pairs).expect("group is nonempty");
            (h, v.len(), mean)
        })
        .collect();
    let means_path = args.out.join("horizon_means.csv");
    let mut w = csv::Writer::from_path(&means_path).map_err(csv_error)?;
    w.write_record(["horizon", "n_pairs", "bleu3", "bleu4", "rouge_l", "meteor", "cider"]).map_err(csv_error)?;
    let fmt = |v: f64| format!("{v:.4}");
    for (h, n, m) in &means {
        w.write_record([
            h.to_string(),
            n.to_string(),
            fmt(m.bleu3),
            fmt(m.bleu4),
            fmt(m.rouge_l),
            fmt(m.meteor),
            fmt(m.cider),
        ]).map_err(csv_error)?;
    }
    let horizon_means: Vec<(u8, SimilarityScores)> =
        means.iter().map(|&(h, _, m)| (h, m)).collect();
    if let Some(macro_mean) = mean_over_horizons(&horizon_means) {
        w.write_record([
            "all".to_string(),
            preds.len().to_string(),
            fmt(macro_mean.bleu3),
            fmt(macro_mean.bleu4),
            fmt(macro_mean.rouge_l),
            fmt(macro_mean.meteor),
            fmt(macro_mean.cider),
        ]).map_err(csv_error)?;
    }
    w.flush()?;

    println!("scored {} pairs", preds.len());
    println!("wrote {}", scores_path.display());
    println!("wrote {}", means_path.display());
    Ok(())
}

fn judge(args: JudgeArgs) -> Result<(), HarnessError> {
    let endpoint: ModelEndpoint = serde_json::from_value(serde_json::json!({
        "base_url": args.judge_endpoint,
        "model_name": args.judge_model,
        "api_key_env": args.api_key_env,
    }))?;
    let model = HttpModel::new(endpoint)?;

    let records = read_result_log(&args.pred_log)?;
    let predictions: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Selfalign(a) => Some(a),
            _ => None,
        })
        .collect();
    if predictions.is_empty() {
        return Err(config_error(format!(
            "no self-align records in {}",
            args.pred_log.display()
        )));
    }

    std::fs::create_dir_all(&args.out)?;
    let scores_path = args.out.join("judge_scores.jsonl");
    let mut scores_file = BufWriter::new(File::create(&scores_path)?);
    let mut scores: Vec<JudgeScore> = Vec::new();
    for a in predictions {
        let item_id = format!("{}:{}:+{}", a.clip_id, a.anchor_t, a.delta_t);
        let judged = judge_score(&model, &a.pred, &a.ref_frame, &item_id, a.delta_t)
            .map_err(|e| match e {
                JudgeError::Gateway(g) => HarnessError::Gateway(g),
                JudgeError::EmptyDescription => {
                    config_error(format!("record {item_id} has an empty prediction"))
                }
            })?;
        serde_json::to_writer(&mut scores_file, &judged)?;
        scores_file.write_all(b"\n")?;
        scores.push(judged);
    }
    scores_file.flush()?;

    let aggregates = s_at_t(&scores);
    let agg_path = args.out.join("s_at_t.csv");
    let mut w = csv::Writer::from_path(&agg_path).map_err(csv_error)?;
    w.write_record(["delta_t", "n_scored", "n_missing", "mean_score"]).map_err(csv_error)?;
    for row in &aggregates {
        w.write_record([
            row.delta_t.to_string(),
            row.n_scored.to_string(),
            row.n_missing.to_string(),
            row.mean.map(|m| format!("{m:.4}")).unwrap_or_default(),
        ]).map_err(csv_error)?;
    }
    w.flush()?;

    let unscored = scores.iter().filter(|s| s.score.is_none()).count();
    println!("judged {} descriptions ({} unscorable)", scores.len(), unscored);
    println!("wrote {}", scores_path.display());
    println!("wrote {}", agg_path.display());
    Ok(())
}

fn budget(args: BudgetArgs) -> Result<(), HarnessError> {
    let cfg = ChangeMapConfig::default();
    let plan = plan_window_budgets_from_paths(&args.frames, args.n0, &cfg)
        .map_err(|e| config_error(e.to_string()))?;
    let json = serde_json::to_string_pretty(&plan)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, json + "\n")?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn parse_horizons(s: &str) -> Result<Vec<u8>, HarnessError> {
    let parse_one = |tok: &str| {
        tok.trim()
            .parse::<u8>()
            .map_err(|_| config_error(format!("bad horizon {tok:?} in {s:?}")))
    };
    let mut out = BTreeSet::new();
    if let Some((lo, hi)) = s.split_once("..") {
        let lo = parse_one(lo)?;
        let hi = parse_one(hi.trim_start_matches('='))?;
        if lo > hi {
            return Err(config_error(format!("empty horizon range {s:?}")));
        }
        out.extend(lo..=hi);
    } else {
        for tok in s.split(',') {
            out.insert(parse_one(tok)?);
        }
    }
    if let Some(&h) = out.iter().find(|&&h| !(1..=MAX_HORIZON).contains(&h)) {
        return Err(config_error(format!(
            "horizon {h} outside 1..={MAX_HORIZON}"
        )));
    }
    Ok(out.into_iter().collect())
}

fn distill_error(e: DistillError) -> HarnessError {
    match e {
        DistillError::NoHorizons | DistillError::BadHorizon | DistillError::MissingFrame { .. } => {
            config_error(e.to_string())
        }
        other => HarnessError::Io(std::io::Error::other(other.to_string())),
    }
}

fn distill(args: DistillArgs) -> Result<(), HarnessError> {
    let config = load_run_config(&args.config)?;
    let corpus_path = args.clips.unwrap_or_else(|| config.corpus.clone());
    let corpus = load_corpus(&corpus_path)?;
    let horizons = parse_horizons(&args.horizons)?;

    let spec = match &args.model {
        Some(name) => config
            .models
            .iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| config_error(format!("no model named {name:?} in the config")))?,
        None => config.models.first().expect("validated config has models"),
    };
    let teacher = spec.build()?;

    let anchors: BTreeSet<(&str, i64)> = corpus
        .items
        .iter()
        .map(|it| (it.clip_id.as_str(), it.anchor_t))
        .collect();
    if anchors.is_empty() {
        return Err(config_error(format!(
            "{} has no items to anchor distillation",
            corpus_path.display()
        )));
    }

    let mut skipped = 0usize;
    let mut first_failure: Option<DistillError> = None;
    let records = anchors.iter().flat_map(|&(clip_id, anchor_t)| {
        if first_failure.is_some() {
            return Vec::new().into_iter();
        }
        let clip = corpus.clip(clip_id).expect("items reference known clips");
        match generate_pseudo_labels(teacher.as_ref(), clip, anchor_t, &horizons, args.with_cot) {
            Ok(outcome) => {
                skipped += outcome.skipped.len();
                outcome.records.into_iter()
            }
            Err(e) => {
                first_failure = Some(e);
                Vec::new().into_iter()
            }
        }
    });
    let written = emit_training_file(records, &args.out);
    if let Some(e) = first_failure {
        let _ = std::fs::remove_file(&args.out);
        return Err(distill_error(e));
    }
    let written = written.map_err(distill_error)?;

    println!(
        "wrote {written} training records to {} ({skipped} horizons skipped)",
        args.out.display()
    );
    Ok(())
}

fn parse_formats(s: &str) -> Result<Vec<EmitFormat>, HarnessError> {
    let mut formats = Vec::new();
    for tok in s.split(',') {
        match tok.trim() {
            "csv" => formats.push(EmitFormat::Csv),
            "json" => formats.push(EmitFormat::Json),
            other => {
                return Err(config_error(format!(
                    "unknown format {other:?} (expected csv or json)"
                )))
            }
        }
    }
    Ok(formats)
}

fn report(args: ReportArgs) -> Result<(), HarnessError> {
    let formats = parse_formats(&args.format)?;
    let items = match &args.corpus {
        Some(path) => load_corpus(path)?.items,
        None => Vec::new(),
    };
    std::fs::create_dir_all(&args.out)?;
    let manifest = emit_from_log(&args.log, &items, &args.out, &formats)?;
    for file in &manifest.files {
        println!("{}  {}", file.sha256, file.name);
    }
    for note in &manifest.omitted {
        println!("omitted {}: {}", note.table, note.reason);
    }
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<(), HarnessError> {
    let config = load_run_config(&args.config)?;
    let corpus = load_corpus(&config.corpus)?;
    let stats = corpus_stats(&corpus.items)?;
    println!("config ok: {}", args.config.display());
    println!(
        "corpus: {} clips, {} items ({} unique questions, vocab {}, ttr {:.3})",
        corpus.clips.len(),
        corpus.items.len(),
        stats.n_unique_questions,
        stats.vocab_size,
        stats.ttr
    );
    let hist = corpus.horizon_histogram();
    let present: Vec<String> = hist
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(h, &n)| format!("{h}:{n}"))
        .collect();
    println!("items per horizon: {}", present.join(" "));
    Ok(())
}
