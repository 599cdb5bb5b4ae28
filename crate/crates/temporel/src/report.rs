//! Aggregation of result logs into tables and plot-ready series: single
//! versus multi-trial accuracy, per-horizon accuracy with decay summaries,
//! per-category breakdowns, text-score and judge means, and preservation
//! ratios. Emission is deterministic so identical logs always produce
//! byte-identical files.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Category, VqaItem};
use crate::judge::JudgeScore;
use crate::metrics::{horizon_metrics, HorizonMetrics, HorizonSeries, MetricsError};
use crate::protocols::{
    AlignmentScore, CotTrace, DistributionEstimate, MultiTrialResult, TrialRecord,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("log has no {protocol} records")]
    MissingProtocol { protocol: String },
    #[error("regular accuracy is zero; preservation ratios are undefined")]
    ZeroDenominator,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("bad log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("nothing to report: {what}")]
    Empty { what: String },
}

/// One line of the append-only result log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Regular(TrialRecord),
    Multitrial(MultiTrialResult),
    Selfalign(AlignmentScore),
    Distribution {
        item_id: String,
        model: String,
        horizon: u8,
        estimate: DistributionEstimate,
    },
    Cot {
        trace: CotTrace,
        trial: TrialRecord,
    },
    Judge(JudgeScore),
    /// An item whose queries failed terminally; excluded from every
    /// denominator and retried on resume.
    Incomplete {
        item_id: String,
        model: String,
        protocol: String,
        error: String,
    },
}

impl LogRecord {
    /// Stable identity used to drop duplicate lines after an overlapping
    /// resume.
    pub fn dedup_key(&self) -> String {
        match self {
            LogRecord::Regular(t) => format!("regular|{}", t.key),
            LogRecord::Multitrial(m) => format!("multitrial|{}|{}", m.model, m.item_id),
            LogRecord::Selfalign(a) => format!("selfalign|{}|{}", a.key, a.measure.as_str()),
            LogRecord::Distribution { model, item_id, .. } => {
                format!("distribution|{model}|{item_id}")
            }
            LogRecord::Cot { trial, .. } => format!("cot|{}", trial.key),
            LogRecord::Judge(j) => format!("judge|{}", j.key),
            LogRecord::Incomplete {
                item_id,
                model,
                protocol,
                ..
            } => format!("incomplete|{model}|{protocol}|{item_id}"),
        }
    }
}

/// Reads a JSONL result log, dropping exact duplicates (first occurrence
/// wins) so overlapping resume runs aggregate cleanly.
pub fn read_result_log(path: &Path) -> Result<Vec<LogRecord>, ReportError> {
    let reader = BufReader::new(File::open(path)?);
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_str(&line).map_err(|e| ReportError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if seen.insert(record.dedup_key()) {
            records.push(record);
        }
    }
    Ok(records)
}

/// One consistency-table row; the derived columns are always recomputed
/// from the accuracies, never copied in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub model: String,
    pub n_items: usize,
    /// Fraction of items whose unshuffled trial answered correctly.
    pub single_acc: f64,
    /// Fraction of items that passed every shuffled trial.
    pub multi_acc: f64,
    /// single_acc - multi_acc.
    pub drop: f64,
    /// multi_acc / single_acc; undefined when single_acc is zero.
    pub ratio: Option<f64>,
}

/// Builds a row from already-known accuracy rates (both as fractions).
pub fn consistency_row_from_rates(model: &str, single_acc: f64, multi_acc: f64) -> ConsistencyRow {
    ConsistencyRow {
        model: model.to_string(),
        n_items: 0,
        single_acc,
        multi_acc,
        drop: single_acc - multi_acc,
        ratio: (single_acc != 0.0).then(|| multi_acc / single_acc),
    }
}

fn multitrial_records(records: &[LogRecord]) -> Vec<&MultiTrialResult> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Multitrial(m) => Some(m),
            _ => None,
        })
        .collect()
}

/// Single versus multi-trial accuracy per model, from multi-trial records:
/// the unshuffled trial 0 measures single-trial accuracy, the all-trials
/// pass flag measures multi-trial accuracy. Incomplete items never reach
/// the log as results, so both denominators count the same items.
pub fn consistency_table(records: &[LogRecord]) -> Result<Vec<ConsistencyRow>, ReportError> {
    let multis = multitrial_records(records);
    if multis.is_empty() {
        return Err(ReportError::MissingProtocol {
            protocol: "multitrial".to_string(),
        });
    }
    let mut per_model: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for m in multis {
        let trial0 = m
            .trials
            .iter()
            .find(|t| t.trial_index == 0)
            .expect("multi-trial results always record trial 0");
        let entry = per_model.entry(&m.model).or_insert((0, 0, 0));
        entry.0 += 1;
        entry.1 += usize::from(trial0.correct);
        entry.2 += usize::from(m.passed);
    }
    Ok(per_model
        .into_iter()
        .map(|(model, (n, singles, passes))| {
            let single_acc = singles as f64 / n as f64;
            let multi_acc = passes as f64 / n as f64;
            ConsistencyRow {
                n_items: n,
                ..consistency_row_from_rates(model, single_acc, multi_acc)
            }
        })
        .collect())
}

/// One measured horizon within a model's series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonPoint {
    pub horizon: u8,
    pub n_items: usize,
    pub pass_rate: f64,
}

/// A model's per-horizon multi-trial pass rates plus the decay summaries,
/// when computable (at least two measured horizons and a nonzero
/// baseline).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonRow {
    pub model: String,
    pub points: Vec<HorizonPoint>,
    pub metrics: Option<HorizonMetrics>,
}

/// Per-horizon pass-rate series from multi-trial records. Horizons nobody
/// measured are absent, never interpolated.
pub fn horizon_table(records: &[LogRecord]) -> Result<Vec<HorizonRow>, ReportError> {
    let multis = multitrial_records(records);
    if multis.is_empty() {
        return Err(ReportError::MissingProtocol {
            protocol: "multitrial".to_string(),
        });
    }
    let mut grouped: BTreeMap<&str, BTreeMap<u8, (usize, usize)>> = BTreeMap::new();
    for m in multis {
        let entry = grouped
            .entry(&m.model)
            .or_default()
            .entry(m.horizon)
            .or_insert((0, 0));
        entry.0 += 1;
        entry.1 += usize::from(m.passed);
    }
    Ok(grouped
        .into_iter()
        .map(|(model, horizons)| {
            let points: Vec<HorizonPoint> = horizons
                .into_iter()
                .map(|(horizon, (n, passes))| HorizonPoint {
                    horizon,
                    n_items: n,
                    pass_rate: passes as f64 / n as f64,
                })
                .collect();
            let series: Vec<(u32, f64)> = points
                .iter()
                .map(|p| (u32::from(p.horizon), p.pass_rate))
                .collect();
            let metrics = HorizonSeries::new(series)
                .and_then(|s| horizon_metrics(&s))
                .ok();
            HorizonRow {
                model: model.to_string(),
                points,
                metrics,
            }
        })
        .collect())
}

/// Accuracy within one (model, protocol, category, horizon) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub model: String,
    pub protocol: String,
    pub category: Category,
    pub horizon: u8,
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

/// Per-category, per-horizon accuracy. An item tagged with several
/// categories contributes to each of them, so category numerators can sum
/// to more than the overall numerator.
pub fn category_breakdown(records: &[LogRecord], items: &[VqaItem]) -> Vec<CategoryRow> {
    let categories_of: BTreeMap<&str, &BTreeSet<Category>> = items
        .iter()
        .map(|i| (i.item_id.as_str(), &i.categories))
        .collect();
    let mut cells: BTreeMap<(String, &'static str, Category, u8), (usize, usize)> =
        BTreeMap::new();
    let mut tally = |model: &str, protocol: &'static str, item_id: &str, horizon: u8,
                     correct: bool| {
        let Some(cats) = categories_of.get(item_id) else {
            return;
        };
        for &cat in cats.iter() {
            let cell = cells
                .entry((model.to_string(), protocol, cat, horizon))
                .or_insert((0, 0));
            cell.0 += 1;
            cell.1 += usize::from(correct);
        }
    };
    for record in records {
        match record {
            LogRecord::Regular(t) => tally(&t.model, "regular", &t.item_id, t.horizon, t.correct),
            LogRecord::Multitrial(m) => {
                tally(&m.model, "multitrial", &m.item_id, m.horizon, m.passed)
            }
            LogRecord::Cot { trial, .. } => {
                tally(&trial.model, "cot", &trial.item_id, trial.horizon, trial.correct)
            }
            _ => {}
        }
    }
    cells
        .into_iter()
        .map(|((model, protocol, category, horizon), (n, correct))| CategoryRow {
            model,
            protocol: protocol.to_string(),
            category,
            horizon,
            n_items: n,
            n_correct: correct,
            accuracy: correct as f64 / n as f64,
        })
        .collect()
}

/// How much of a model's same-frame accuracy survives at long horizons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservationRatios {
    /// Pass rate at the 12 s horizon over regular accuracy; None when that
    /// horizon was not measured.
    pub acc12_over_regular: Option<f64>,
    /// Mean pass rate over all measured horizons, over regular accuracy.
    pub macc_over_regular: f64,
}

/// Ratios of horizon accuracy to same-frame accuracy.
pub fn preservation_ratios(
    regular_acc: f64,
    series: &HorizonSeries,
) -> Result<PreservationRatios, ReportError> {
    if regular_acc <= 0.0 {
        return Err(ReportError::ZeroDenominator);
    }
    let points = series.points();
    let macc = points.iter().map(|&(_, v)| v).sum::<f64>() / points.len() as f64;
    Ok(PreservationRatios {
        acc12_over_regular: series.value_at(12).map(|v| v / regular_acc),
        macc_over_regular: macc / regular_acc,
    })
}

/// A model's preservation ratios alongside their inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservationRow {
    pub model: String,
    pub regular_acc: f64,
    pub n_regular: usize,
    pub acc12_over_regular: Option<f64>,
    pub macc_over_regular: f64,
}

fn preservation_table(records: &[LogRecord], horizon: &[HorizonRow]) -> Vec<PreservationRow> {
    let mut regular: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for record in records {
        if let LogRecord::Regular(t) = record {
            let entry = regular.entry(&t.model).or_insert((0, 0));
            entry.0 += 1;
            entry.1 += usize::from(t.correct);
        }
    }
    let mut rows = Vec::new();
    for (model, (n, correct)) in regular {
        let regular_acc = correct as f64 / n as f64;
        let Some(row) = horizon.iter().find(|h| h.model == model) else {
            continue;
        };
        let series = HorizonSeries::new(
            row.points
                .iter()
                .map(|p| (u32::from(p.horizon), p.pass_rate))
                .collect(),
        );
        let Ok(series) = series else { continue };
        let Ok(ratios) = preservation_ratios(regular_acc, &series) else {
            continue;
        };
        rows.push(PreservationRow {
            model: model.to_string(),
            regular_acc,
            n_regular: n,
            acc12_over_regular: ratios.acc12_over_regular,
            macc_over_regular: ratios.macc_over_regular,
        });
    }
    rows
}

/// Mean text-similarity score for one (model, measure, horizon) cell of
/// the self-alignment protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextScoreRow {
    pub model: String,
    pub measure: String,
    pub horizon: u8,
    pub n_scored: usize,
    pub n_missing: usize,
    pub mean_q: Option<f64>,
}

fn text_score_table(records: &[LogRecord]) -> Vec<TextScoreRow> {
    let mut cells: BTreeMap<(String, &'static str, u8), (f64, usize, usize)> = BTreeMap::new();
    for record in records {
        if let LogRecord::Selfalign(a) = record {
            let cell = cells
                .entry((a.model.clone(), a.measure.as_str(), a.delta_t))
                .or_insert((0.0, 0, 0));
            match a.q {
                Some(q) => {
                    cell.0 += q;
                    cell.1 += 1;
                }
                None => cell.2 += 1,
            }
        }
    }
    cells
        .into_iter()
        .map(|((model, measure, horizon), (sum, n, missing))| TextScoreRow {
            model,
            measure: measure.to_string(),
            horizon,
            n_scored: n,
            n_missing: missing,
            mean_q: (n > 0).then(|| sum / n as f64),
        })
        .collect()
}

/// Mean judge score per (judge model, horizon), present scores only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRow {
    pub judge_model: String,
    pub horizon: u8,
    pub n_scored: usize,
    pub n_missing: usize,
    pub mean: Option<f64>,
}

fn judge_table(records: &[LogRecord]) -> Vec<JudgeRow> {
    let mut cells: BTreeMap<(String, u8), (u64, usize, usize)> = BTreeMap::new();
    for record in records {
        if let LogRecord::Judge(j) = record {
            let cell = cells
                .entry((j.judge_model.clone(), j.delta_t))
                .or_insert((0, 0, 0));
            match j.score {
                Some(v) => {
                    cell.0 += u64::from(v);
                    cell.1 += 1;
                }
                None => cell.2 += 1,
            }
        }
    }
    cells
        .into_iter()
        .map(|((judge_model, horizon), (sum, n, missing))| JudgeRow {
            judge_model,
            horizon,
            n_scored: n,
            n_missing: missing,
            mean: (n > 0).then(|| sum as f64 / n as f64),
        })
        .collect()
}

/// Every table derivable from one result log.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub consistency: Vec<ConsistencyRow>,
    pub horizon: Vec<HorizonRow>,
    pub categories: Vec<CategoryRow>,
    pub text_scores: Vec<TextScoreRow>,
    pub judge: Vec<JudgeRow>,
    pub preservation: Vec<PreservationRow>,
}

/// Builds every section the log supports; sections whose protocol is
/// absent come back empty and are noted at emission.
pub fn build_report(records: &[LogRecord], items: &[VqaItem]) -> Report {
    let consistency = consistency_table(records).unwrap_or_default();
    let horizon = horizon_table(records).unwrap_or_default();
    let preservation = preservation_table(records, &horizon);
    Report {
        consistency,
        categories: category_breakdown(records, items),
        text_scores: text_score_table(records),
        judge: judge_table(records),
        preservation,
        horizon,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Json,
}

/// Inventory of one emission: file hashes plus which tables were omitted
/// and why.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestFile>,
    pub omitted: Vec<ManifestNote>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestNote {
    pub table: String,
    pub reason: String,
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_default()
}

fn ratio2(v: f64) -> String {
    format!("{v:.2}")
}

fn write_artifact(
    dir: &Path,
    name: &str,
    bytes: &[u8],
    manifest: &mut Manifest,
) -> Result<(), ReportError> {
    let mut file = File::create(dir.join(name))?;
    file.write_all(bytes)?;
    manifest.files.push(ManifestFile {
        name: name.to_string(),
        sha256: hex::encode(Sha256::digest(bytes)),
    });
    Ok(())
}

fn csv_bytes<F>(build: F) -> Result<Vec<u8>, ReportError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut writer = csv::Writer::from_writer(Vec::new());
    build(&mut writer)?;
    Ok(writer.into_inner().expect("vec sink cannot fail"))
}

/// Writes one file per populated table into `dir`, plus `manifest.json`
/// listing every artifact's hash and every omitted table. Table CSVs
/// render percentages to one decimal; JSON keeps raw fractions.
pub fn emit(report: &Report, dir: &Path, formats: &[EmitFormat]) -> Result<Manifest, ReportError> {
    if report.consistency.is_empty()
        && report.horizon.is_empty()
        && report.categories.is_empty()
        && report.text_scores.is_empty()
        && report.judge.is_empty()
        && report.preservation.is_empty()
    {
        return Err(ReportError::Empty {
            what: "every section is empty".to_string(),
        });
    }
    std::fs::create_dir_all(dir)?;
    let csv_on = formats.contains(&EmitFormat::Csv);
    let json_on = formats.contains(&EmitFormat::Json);
    let mut manifest = Manifest {
        files: Vec::new(),
        omitted: Vec::new(),
    };
    let omit = |manifest: &mut Manifest, table: &str| {
        manifest.omitted.push(ManifestNote {
            table: table.to_string(),
            reason: "no records for this protocol in the log".to_string(),
        });
    };

    if report.consistency.is_empty() {
        omit(&mut manifest, "consistency");
    } else {
        if json_on {
            let bytes = serde_json::to_vec_pretty(&report.consistency)?;
            write_artifact(dir, "consistency.json", &bytes, &mut manifest)?;
        }
        if csv_on {
            let bytes = csv_bytes(|w| {
                w.write_record([
                    "model",
                    "n_items",
                    "single_acc_pct",
                    "multi_acc_pct",
                    "drop_pp",
                    "ratio_pct",
                ])?;
                for r in &report.consistency {
                    w.write_record([
                        r.model.clone(),
                        r.n_items.to_string(),
                        pct(r.single_acc),
                        pct(r.multi_acc),
                        pct(r.drop),
                        opt_pct(r.ratio),
                    ])?;
                }
                Ok(())
            })?;
            write_artifact(dir, "consistency.csv", &bytes, &mut manifest)?;
        }
    }

    if report.horizon.is_empty() {
        omit(&mut manifest, "horizon");
    } else {
        if json_on {
            let bytes = serde_json::to_vec_pretty(&report.horizon)?;
            write_artifact(dir, "horizon.json", &bytes, &mut manifest)?;
        }
        if csv_on {
            let bytes = csv_bytes(|w| {
                w.write_record([
                    "model",
                    "acc_1s_pct",
                    "acc_4s_pct",
                    "acc_12s_pct",
                    "delta_acc_pp",
                    "mean_acc_pct",
                    "ndr",
                    "mrar",
                ])?;
                for r in &report.horizon {
                    let at = |h: u8| {
                        r.points
                            .iter()
                            .find(|p| p.horizon == h)
                            .map(|p| p.pass_rate)
                    };
                    w.write_record([
                        r.model.clone(),
                        opt_pct(at(1)),
                        opt_pct(at(4)),
                        opt_pct(at(12)),
                        r.metrics.as_ref().map(|m| pct(m.delta_acc)).unwrap_or_default(),
                        r.metrics.as_ref().map(|m| pct(m.mean_acc)).unwrap_or_default(),
                        r.metrics.as_ref().map(|m| ratio2(m.ndr)).unwrap_or_default(),
                        r.metrics.as_ref().map(|m| ratio2(m.mrar)).unwrap_or_default(),
                    ])?;
                }
                Ok(())
            })?;
            write_artifact(dir, "horizon.csv", &bytes, &mut manifest)?;

            let bytes = csv_bytes(|w| {
                w.write_record(["model", "t", "value"])?;
                for r in &report.horizon {
                    for p in &r.points {
                        w.write_record([
                            r.model.clone(),
                            p.horizon.to_string(),
                            p.pass_rate.to_string(),
                        ])?;
                    }
                }
                Ok(())
            })?;
            write_artifact(dir, "horizon_series.csv", &bytes, &mut manifest)?;
        }
    }

    if report.categories.is_empty() {
        omit(&mut manifest, "categories");
    } else {
        if json_on {
            let bytes = serde_json::to_vec_pretty(&report.categories)?;
            write_artifact(dir, "categories.json", &bytes, &mut manifest)?;
        }
        if csv_on {
            let bytes = csv_bytes(|w| {
                w.write_record([
                    "model",
                    "protocol",
                    "category",
                    "horizon",
                    "n_items",
                    "n_correct",
                    "accuracy_pct",
                ])?;
                for r in &report.categories {
                    w.write_record([
                        r.model.clone(),
                        r.protocol.clone(),
                        r.category.to_string(),
                        r.horizon.to_string(),
                        r.n_items.to_string(),
                        r.n_correct.to_string(),
                        pct(r.accuracy),
                    ])?;
                }
                Ok(())
            })?;
            write_artifact(dir, "categories.csv", &bytes, &mut manifest)?;
        }
    }

    if report.text_scores.is_empty() {
        omit(&mut manifest, "text_scores");
    } else {
        if json_on {
            let bytes = serde_json::to_vec_pretty(&report.text_scores)?;
            write_artifact(dir, "text_scores.json", &bytes, &mut manifest)?;
        }
        if csv_on {
            let bytes = csv_bytes(|w| {
                w.write_record([
                    "model",
                    "measure",
                    "horizon",
                    "n_scored",
                    "n_missing",
                    "mean_q",
                ])?;
                for r in &report.text_scores {
                    w.write_record([
                        r.model.clone(),
                        r.measure.clone(),
                        r.horizon.to_string(),
                        r.n_scored.to_string(),
                        r.n_missing.to_string(),
                        r.mean_q.map(|v| format!("{v:.4}")).unwrap_or_default(),
                    ])?;
                }
                Ok(())
            })?;
            write_artifact(dir, "text_scores.csv", &bytes, &mut manifest)?;
        }
    }

    if report.judge.is_empty() {
        omit(&mut manifest, "judge");
    } else {
        if json_on {
            let bytes = serde_json::to_vec_pretty(&report.judge)?;
            write_artifact(dir, "judge.json", &bytes, &mut manifest)?;
        }
        if csv_on {
            let bytes = csv_bytes(|w| {
                w.write_record(["judge_model", "horizon", "n_scored", "n_missing", "mean"])?;
                for r in &report.judge {
                    w.write_record([
                        r.judge_model.clone(),
                        r.horizon.to_string(),
                        r.n_scored.to_string(),
                        r.n_missing.to_string(),
                        r.mean.map(|v| format!("{v:.2}")).unwrap_or_default(),
                    ])?;
                }
                Ok(())
            })?;
            write_artifact(dir, "judge.csv", &bytes, &mut manifest)?;
        }
    }

    if report.preservation.is_empty() {
        omit(&mut manifest, "preservation");
    } else {
        if json_on {
            let bytes = serde_json::to_vec_pretty(&report.preservation)?;
            write_artifact(dir, "preservation.json", &bytes, &mut manifest)?;
        }
        if csv_on {
            let bytes = csv_bytes(|w| {
                w.write_record([
                    "model",
                    "regular_acc_pct",
                    "n_regular",
                    "acc12_over_regular",
                    "macc_over_regular",
                ])?;
                for r in &report.preservation {
                    w.write_record([
                        r.model.clone(),
                        pct(r.regular_acc),
                        r.n_regular.to_string(),
                        r.acc12_over_regular.map(|v| format!("{v:.3}")).unwrap_or_default(),
                        format!("{:.3}", r.macc_over_regular),
                    ])?;
                }
                Ok(())
            })?;
            write_artifact(dir, "preservation.csv", &bytes, &mut manifest)?;
        }
    }

    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    let mut file = File::create(dir.join("manifest.json"))?;
    file.write_all(&manifest_bytes)?;
    Ok(manifest)
}

/// Convenience path for the CLI: log in, files out.
pub fn emit_from_log(
    log_path: &Path,
    items: &[VqaItem],
    dir: &Path,
    formats: &[EmitFormat],
) -> Result<Manifest, ReportError> {
    let records = read_result_log(log_path)?;
    let report = build_report(&records, items);
    emit(&report, dir, formats)
}
