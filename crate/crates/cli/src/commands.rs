//! The offline subcommands. Each returns a summary and writes any
//! human-readable output to the given writer.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use whiteguard_core::calibration::{BundleFit, Confusion};
use whiteguard_core::storage::open_activations;
use whiteguard_core::{
    fit_bundle, layer_auc_report, load_bundle, read_activations, save_bundle, score_online,
    ActivationRecord, ComplianceVerdict, Decision, GuardBundle, Label, LabeledActivationSet,
};

use crate::config::{load_config, resolve_created_at, Overrides};
use crate::error::{CliError, CliResult};

pub const SCORE_HEADER: [&str; 7] = [
    "conversation_id",
    "category",
    "layer",
    "score",
    "threshold",
    "decision",
    "log_likelihood",
];
pub const AUC_HEADER: [&str; 3] = ["category", "layer", "auc"];
pub const SWEEP_HEADER: [&str; 7] = [
    "k",
    "precision",
    "recall",
    "f1",
    "mean_calibration_auc",
    "records",
    "error",
];

fn csv_writer(path: &Path) -> CliResult<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes to `path.tmp` and renames on success, so a failed run never
/// leaves a truncated file under the final name.
fn with_temp_csv<T>(
    path: &Path,
    body: impl FnOnce(&mut csv::Writer<BufWriter<File>>) -> CliResult<T>,
) -> CliResult<T> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut w = csv_writer(&tmp)?;
    let result = body(&mut w).and_then(|v| finish(w, &tmp).map(|_| v));
    match result {
        Ok(v) => {
            std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
            Ok(v)
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn read_set(path: &Path) -> CliResult<LabeledActivationSet> {
    read_activations(path).map_err(|e| CliError::from(e).with_path(path))
}

fn read_bundle(path: &Path) -> CliResult<GuardBundle> {
    load_bundle(path).map_err(|e| CliError::from(e).with_path(path))
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub activations: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub overrides: Overrides,
    pub created_at: Option<String>,
    pub auc_report: Option<PathBuf>,
}

pub fn fit(args: &FitArgs, stdout: &mut dyn Write) -> CliResult<BundleFit> {
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let created_at = resolve_created_at(args.created_at.as_deref())?;
    let set = read_set(&args.activations)?;
    let fit = fit_bundle(&set, &config, created_at)?;
    save_bundle(&fit.bundle, &args.out)?;

    if let Some(path) = &args.auc_report {
        with_temp_csv(path, |w| {
            w.write_record(AUC_HEADER).map_err(csv_err(path))?;
            for (category, row) in fit.layer_report() {
                let auc = row.auc.map(|a| a.to_string()).unwrap_or_default();
                w.write_record([category, row.layer.to_string(), auc])
                    .map_err(csv_err(path))?;
            }
            Ok(())
        })?;
    }

    let rows: Vec<[String; 5]> = fit
        .bundle
        .profiles
        .values()
        .map(|p| {
            [
                p.category.clone(),
                p.operational_layer.to_string(),
                format!("{:.4}", p.calibration_auc),
                format!("{:.4}", p.threshold),
                p.k().to_string(),
            ]
        })
        .collect();
    print_table(stdout, ["category", "layer", "auc", "threshold", "k"], &rows)
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(fit)
}

fn print_table<const N: usize>(
    out: &mut dyn Write,
    header: [&str; N],
    rows: &[[String; N]],
) -> std::io::Result<()> {
    let mut widths = header.map(str::len);
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    writeln!(out, "{}", line(header.to_vec()))?;
    for row in rows {
        writeln!(out, "{}", line(row.iter().map(String::as_str).collect()))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ScoreArgs {
    pub bundle: PathBuf,
    pub activations: PathBuf,
    pub out: PathBuf,
    /// Route every record by cosine similarity even when the bundle has a
    /// profile for the record's own category.
    pub route: bool,
}

/// A record that could not be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    pub conversation_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScoreSummary {
    pub records: usize,
    pub out_of_policy: usize,
    pub errors: Vec<RecordError>,
}

/// Scores one record, pinning its own category when the bundle has it.
pub fn score_record(
    bundle: &GuardBundle,
    record: &ActivationRecord,
    route: bool,
) -> whiteguard_core::Result<ComplianceVerdict> {
    let pin = (!route && bundle.profiles.contains_key(&record.category))
        .then_some(record.category.as_str());
    score_online(bundle, record, pin)
}

pub fn score(args: &ScoreArgs) -> CliResult<ScoreSummary> {
    let bundle = read_bundle(&args.bundle)?;
    let reader =
        open_activations(&args.activations).map_err(|e| CliError::from(e).with_path(&args.activations))?;
    let out = &args.out;
    with_temp_csv(out, |w| {
        w.write_record(SCORE_HEADER).map_err(csv_err(out))?;
        let mut summary = ScoreSummary::default();
        for record in reader {
            let record = record.map_err(|e| CliError::from(e).with_path(&args.activations))?;
            summary.records += 1;
            match score_record(&bundle, &record, args.route) {
                Ok(v) => {
                    if v.decision == Decision::OutOfPolicy {
                        summary.out_of_policy += 1;
                    }
                    w.write_record([
                        record.conversation_id.as_str(),
                        &v.category,
                        &v.layer.to_string(),
                        &v.score.to_string(),
                        &v.threshold.to_string(),
                        v.decision.as_str(),
                        &v.log_likelihood.to_string(),
                    ])
                    .map_err(csv_err(out))?;
                }
                Err(e) => {
                    w.write_record([
                        record.conversation_id.as_str(),
                        &record.category,
                        "",
                        "",
                        "",
                        "error",
                        "",
                    ])
                    .map_err(csv_err(out))?;
                    summary.errors.push(RecordError {
                        conversation_id: record.conversation_id.clone(),
                        message: e.to_string(),
                    });
                }
            }
        }
        Ok(summary)
    })
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub bundle: PathBuf,
    pub activations: PathBuf,
    /// Per-layer AUC CSV, refitted on the evaluation records with the
    /// bundle's configuration.
    pub report: Option<PathBuf>,
    pub route: bool,
    pub sweep: Option<SweepArgs>,
}

/// Refit with each `k` on `fit_activations` and evaluate on the
/// evaluation file.
#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub ks: Vec<usize>,
    pub fit_activations: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub confusion: Confusion,
    pub unlabeled: usize,
    pub errors: Vec<RecordError>,
}

fn evaluate_bundle(bundle: &GuardBundle, set: &LabeledActivationSet, route: bool) -> Evaluation {
    let mut eval = Evaluation::default();
    let mut pairs = Vec::new();
    for record in &set.records {
        if record.label == Label::Unlabeled {
            eval.unlabeled += 1;
            continue;
        }
        match score_record(bundle, record, route) {
            Ok(v) => pairs.push((
                record.label == Label::OutOfPolicy,
                v.decision == Decision::OutOfPolicy,
            )),
            Err(e) => eval.errors.push(RecordError {
                conversation_id: record.conversation_id.clone(),
                message: e.to_string(),
            }),
        }
    }
    eval.confusion = Confusion::from_pairs(pairs);
    eval
}

pub fn evaluate(args: &EvaluateArgs, stdout: &mut dyn Write) -> CliResult<Evaluation> {
    let bundle = read_bundle(&args.bundle)?;
    let set = read_set(&args.activations)?;
    let eval = evaluate_bundle(&bundle, &set, args.route);
    let c = &eval.confusion;
    let io = |e| CliError::io(Path::new("<stdout>"), e);
    writeln!(
        stdout,
        "records {} (unlabeled {}, errors {})",
        set.records.len(),
        eval.unlabeled,
        eval.errors.len()
    )
    .map_err(io)?;
    writeln!(
        stdout,
        "tp {} fp {} tn {} fn {}",
        c.true_positive, c.false_positive, c.true_negative, c.false_negative
    )
    .map_err(io)?;
    writeln!(stdout, "precision {:.4}", c.precision()).map_err(io)?;
    writeln!(stdout, "recall {:.4}", c.recall()).map_err(io)?;
    writeln!(stdout, "f1 {:.4}", c.f1()).map_err(io)?;

    if let Some(path) = &args.report {
        with_temp_csv(path, |w| {
            w.write_record(AUC_HEADER).map_err(csv_err(path))?;
            for category in set.category_indices().into_keys() {
                let subset = set.category_subset(category);
                let rows = layer_auc_report(&subset, &bundle.config)
                    .map_err(|e| CliError::from(e).with_path(&args.activations))?;
                for row in rows {
                    let auc = row.auc.map(|a| a.to_string()).unwrap_or_default();
                    w.write_record([category, &row.layer.to_string(), &auc])
                        .map_err(csv_err(path))?;
                }
            }
            Ok(())
        })?;
    }

    if let Some(sweep) = &args.sweep {
        let fit_set = read_set(&sweep.fit_activations)?;
        let out = &sweep.out;
        with_temp_csv(out, |w| {
            w.write_record(SWEEP_HEADER).map_err(csv_err(out))?;
            for &k in &sweep.ks {
                let config = whiteguard_core::CalibrationConfig {
                    k,
                    ..bundle.config.clone()
                };
                let row = match fit_bundle(&fit_set, &config, bundle.created_at) {
                    Ok(fit) => {
                        let e = evaluate_bundle(&fit.bundle, &set, args.route);
                        let aucs: Vec<f64> = fit
                            .bundle
                            .profiles
                            .values()
                            .map(|p| p.calibration_auc)
                            .collect();
                        let mean_auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
                        let c = e.confusion;
                        [
                            k.to_string(),
                            c.precision().to_string(),
                            c.recall().to_string(),
                            c.f1().to_string(),
                            mean_auc.to_string(),
                            (c.true_positive + c.false_positive + c.true_negative + c.false_negative)
                                .to_string(),
                            String::new(),
                        ]
                    }
                    Err(e) => {
                        let mut row: [String; 7] = Default::default();
                        row[0] = k.to_string();
                        row[6] = e.to_string();
                        row
                    }
                };
                w.write_record(&row).map_err(csv_err(out))?;
            }
            Ok(())
        })?;
    }
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_alignment() {
        let mut out = Vec::new();
        let rows = [["alpha".to_string(), "1".to_string()], ["b".to_string(), "12".to_string()]];
        print_table(&mut out, ["category", "layer"], &rows).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "category  layer\nalpha     1\nb         12\n"
        );
    }
}
