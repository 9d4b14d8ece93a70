//! Report rendering: aligned human-readable tables plus line-oriented
//! key=value records. Neither form contains wall-clock values, so
//! repeated identical runs serialize byte-identically.

use super::ablation::AblationRow;
use super::pipeline::{PipelineOutcome, ProcedureRow};
use crate::training::Procedure;

fn pretrain_columns(proc: Procedure) -> (&'static str, &'static str) {
    match proc {
        Procedure::Baseline => ("--", "--"),
        Procedure::Me => ("multilingual", "--"),
        Procedure::MeMd => ("multilingual", "multilingual"),
        Procedure::MeRpld => ("multilingual", "resource-poor"),
    }
}

/// Table of the four training procedures with per-seed accuracies.
pub fn procedure_table(rows: &[ProcedureRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:<16} {:<16} {:>9}  per-seed\n",
        "procedure", "enc-pretrain", "dec-pretrain", "acc-mean%"
    ));
    for row in rows {
        let (enc, dec) = pretrain_columns(row.procedure);
        let per_seed: Vec<String> = row
            .per_seed
            .iter()
            .map(|(seed, acc)| format!("{seed}:{acc:.2}"))
            .collect();
        out.push_str(&format!(
            "{:<10} {:<16} {:<16} {:>9.2}  [{}]\n",
            row.procedure.as_str(),
            enc,
            dec,
            row.mean,
            per_seed.join(", ")
        ));
    }
    out
}

/// Machine-readable records for a pipeline run.
pub fn pipeline_records(outcome: &PipelineOutcome) -> String {
    let mut out = String::new();
    for row in &outcome.rows {
        out.push_str(&format!(
            "record=procedure proc={} mean_accuracy={:.4}\n",
            row.procedure.as_str(),
            row.mean
        ));
        for (seed, acc) in &row.per_seed {
            out.push_str(&format!(
                "record=procedure-seed proc={} seed={} accuracy={:.4}\n",
                row.procedure.as_str(),
                seed,
                acc
            ));
        }
    }
    for report in &outcome.reports {
        out.push_str(&report.canonical_lines());
    }
    out
}

/// Table of accuracy versus resource-rich data size.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<10}", "rr-size"));
    if let Some(first) = rows.first() {
        for result in &first.results {
            out.push_str(&format!(" {:>12}", result.variant.as_str()));
        }
    }
    out.push('\n');
    for row in rows {
        let label = if row.rr_size == 0 {
            "0 (=base)".to_string()
        } else {
            row.rr_size.to_string()
        };
        out.push_str(&format!("{label:<10}"));
        for result in &row.results {
            out.push_str(&format!(" {:>12.2}", result.mean));
        }
        out.push('\n');
    }
    out
}

/// Machine-readable records for an ablation sweep.
pub fn ablation_records(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for row in rows {
        for result in &row.results {
            out.push_str(&format!(
                "record=ablation rr_size={} variant={} mean_accuracy={:.4}\n",
                row.rr_size,
                result.variant.as_str(),
                result.mean
            ));
            for (seed, acc) in &result.per_seed {
                out.push_str(&format!(
                    "record=ablation-seed rr_size={} variant={} seed={} accuracy={:.4}\n",
                    row.rr_size,
                    result.variant.as_str(),
                    seed,
                    acc
                ));
            }
        }
    }
    out
}
