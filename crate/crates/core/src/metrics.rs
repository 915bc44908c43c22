//! Metrics table: one row per (trial, cycle) with fixed six-decimal
//! formatting so identical experiments produce byte-identical files.

use std::path::Path;

use crate::alloop::{CycleMetrics, TrialResult};
use crate::error::{CoreError, Result};

/// Render the metrics table as CSV text, header first, trial-major order.
/// Columns: trial,cycle,labelled,accuracy,seconds,acc_class_0..acc_class_{C-1}.
pub fn metrics_to_csv(trials: &[TrialResult]) -> Result<String> {
    let classes = trials
        .iter()
        .flat_map(|t| t.metrics.iter())
        .map(|m| m.per_class_accuracy.len())
        .next()
        .ok_or_else(|| CoreError::InvalidConfig("no metrics rows to write".into()))?;
    let mut out = String::from("trial,cycle,labelled,accuracy,seconds");
    for c in 0..classes {
        out.push_str(&format!(",acc_class_{c}"));
    }
    out.push('\n');
    for trial in trials {
        for m in &trial.metrics {
            if m.per_class_accuracy.len() != classes {
                return Err(CoreError::InvalidConfig(format!(
                    "inconsistent class count in metrics: {} vs {}",
                    m.per_class_accuracy.len(),
                    classes
                )));
            }
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}",
                m.trial, m.cycle, m.labelled, m.accuracy, m.seconds
            ));
            for a in &m.per_class_accuracy {
                out.push_str(&format!(",{a:.6}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_metrics_csv(path: &Path, trials: &[TrialResult]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(trials)?)?;
    Ok(())
}

/// Parse a metrics CSV produced by [`metrics_to_csv`] back into rows.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<CycleMetrics>> {
    let bad = |line: usize, why: &str| {
        CoreError::InvalidConfig(format!("metrics csv line {}: {}", line + 1, why))
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 6 || cols[..5] != ["trial", "cycle", "labelled", "accuracy", "seconds"] {
        return Err(bad(0, "unexpected header"));
    }
    for (c, name) in cols[5..].iter().enumerate() {
        if *name != format!("acc_class_{c}") {
            return Err(bad(0, "unexpected per-class header"));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(bad(i, "wrong field count"));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|_| bad(i, "bad float"));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|_| bad(i, "bad integer"));
        rows.push(CycleMetrics {
            trial: parse_u(fields[0])?,
            cycle: parse_u(fields[1])?,
            labelled: parse_u(fields[2])?,
            accuracy: parse_f(fields[3])?,
            seconds: parse_f(fields[4])?,
            per_class_accuracy: fields[5..]
                .iter()
                .map(|s| parse_f(s))
                .collect::<Result<Vec<_>>>()?,
            final_classification_loss: 0.0,
            final_contrastive_loss: 0.0,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(trial: usize, cycle: usize, labelled: usize, acc: f64) -> CycleMetrics {
        CycleMetrics {
            trial,
            cycle,
            labelled,
            accuracy: acc,
            per_class_accuracy: vec![acc, acc / 2.0, 1.0, 0.0],
            final_classification_loss: 0.1,
            final_contrastive_loss: 0.2,
            seconds: 0.0,
        }
    }

    fn sample() -> Vec<TrialResult> {
        vec![
            TrialResult {
                metrics: vec![row(0, 0, 200, 0.8), row(0, 1, 300, 0.85)],
                label_reads_denied: 0,
            },
            TrialResult {
                metrics: vec![row(1, 0, 200, 0.75), row(1, 1, 300, 0.9)],
                label_reads_denied: 0,
            },
        ]
    }

    #[test]
    fn header_and_fixed_decimals() {
        let csv = metrics_to_csv(&sample()).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "trial,cycle,labelled,accuracy,seconds,acc_class_0,acc_class_1,acc_class_2,acc_class_3"
        );
        assert_eq!(
            lines.next().unwrap(),
            "0,0,200,0.800000,0.000000,0.800000,0.400000,1.000000,0.000000"
        );
    }

    #[test]
    fn trial_major_order() {
        let csv = metrics_to_csv(&sample()).unwrap();
        let firsts: Vec<&str> = csv
            .lines()
            .skip(1)
            .map(|l| l.split_once(',').unwrap().0)
            .collect();
        assert_eq!(firsts, ["0", "0", "1", "1"]);
    }

    #[test]
    fn round_trip_parse() {
        let csv = metrics_to_csv(&sample()).unwrap();
        let rows = parse_metrics_csv(&csv).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].trial, 1);
        assert_eq!(rows[3].cycle, 1);
        assert_eq!(rows[3].labelled, 300);
        assert!((rows[3].accuracy - 0.9).abs() < 1e-9);
        assert_eq!(rows[0].per_class_accuracy.len(), 4);
        // A re-rendered file is byte-identical apart from the loss columns
        // that the CSV deliberately omits.
        let again = metrics_to_csv(&[TrialResult {
            metrics: rows,
            label_reads_denied: 0,
        }])
        .unwrap();
        assert_eq!(again, csv);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(metrics_to_csv(&[]).is_err());
        assert!(parse_metrics_csv("bogus,header\n").is_err());
    }
}
