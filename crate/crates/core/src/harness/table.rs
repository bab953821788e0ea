use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{CellRecord, CellStatus, Protocol};

/// Mean and spread of one cell over its trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    /// Accuracy per trial, in trial order, for the trials that succeeded.
    pub values: Vec<f64>,
    pub invalid: usize,
}

impl CellStat {
    fn from_values(values: Vec<f64>, invalid: usize, trials: usize) -> Self {
        let valid = invalid == 0 && values.len() == trials && trials > 0;
        Self {
            mean: valid.then(|| mean(&values)),
            std: valid.then(|| population_std(&values)),
            values,
            invalid,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.mean.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub cells: Vec<CellStat>,
    /// Statistics of the per-trial average over columns.
    pub macro_avg: CellStat,
}

/// Accuracy per (method, column) over trials, plus a macro average.
/// Columns are held-out domains under leave-one-out and source domains
/// under single-source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub protocol: Protocol,
    pub trials: usize,
    pub columns: Vec<String>,
    pub rows: Vec<MethodRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

impl ResultTable {
    /// Aggregate log records. Records for other methods, columns or trials
    /// are ignored; the first record of a repeated cell wins.
    pub fn from_records(
        records: &[CellRecord],
        methods: &[String],
        columns: &[String],
        trials: usize,
        protocol: Protocol,
    ) -> Self {
        let rows = methods
            .iter()
            .map(|m| {
                // grid[column][trial]
                let mut grid: Vec<Vec<Option<&CellRecord>>> =
                    vec![vec![None; trials]; columns.len()];
                for r in records
                    .iter()
                    .filter(|r| &r.method == m && r.trial < trials)
                {
                    if let Some(ci) = columns.iter().position(|c| c == &r.domain) {
                        grid[ci][r.trial].get_or_insert(r);
                    }
                }
                let ok = |r: &CellRecord| r.status == CellStatus::Ok && r.accuracy.is_some();
                let cells: Vec<CellStat> = grid
                    .iter()
                    .map(|col| {
                        let values: Vec<f64> = col
                            .iter()
                            .flatten()
                            .filter(|r| ok(r))
                            .filter_map(|r| r.accuracy)
                            .collect();
                        let invalid = col.iter().flatten().filter(|r| !ok(r)).count();
                        CellStat::from_values(values, invalid, trials)
                    })
                    .collect();
                let mut per_trial = Vec::new();
                let mut invalid = 0;
                for t in 0..trials {
                    let accs: Option<Vec<f64>> = grid
                        .iter()
                        .map(|col| col[t].filter(|r| ok(r)).and_then(|r| r.accuracy))
                        .collect();
                    match accs {
                        Some(a) if !a.is_empty() => per_trial.push(mean(&a)),
                        _ => invalid += usize::from(grid.iter().any(|col| col[t].is_some())),
                    }
                }
                MethodRow {
                    method: m.clone(),
                    macro_avg: CellStat::from_values(per_trial, invalid, trials),
                    cells,
                }
            })
            .collect();
        Self {
            protocol,
            trials,
            columns: columns.to_vec(),
            rows,
        }
    }

    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn all_valid(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.macro_avg.is_valid() && r.cells.iter().all(CellStat::is_valid))
    }

    /// Fixed-width text, accuracies in percent as `mean ± std`.
    pub fn render(&self) -> String {
        let protocol = match self.protocol {
            Protocol::LeaveOneOut => "leave-one-out (columns: held-out domain)",
            Protocol::SingleSource => "single-source (columns: source domain)",
        };
        let mut out = String::new();
        let _ = writeln!(out, "{protocol}, {} trial(s), accuracy %", self.trials);
        let name_w = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let cell = |c: &CellStat| match (c.mean, c.std) {
            (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
            _ => "invalid".to_string(),
        };
        let _ = write!(out, "{:<name_w$}", "method");
        for c in &self.columns {
            let _ = write!(out, "  {c:>15}");
        }
        let _ = writeln!(out, "  {:>15}", "avg");
        for r in &self.rows {
            let _ = write!(out, "{:<name_w$}", r.method);
            for c in &r.cells {
                let _ = write!(out, "  {:>15}", cell(c));
            }
            let _ = writeln!(out, "  {:>15}", cell(&r.macro_avg));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }
}
