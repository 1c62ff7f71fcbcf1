//! Result tables: divergence rows by scenario columns, `mean ± std` cells.

use crate::divergence::DivergenceSpec;
use crate::experiment::{RunRecord, Scenario, Summary};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no run records")]
    Empty,
    #[error("cell ({row}, {column}) mixes configurations {first} and {second}")]
    InconsistentGrouping { row: String, column: String, first: String, second: String },
    #[error("duplicate seed {seed} in cell ({row}, {column})")]
    DuplicateSeed { row: String, column: String, seed: u64 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed table: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, ReportError>;

fn spec_rank(spec: &DivergenceSpec) -> (usize, f64) {
    let param = match *spec {
        DivergenceSpec::Power { p } => p,
        DivergenceSpec::Renyi { alpha } => alpha,
        _ => 0.0,
    };
    (spec.order(), param)
}

fn scenario_rank(s: Scenario) -> u8 {
    match s {
        Scenario::Sl => 0,
        Scenario::DpSsl => 1,
        Scenario::DemSsl => 2,
        Scenario::Fsl => 3,
    }
}

/// Accuracy table in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `cells[row][column]`.
    pub cells: Vec<Vec<Option<Summary>>>,
}

/// Groups records by (divergence, column); all records in a cell must share
/// one config hash and have distinct seeds.
pub fn emit_table(records: &[RunRecord]) -> Result<Table> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut rows: Vec<(usize, f64, String)> = Vec::new();
    let mut columns: Vec<(u8, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), (String, Vec<(u64, f64)>)> = BTreeMap::new();
    for r in records {
        let row = r.divergence.to_string();
        let (rank, param) = spec_rank(&r.divergence);
        if !rows.iter().any(|(_, _, name)| *name == row) {
            rows.push((rank, param, row.clone()));
        }
        let column_rank = scenario_rank(r.scenario);
        match columns.iter_mut().find(|(_, name)| *name == r.column) {
            Some(entry) => entry.0 = entry.0.min(column_rank),
            None => columns.push((column_rank, r.column.clone())),
        }
        let entry = groups.entry((row.clone(), r.column.clone())).or_insert_with(|| (r.config_hash.clone(), Vec::new()));
        if entry.0 != r.config_hash {
            return Err(ReportError::InconsistentGrouping {
                row,
                column: r.column.clone(),
                first: entry.0.clone(),
                second: r.config_hash.clone(),
            });
        }
        if entry.1.iter().any(|(s, _)| *s == r.seed) {
            return Err(ReportError::DuplicateSeed { row, column: r.column.clone(), seed: r.seed });
        }
        entry.1.push((r.seed, 100.0 * r.final_test_accuracy));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    columns.sort();
    let rows: Vec<String> = rows.into_iter().map(|(_, _, n)| n).collect();
    let columns: Vec<String> = columns.into_iter().map(|(_, n)| n).collect();
    let cells = rows
        .iter()
        .map(|row| {
            columns
                .iter()
                .map(|col| {
                    groups.get(&(row.clone(), col.clone())).map(|(_, values)| {
                        let mut values = values.clone();
                        values.sort_by_key(|(seed, _)| *seed);
                        Summary::of(&values.iter().map(|(_, v)| *v).collect::<Vec<_>>())
                    })
                })
                .collect()
        })
        .collect();
    Ok(Table { rows, columns, cells })
}

impl Table {
    /// Aligned plain text with `mean ± std` cells and `-` for empty cells.
    pub fn to_text(&self) -> String {
        let header: Vec<String> = std::iter::once("divergence".to_string()).chain(self.columns.iter().cloned()).collect();
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .zip(&self.cells)
            .map(|(row, cells)| {
                std::iter::once(row.clone())
                    .chain(cells.iter().map(|c| c.map_or_else(|| "-".to_string(), |s| s.to_string())))
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|j| std::iter::once(&header).chain(&body).map(|line| line[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in std::iter::once(&header).chain(&body) {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// One CSV line per cell: `divergence,column,mean,std,count`; floats
    /// round-trip exactly.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["divergence", "column", "mean", "std", "count"])?;
        for (row, cells) in self.rows.iter().zip(&self.cells) {
            for (col, cell) in self.columns.iter().zip(cells) {
                if let Some(s) = cell {
                    w.write_record([row.clone(), col.clone(), s.mean.to_string(), s.std.to_string(), s.count.to_string()])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| ReportError::Malformed(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Cells of a CSV produced by [`Table::to_csv`], keyed by (divergence, column).
    pub fn parse_csv(text: &str) -> Result<BTreeMap<(String, String), Summary>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut out = BTreeMap::new();
        for record in r.records() {
            let record = record?;
            if record.len() != 5 {
                return Err(ReportError::Malformed(format!("expected 5 fields, got {}", record.len())));
            }
            let num = |i: usize| record[i].parse::<f64>().map_err(|e| ReportError::Malformed(e.to_string()));
            let count = record[4].parse::<usize>().map_err(|e| ReportError::Malformed(e.to_string()))?;
            out.insert((record[0].to_string(), record[1].to_string()), Summary { mean: num(2)?, std: num(3)?, count });
        }
        Ok(out)
    }

    pub fn get(&self, row: &str, column: &str) -> Option<Summary> {
        let i = self.rows.iter().position(|r| r == row)?;
        let j = self.columns.iter().position(|c| c == column)?;
        self.cells[i][j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(spec: DivergenceSpec, scenario: Scenario, seed: u64, acc: f64, hash: &str) -> RunRecord {
        RunRecord {
            config_hash: hash.into(),
            name: "r".into(),
            scenario,
            column: scenario.to_string(),
            divergence: spec,
            seed,
            iterations: Vec::new(),
            final_test_accuracy: acc,
            final_train_accuracy: acc,
        }
    }

    #[test]
    fn groups_orders_and_round_trips() {
        let records = vec![
            record(DivergenceSpec::JensenShannon, Scenario::DpSsl, 1, 0.6, "b"),
            record(DivergenceSpec::Kl, Scenario::DpSsl, 2, 0.62, "a"),
            record(DivergenceSpec::Kl, Scenario::DpSsl, 1, 0.60, "a"),
            record(DivergenceSpec::Kl, Scenario::Sl, 1, 0.5, "c"),
            record(DivergenceSpec::Kl, Scenario::DpSsl, 3, 0.64, "a"),
        ];
        let t = emit_table(&records).unwrap();
        assert_eq!(t.rows, ["KL", "JS"]);
        assert_eq!(t.columns, ["SL", "DP-SSL"]);
        let kl = t.get("KL", "DP-SSL").unwrap();
        assert!((kl.mean - 62.0).abs() < 1e-9 && (kl.std - 2.0).abs() < 1e-9);
        assert!(t.get("JS", "SL").is_none());
        assert!(t.to_text().contains("62.00 ± 2.00"));
        let parsed = Table::parse_csv(&t.to_csv().unwrap()).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[&("KL".to_string(), "DP-SSL".to_string())], kl);
    }

    #[test]
    fn rejects_mixed_configurations_and_duplicate_seeds() {
        let mixed = [record(DivergenceSpec::Kl, Scenario::Sl, 1, 0.5, "a"), record(DivergenceSpec::Kl, Scenario::Sl, 2, 0.5, "b")];
        assert!(matches!(emit_table(&mixed), Err(ReportError::InconsistentGrouping { .. })));
        let dup = [record(DivergenceSpec::Kl, Scenario::Sl, 1, 0.5, "a"), record(DivergenceSpec::Kl, Scenario::Sl, 1, 0.5, "a")];
        assert!(matches!(emit_table(&dup), Err(ReportError::DuplicateSeed { .. })));
        assert!(matches!(emit_table(&[]), Err(ReportError::Empty)));
    }
}
