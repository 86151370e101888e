//! Comparison tables: four classification and four segmentation columns,
//! with "-" where a mode does not address the task.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::train::RunReport;

pub const COLUMNS: [&str; 8] = ["Acc(%)", "Rec(%)", "Pre(%)", "AUC(1e-2)", "DSC(%)", "Jaccard(%)", "95HD", "PRO(%)"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    /// Task not addressed by the mode.
    Blank,
    /// Applicable but undefined (e.g. single-class AUC).
    Undefined,
    Value(f64),
}

impl Cell {
    pub fn is_populated(self) -> bool {
        !matches!(self, Cell::Blank)
    }

    fn render(self) -> String {
        match self {
            Cell::Blank => "-".into(),
            Cell::Undefined => "n/a".into(),
            Cell::Value(v) => format!("{v:.2}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub cells: [Cell; 8],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<TableRow>,
    /// Per-mode report paths relative to the ablation directory.
    pub reports: Vec<PathBuf>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("mode,{}\n", COLUMNS.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.cells.iter().map(|c| c.render()).collect();
            s += &format!("{},{}\n", r.label, cells.join(","));
        }
        s
    }
}

/// Row of fold-mean scores, blanked per the mode's task columns.
pub fn table_row(report: &RunReport) -> TableRow {
    let w = report.mode.wiring();
    let m = &report.mean;
    let cell = |show: bool, v: Option<f64>| match (show, v) {
        (false, _) => Cell::Blank,
        (true, Some(v)) => Cell::Value(v),
        (true, None) => Cell::Undefined,
    };
    TableRow {
        label: report.mode.name().to_string(),
        cells: [
            cell(w.show_cla, m.acc),
            cell(w.show_cla, m.rec),
            cell(w.show_cla, m.pre),
            cell(w.show_cla, m.auc.map(|a| 100.0 * a)),
            cell(w.show_seg, m.dsc),
            cell(w.show_seg, m.jaccard),
            cell(w.show_seg, m.hd95),
            cell(w.show_seg, m.pro),
        ],
    }
}

/// Aligned text table.
pub fn render_table(rows: &[TableRow]) -> String {
    let mut grid = vec![std::iter::once("Method".to_string())
        .chain(COLUMNS.iter().map(|c| c.to_string()))
        .collect::<Vec<_>>()];
    for r in rows {
        grid.push(std::iter::once(r.label.clone()).chain(r.cells.iter().map(|c| c.render())).collect());
    }
    let widths: Vec<usize> = (0..9).map(|j| grid.iter().map(|r| r[j].len()).max().unwrap_or(0)).collect();
    let line = |r: &Vec<String>| {
        let mut s = format!("{:<w$}", r[0], w = widths[0]);
        for j in 1..9 {
            s += &format!(" | {:>w$}", r[j], w = widths[j]);
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&grid[0]);
    out += &"-".repeat(widths.iter().sum::<usize>() + 3 * 8);
    out.push('\n');
    for r in &grid[1..] {
        out += &line(r);
    }
    out
}

/// Renders `ablation.json` if present, otherwise the single run's `report.json`.
pub fn render_run_dir(dir: &Path) -> Result<String> {
    let read = |p: PathBuf| std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e)).map(|t| (p, t));
    let ablation = dir.join("ablation.json");
    if ablation.exists() {
        let (p, t) = read(ablation)?;
        let table: AblationTable = serde_json::from_str(&t).map_err(|e| Error::json(&p, e))?;
        return Ok(render_table(&table.rows));
    }
    let (p, t) = read(dir.join("report.json"))?;
    let report: RunReport = serde_json::from_str(&t).map_err(|e| Error::json(&p, e))?;
    Ok(render_table(&[table_row(&report)]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_blanks_and_alignment() {
        let rows = vec![
            TableRow {
                label: "cla_only".into(),
                cells: [Cell::Value(90.0), Cell::Value(80.5), Cell::Undefined, Cell::Value(95.0), Cell::Blank, Cell::Blank, Cell::Blank, Cell::Blank],
            },
            TableRow {
                label: "full".into(),
                cells: [Cell::Value(1.0); 8],
            },
        ];
        let t = render_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("cla_only"));
        assert_eq!(lines[2].matches(" - ").count() + lines[2].ends_with(" -") as usize, 4);
        assert!(lines[2].contains("n/a") && lines[2].contains("80.50"));
        assert!(lines[0].contains("Acc"));
        let table = AblationTable { rows, reports: vec![] };
        assert_eq!(table.to_csv().lines().nth(1).unwrap(), "cla_only,90.00,80.50,n/a,95.00,-,-,-,-");
    }
}
