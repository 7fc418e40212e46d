//! Comparison tables over named metric runs, rendered as aligned text and
//! CSV with a `dataset,model,<metric...>` column structure.

use crate::error::{Error, Result};

/// One table cell: either a plain value or a slash-joined
/// precision/recall/F1 trio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Scalar(f64),
    Trio(f64, f64, f64),
}

impl Cell {
    fn render(&self) -> String {
        match *self {
            Cell::Scalar(v) => format!("{v:.2}"),
            Cell::Trio(p, r, f1) => format!("{p:.2}/{r:.2}/{f1:.2}"),
        }
    }

    /// Ranking key for the best-per-column flag; trios rank by F1.
    pub(crate) fn key(&self) -> f64 {
        match *self {
            Cell::Scalar(v) => v,
            Cell::Trio(_, _, f1) => f1,
        }
    }
}

/// One run on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub cells: Vec<Cell>,
}

/// A validated comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Per column, the row indices sharing the best value.
    pub best: Vec<Vec<usize>>,
}

pub fn build_report(columns: &[String], rows: Vec<ReportRow>) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::config("a report needs at least one run"));
    }
    if columns.is_empty() {
        return Err(Error::config("a report needs at least one metric column"));
    }
    for row in &rows {
        if row.cells.len() != columns.len() {
            return Err(Error::config(format!(
                "row {}/{} has {} cells for {} columns",
                row.dataset,
                row.model,
                row.cells.len(),
                columns.len()
            )));
        }
    }
    let mut best = Vec::with_capacity(columns.len());
    for j in 0..columns.len() {
        let top = rows
            .iter()
            .map(|r| r.cells[j].key())
            .max_by(|a, b| a.total_cmp(b))
            .unwrap();
        best.push(
            (0..rows.len())
                .filter(|&i| rows[i].cells[j].key().total_cmp(&top).is_eq())
                .collect(),
        );
    }
    Ok(Report { columns: columns.to_vec(), rows, best })
}

impl Report {
    /// Space-aligned table followed by one best-value line per column.
    pub fn to_text(&self) -> String {
        let rendered: Vec<Vec<String>> =
            self.rows.iter().map(|r| r.cells.iter().map(Cell::render).collect()).collect();
        let w_dataset = width("dataset", self.rows.iter().map(|r| r.dataset.as_str()));
        let w_model = width("model", self.rows.iter().map(|r| r.model.as_str()));
        let w_cols: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, name)| width(name, rendered.iter().map(|r| r[j].as_str())))
            .collect();

        let mut lines = Vec::new();
        let mut header = vec![
            format!("{:<w_dataset$}", "dataset"),
            format!("{:<w_model$}", "model"),
        ];
        header.extend(
            self.columns.iter().zip(&w_cols).map(|(name, w)| format!("{name:>w$}")),
        );
        lines.push(header.join(" "));
        for (row, cells) in self.rows.iter().zip(&rendered) {
            let mut parts = vec![
                format!("{:<w_dataset$}", row.dataset),
                format!("{:<w_model$}", row.model),
            ];
            parts.extend(cells.iter().zip(&w_cols).map(|(c, w)| format!("{c:>w$}")));
            lines.push(parts.join(" "));
        }
        lines.push(String::new());
        for (j, name) in self.columns.iter().enumerate() {
            let mut leaders: Vec<String> = Vec::new();
            for &i in &self.best[j] {
                let label = format!("{} on {}", self.rows[i].model, self.rows[i].dataset);
                if !leaders.contains(&label) {
                    leaders.push(label);
                }
            }
            lines.push(format!(
                "best {name}: {} ({})",
                leaders.join(", "),
                rendered[self.best[j][0]][j]
            ));
        }
        lines.join("\n") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("dataset,model,{}\n", self.columns.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row.cells.iter().map(Cell::render).collect();
            out.push_str(&format!("{},{},{}\n", row.dataset, row.model, cells.join(",")));
        }
        out
    }
}

fn width<'a>(header: &str, cells: impl Iterator<Item = &'a str>) -> usize {
    cells.map(str::len).chain([header.len()]).max().unwrap()
}

/// Parses the CSV shape written by [`Report::to_csv`] back into a report.
pub fn parse_report_csv(text: &str) -> Result<Report> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::config("report csv is empty"))?;
    let head: Vec<&str> = header.split(',').map(str::trim).collect();
    if head.len() < 3 || head[0] != "dataset" || head[1] != "model" {
        return Err(Error::config(
            "report csv header must start with dataset,model and carry at least one metric",
        ));
    }
    let columns: Vec<String> = head[2..].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != head.len() {
            return Err(Error::config(format!(
                "line {}: expected {} fields, got {}",
                idx + 1,
                head.len(),
                fields.len()
            )));
        }
        let cells = fields[2..]
            .iter()
            .map(|f| parse_cell(f, idx + 1))
            .collect::<Result<Vec<Cell>>>()?;
        rows.push(ReportRow {
            dataset: fields[0].to_string(),
            model: fields[1].to_string(),
            cells,
        });
    }
    build_report(&columns, rows)
}

fn parse_cell(field: &str, line: usize) -> Result<Cell> {
    let bad = || Error::config(format!("line {line}: unreadable cell {field:?}"));
    if field.contains('/') {
        let parts: Vec<&str> = field.split('/').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut vals = [0.0; 3];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p.parse().map_err(|_| bad())?;
        }
        Ok(Cell::Trio(vals[0], vals[1], vals[2]))
    } else {
        field.parse().map(Cell::Scalar).map_err(|_| bad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(dataset: &str, model: &str, vals: &[f64]) -> ReportRow {
        ReportRow {
            dataset: dataset.into(),
            model: model.into(),
            cells: vals.iter().map(|&v| Cell::Scalar(v)).collect(),
        }
    }

    fn judged_columns() -> Vec<String> {
        ["CoI", "BMA", "TDO"].map(String::from).to_vec()
    }

    #[test]
    fn single_run_renders_one_row() {
        let report =
            build_report(&judged_columns(), vec![row("LAD", "Ours", &[5.0, 4.0, 3.0])]).unwrap();
        let text = report.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("dataset model"));
        assert!(lines[1].contains("LAD"));
        assert!(lines[1].contains("5.00 4.00 3.00"));
        assert_eq!(lines[0].len(), lines[1].len());
    }

    #[test]
    fn dominating_run_is_flagged_best_in_every_column() {
        let rows = vec![
            row("LAD", "A", &[5.0, 5.0, 5.0]),
            row("LAD", "B", &[1.0, 2.0, 3.0]),
        ];
        let report = build_report(&judged_columns(), rows).unwrap();
        assert_eq!(report.best, vec![vec![0], vec![0], vec![0]]);
        for line in report.to_text().lines().filter(|l| l.starts_with("best ")) {
            assert!(line.contains("A on LAD"));
            assert!(!line.contains("B on LAD"));
        }
    }

    #[test]
    fn ties_flag_every_leader() {
        let rows = vec![row("d", "A", &[1.0]), row("d", "B", &[1.0])];
        let report = build_report(&["m".to_string()], rows).unwrap();
        assert_eq!(report.best, vec![vec![0, 1]]);
        assert!(report.to_text().contains("best m: A on d, B on d (1.00)"));
    }

    #[test]
    fn published_judged_row_renders_byte_exact() {
        let rows = vec![
            row("LAD", "Gemma3", &[5.13, 5.15, 4.86]),
            row("LAD", "Tag2Text", &[2.19, 2.08, 2.02]),
            row("LAD", "Ours", &[5.68, 5.43, 4.78]),
        ];
        let text = build_report(&judged_columns(), rows).unwrap().to_text();
        assert!(text.contains("5.68 5.43 4.78"));
    }

    #[test]
    fn published_trio_cell_renders_byte_exact() {
        let rows = vec![ReportRow {
            dataset: "HOI".into(),
            model: "Tag2Text".into(),
            cells: vec![Cell::Trio(0.40, 0.19, 0.24), Cell::Scalar(0.17)],
        }];
        let columns = ["P/R/F1", "Jaccard"].map(String::from).to_vec();
        let report = build_report(&columns, rows).unwrap();
        assert!(report.to_text().contains("0.40/0.19/0.24"));
        assert!(report.to_csv().contains("0.40/0.19/0.24,0.17"));
    }

    #[test]
    fn csv_round_trips_through_parser() {
        let rows = vec![
            ReportRow {
                dataset: "HOI".into(),
                model: "Ours".into(),
                cells: vec![Cell::Trio(0.45, 0.39, 0.41), Cell::Scalar(0.33)],
            },
            ReportRow {
                dataset: "HOI".into(),
                model: "RAM".into(),
                cells: vec![Cell::Trio(0.43, 0.20, 0.26), Cell::Scalar(0.18)],
            },
        ];
        let columns = ["P/R/F1", "Jaccard"].map(String::from).to_vec();
        let report = build_report(&columns, rows).unwrap();
        let parsed = parse_report_csv(&report.to_csv()).unwrap();
        assert_eq!(parsed.to_text(), report.to_text());
        assert_eq!(parsed.best, vec![vec![0], vec![0]]);
    }

    #[test]
    fn parser_rejects_bad_shapes() {
        assert!(parse_report_csv("").is_err());
        assert!(parse_report_csv("model,dataset,CoI\nd,m,1.0").is_err());
        let err = parse_report_csv("dataset,model,CoI\nd,m,abc").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(parse_report_csv("dataset,model,CoI\nd,m,1.0,2.0").is_err());
        assert!(build_report(&judged_columns(), Vec::new()).is_err());
    }

    #[test]
    fn trio_cells_rank_by_f1_for_best_flags() {
        let rows = vec![
            ReportRow {
                dataset: "HOI".into(),
                model: "high-p".into(),
                cells: vec![Cell::Trio(0.90, 0.10, 0.18)],
            },
            ReportRow {
                dataset: "HOI".into(),
                model: "balanced".into(),
                cells: vec![Cell::Trio(0.45, 0.39, 0.41)],
            },
        ];
        let report = build_report(&["P/R/F1".to_string()], rows).unwrap();
        assert_eq!(report.best, vec![vec![1]]);
    }
}
