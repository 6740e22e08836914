//! Per-fold result tables with an average column.

use std::fmt::Write as _;

/// Scores for one fold's held-out split (or for the external validation
/// set). Segmentation scores are class-averaged per sample, then averaged
/// over samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FoldMetrics {
    pub accuracy: f64,
    pub kappa: f64,
    pub dice: Option<f64>,
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub folds: Vec<Option<f64>>,
    pub average: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub classification: Vec<ReportRow>,
    pub segmentation: Vec<ReportRow>,
    pub n_folds: usize,
}

fn mean(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fold_row(metric: &str, folds: &[FoldMetrics], f: impl Fn(&FoldMetrics) -> Option<f64>) -> ReportRow {
    let values: Vec<Option<f64>> = folds.iter().map(f).collect();
    ReportRow { metric: metric.to_string(), average: mean(&values), folds: values }
}

fn validation_row(metric: &str, n: usize, value: Option<f64>) -> ReportRow {
    ReportRow { metric: metric.to_string(), folds: vec![None; n], average: value }
}

/// Builds both tables. Validation rows appear only when validation scores
/// are given, and fill the average column alone.
pub fn fold_report(folds: &[FoldMetrics], validation: Option<&FoldMetrics>) -> FoldReport {
    let n = folds.len();
    let mut classification = vec![fold_row("Accuracy - KFold test", folds, |m| Some(m.accuracy))];
    if let Some(v) = validation {
        classification.push(validation_row("Accuracy - validation", n, Some(v.accuracy)));
    }
    classification.push(fold_row("Cohen's Kappa - KFold test", folds, |m| Some(m.kappa)));
    if let Some(v) = validation {
        classification.push(validation_row("Cohen's Kappa - validation", n, Some(v.kappa)));
    }
    let mut segmentation = vec![fold_row("Dice - KFold test", folds, |m| m.dice)];
    if let Some(v) = validation {
        segmentation.push(validation_row("Dice - validation", n, v.dice));
    }
    segmentation.push(fold_row("HD95 - KFold test", folds, |m| m.hd95));
    if let Some(v) = validation {
        segmentation.push(validation_row("HD95 - validation", n, v.hd95));
    }
    FoldReport { classification, segmentation, n_folds: n }
}

impl FoldReport {
    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.classification.iter().chain(&self.segmentation)
    }

    pub fn row(&self, metric: &str) -> Option<&ReportRow> {
        self.rows().find(|r| r.metric == metric)
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["Metric".to_string()];
        h.extend((1..=self.n_folds).map(|i| format!("Fold {i}")));
        h.push("Average".into());
        h
    }

    fn table(&self, title: &str, rows: &[ReportRow], out: &mut String) {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let mut grid = vec![self.header()];
        for r in rows {
            let mut line = vec![r.metric.clone()];
            line.extend(r.folds.iter().map(|&v| cell(v)));
            line.push(cell(r.average));
            grid.push(line);
        }
        let cols = grid[0].len();
        let widths: Vec<usize> = (0..cols).map(|c| grid.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        let _ = writeln!(out, "{title}");
        for (i, line) in grid.iter().enumerate() {
            let mut s = format!("{:<w$}", line[0], w = widths[0]);
            for c in 1..cols {
                let _ = write!(s, " | {:>w$}", line[c], w = widths[c]);
            }
            let _ = writeln!(out, "{s}");
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 3 * (cols - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
    }

    /// Aligned plain text, three decimals, `-` for empty cells.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.table("Classification", &self.classification, &mut out);
        out.push('\n');
        self.table("Segmentation", &self.segmentation, &mut out);
        out
    }

    /// `metric,fold1..foldk,average` with six decimals; empty cells blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for i in 1..=self.n_folds {
            let _ = write!(out, ",fold{i}");
        }
        out.push_str(",average\n");
        for r in self.rows() {
            out.push_str(&r.metric);
            for v in r.folds.iter().chain(std::iter::once(&r.average)) {
                out.push(',');
                if let Some(x) = v {
                    let _ = write!(out, "{x:.6}");
                }
            }
            out.push('\n');
        }
        out
    }
}
