use std::fmt::Write as _;

use crate::metrics::{MetricsRow, METRICS_HEADER};

/// Quotes a CSV field when it contains a separator or quote.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Metrics of one region of one validation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub fold: usize,
    pub mode: String,
    pub sample: String,
    pub metrics: MetricsRow,
}

/// Per-sample rows in (mode, fold, sample, region) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

/// Arithmetic mean of each metric over `rows`, grouped by region in order of
/// first appearance.
pub fn mean_by_region<'a>(rows: impl IntoIterator<Item = &'a MetricsRow>) -> Vec<MetricsRow> {
    let mut groups: Vec<(MetricsRow, usize)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(g, _)| g.region == r.region) {
            Some((g, n)) => {
                g.dice += r.dice;
                g.hd95_mm += r.hd95_mm;
                g.volume_similarity += r.volume_similarity;
                *n += 1;
            }
            None => groups.push((r.clone(), 1)),
        }
    }
    groups
        .into_iter()
        .map(|(mut g, n)| {
            let n = n as f64;
            g.dice /= n;
            g.hd95_mm /= n;
            g.volume_similarity /= n;
            g
        })
        .collect()
}

impl MetricsReport {
    /// `(fold, mode, region means)` for every fold and mode, in row order.
    pub fn fold_means(&self) -> Vec<(usize, String, MetricsRow)> {
        let mut keys: Vec<(usize, &str)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.fold, r.mode.as_str())) {
                keys.push((r.fold, &r.mode));
            }
        }
        keys.into_iter()
            .flat_map(|(fold, mode)| {
                let rows = self
                    .rows
                    .iter()
                    .filter(move |r| r.fold == fold && r.mode == mode);
                mean_by_region(rows.map(|r| &r.metrics))
                    .into_iter()
                    .map(move |m| (fold, mode.to_string(), m))
            })
            .collect()
    }

    /// Region means over every row.
    pub fn overall(&self) -> Vec<MetricsRow> {
        mean_by_region(self.rows.iter().map(|r| &r.metrics))
    }

    pub fn rows_csv(&self) -> String {
        let mut out = format!("fold,mode,sample,{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.fold,
                csv_field(&r.mode),
                csv_field(&r.sample),
                r.metrics.csv()
            );
        }
        out
    }

    pub fn folds_csv(&self) -> String {
        let mut out = format!("fold,mode,{METRICS_HEADER}\n");
        for (fold, mode, m) in self.fold_means() {
            let _ = writeln!(out, "{fold},{},{}", csv_field(&mode), m.csv());
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for m in self.overall() {
            let _ = writeln!(out, "{}", m.csv());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(fold: usize, region: &str, dice: f64) -> ReportRow {
        ReportRow {
            fold,
            mode: "hybrid".into(),
            sample: format!("s{fold}"),
            metrics: MetricsRow {
                region: region.into(),
                dice,
                hd95_mm: 1.0,
                volume_similarity: 1.0,
            },
        }
    }

    #[test]
    fn means_group_by_fold_and_region() {
        let report = MetricsReport {
            rows: vec![
                row(0, "WT", 0.5),
                row(0, "WT", 1.0),
                row(0, "ET", 0.2),
                row(1, "WT", 0.0),
            ],
        };
        let folds = report.fold_means();
        assert_eq!(folds.len(), 3);
        assert_eq!(folds[0].2.dice, 0.75);
        assert_eq!(folds[1].2.region, "ET");
        assert_eq!(report.overall()[0].dice, 0.5);
    }
}
