//! Evaluation reports: JSON plus a text table laid out like a results table
//! with one row per method and one column per dataset.

use samic_core::metrics::MetricReport;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "mIoU")]
    MIoU,
    #[serde(rename = "J & F")]
    JAndF,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::MIoU => "mIoU",
            Metric::JAndF => "J & F",
        }
    }
}

/// One method evaluated on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub method: String,
    pub learnable_params: Option<usize>,
    pub dataset: String,
    pub metric: Metric,
    pub shots: usize,
    pub report: MetricReport,
}

impl ReportEntry {
    pub fn value(&self) -> Option<f64> {
        match self.metric {
            Metric::MIoU => Some(self.report.miou),
            Metric::JAndF => self.report.j_and_f,
        }
    }
}

/// Combines per-fold reports: the overall mean is the mean of the fold
/// means.
pub fn combine_folds(folds: &[MetricReport]) -> MetricReport {
    let mut out = MetricReport::default();
    for f in folds {
        out.per_class_iou.extend(f.per_class_iou.iter().map(|(k, v)| (k.clone(), *v)));
        out.per_fold_miou.push(f.miou);
        out.fallback_prompts += f.fallback_prompts;
        out.episodes += f.episodes;
    }
    if !folds.is_empty() {
        out.miou = out.per_fold_miou.iter().sum::<f64>() / folds.len() as f64;
    }
    out
}

fn format_params(n: Option<usize>) -> String {
    match n {
        None => "n/a".into(),
        Some(n) if n >= 1_000_000 => format!("{:.1}M", n as f64 / 1e6),
        Some(n) if n >= 1_000 => format!("{:.0}K", n as f64 / 1e3),
        Some(n) => n.to_string(),
    }
}

/// Renders entries as a table. Columns are (dataset, metric, shots) in first
/// appearance order; cells are percentages with one decimal, `n/a` where a
/// method was not run.
pub fn render_table(entries: &[ReportEntry]) -> String {
    let mut columns: Vec<(&str, Metric, usize)> = Vec::new();
    let mut methods: Vec<(&str, Option<usize>)> = Vec::new();
    for e in entries {
        let col = (e.dataset.as_str(), e.metric, e.shots);
        if !columns.contains(&col) {
            columns.push(col);
        }
        if !methods.iter().any(|(m, _)| *m == e.method) {
            methods.push((e.method.as_str(), e.learnable_params));
        }
    }
    let mut rows: Vec<Vec<String>> = vec![
        ["Methods", "# learnable parameters"].iter().map(|s| s.to_string()).chain(columns.iter().map(|c| c.0.to_string())).collect(),
        ["", ""].iter().map(|s| s.to_string()).chain(columns.iter().map(|c| format!("{} ({}-shot)", c.1.label(), c.2))).collect(),
    ];
    for (m, params) in &methods {
        let mut row = vec![m.to_string(), format_params(*params)];
        for c in &columns {
            let cell = entries
                .iter()
                .find(|e| e.method == *m && (e.dataset.as_str(), e.metric, e.shots) == *c)
                .and_then(ReportEntry::value)
                .map_or("n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
            row.push(cell);
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
    let line = |r: &Vec<String>| {
        r.iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        out.push_str(line(r).trim_end());
        out.push('\n');
        if i == 1 {
            out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
            out.push('\n');
        }
    }
    out
}
