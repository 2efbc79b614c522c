//! Distribution, ratio and accuracy tables rendered as CSV, Markdown and SVG.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Corpus, McqItem, QuestionType};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("prediction references unknown item `{0}`")]
    UnknownItem(String),
    #[error("benchmark metadata: {0}")]
    Metadata(String),
    #[error("duplicate prediction by `{model}` for `{item_id}`")]
    DuplicatePrediction { model: String, item_id: String },
    #[error("csv: {0}")]
    Csv(String),
}

/// `count / total` as a percentage in tenths, rounded half-up with exact
/// integer arithmetic. Zero total gives zero.
pub fn pct_tenths(count: u64, total: u64) -> u64 {
    if total == 0 {
        return 0;
    }
    let (c, t) = (u128::from(count), u128::from(total));
    ((c * 2000 + t) / (2 * t)) as u64
}

pub fn format_tenths(tenths: u64) -> String {
    format!("{}.{}", tenths / 10, tenths % 10)
}

pub fn format_pct(count: u64, total: u64) -> String {
    format_tenths(pct_tenths(count, total))
}

/// A fraction in `[0, 1]` as a one-decimal percentage, rounded half-up.
/// The small bias absorbs binary representation error at exact halves.
pub fn format_fraction(x: f64) -> String {
    let tenths = (x * 1000.0 + 0.5 + 1e-9).floor().max(0.0) as u64;
    format_tenths(tenths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistRow {
    pub label: String,
    pub count: u64,
    /// One-decimal percentage, e.g. `"47.0"`.
    pub percent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistTable {
    pub title: String,
    pub total: u64,
    pub rows: Vec<DistRow>,
}

impl DistTable {
    /// Rows sorted by count, largest first; ties keep input order. Zero
    /// counts are dropped.
    pub fn from_counts(title: &str, counts: &[(String, u64)]) -> Self {
        let total: u64 = counts.iter().map(|(_, c)| c).sum();
        let mut rows: Vec<DistRow> = counts
            .iter()
            .filter(|(_, c)| *c > 0)
            .map(|(l, c)| DistRow { label: l.clone(), count: *c, percent: format_pct(*c, total) })
            .collect();
        rows.sort_by_key(|r| std::cmp::Reverse(r.count));
        Self { title: title.to_string(), total, rows }
    }

    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| ReportError::Csv(e.to_string());
        w.write_record(["label", "count", "percent"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([r.label.as_str(), &r.count.to_string(), &r.percent]).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 input"))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n| Label | Count | Percent |\n|---|---:|---:|\n", self.title);
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {} | {} |", r.label, r.count, r.percent);
        }
        let _ = writeln!(s, "| **Total** | {} | {} |", self.total, if self.total > 0 { "100.0" } else { "0.0" });
        s
    }
}

pub fn type_distribution(items: &[McqItem]) -> DistTable {
    let mut counts: BTreeMap<QuestionType, u64> = BTreeMap::new();
    for it in items {
        *counts.entry(it.qtype).or_default() += 1;
    }
    let rows: Vec<(String, u64)> = QuestionType::ALL
        .iter()
        .map(|t| (t.label().to_string(), counts.get(t).copied().unwrap_or(0)))
        .collect();
    DistTable::from_counts("Question type distribution", &rows)
}

pub fn source_distribution(items: &[McqItem]) -> DistTable {
    let mut counts: BTreeMap<Corpus, u64> = BTreeMap::new();
    for it in items {
        *counts.entry(it.source).or_default() += 1;
    }
    let rows: Vec<(String, u64)> = Corpus::ALL
        .iter()
        .map(|c| (c.name().to_string(), counts.get(c).copied().unwrap_or(0)))
        .collect();
    DistTable::from_counts("Source data distribution", &rows)
}

/// Weak/strong split of one row of the ratio table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioRow {
    pub label: String,
    pub weak: u64,
    pub total: u64,
}

impl RatioRow {
    pub fn from_counts(label: &str, weak: u64, total: u64) -> Self {
        assert!(weak <= total, "weak count exceeds total");
        Self { label: label.to_string(), weak, total }
    }

    pub fn strong(&self) -> u64 {
        self.total - self.weak
    }

    pub fn weak_pct(&self) -> String {
        format_pct(self.weak, self.total)
    }

    pub fn strong_pct(&self) -> String {
        format_pct(self.strong(), self.total)
    }
}

pub fn ratio_csv(rows: &[RatioRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| ReportError::Csv(e.to_string());
    w.write_record(["source", "weak", "strong", "total", "weak_pct", "strong_pct"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.weak.to_string(),
            r.strong().to_string(),
            r.total.to_string(),
            r.weak_pct(),
            r.strong_pct(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 input"))
}

pub fn ratio_markdown(title: &str, rows: &[RatioRow]) -> String {
    let mut s = format!("### {title}\n\n| Source | Weak (%) | Strong (%) | Items |\n|---|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {} | {} | {} |", r.label, r.weak_pct(), r.strong_pct(), r.total);
    }
    s
}

/// One benchmark item's subset tag and option count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkMeta {
    pub item_id: String,
    pub subset: String,
    #[serde(default = "four")]
    pub num_options: u8,
}

fn four() -> u8 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub model: String,
    pub item_id: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub models: Vec<String>,
    pub subsets: Vec<String>,
    /// `cells[s][m]`: correct and total counts of model `m` on subset `s`.
    pub cells: Vec<Vec<(u64, u64)>>,
    /// Per-model counts over all subsets.
    pub overall: Vec<(u64, u64)>,
    /// Expected random-guess accuracy per subset, as a fraction.
    pub random_guess: Vec<f64>,
    pub random_guess_overall: f64,
}

fn frac((c, t): (u64, u64)) -> f64 {
    if t == 0 {
        0.0
    } else {
        c as f64 / t as f64
    }
}

impl AccuracyTable {
    pub fn subset_average(&self, s: usize) -> f64 {
        mean(self.cells[s].iter().map(|c| frac(*c)))
    }

    pub fn overall_average(&self) -> f64 {
        mean(self.overall.iter().map(|c| frac(*c)))
    }

    pub fn to_markdown(&self, title: &str) -> String {
        let mut s = format!("### {title}\n\n| Subset |");
        for m in &self.models {
            let _ = write!(s, " {m} |");
        }
        s.push_str(" Average | Random Guess |\n|---|");
        s.push_str(&"---:|".repeat(self.models.len() + 2));
        s.push('\n');
        for (i, sub) in self.subsets.iter().enumerate() {
            let _ = write!(s, "| {sub} |");
            for c in &self.cells[i] {
                let _ = write!(s, " {} |", format_pct(c.0, c.1));
            }
            let _ = writeln!(
                s,
                " {} | {} |",
                format_fraction(self.subset_average(i)),
                format_fraction(self.random_guess[i])
            );
        }
        s.push_str("| **Overall** |");
        for c in &self.overall {
            let _ = write!(s, " {} |", format_pct(c.0, c.1));
        }
        let _ = writeln!(
            s,
            " {} | {} |",
            format_fraction(self.overall_average()),
            format_fraction(self.random_guess_overall)
        );
        s
    }

    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| ReportError::Csv(e.to_string());
        let mut header = vec!["subset".to_string()];
        header.extend(self.models.iter().cloned());
        header.push("average".into());
        header.push("random_guess".into());
        w.write_record(&header).map_err(csv_err)?;
        let mut row = |label: &str, cells: &[(u64, u64)], avg: f64, rg: f64| -> Result<(), ReportError> {
            let mut r = vec![label.to_string()];
            r.extend(cells.iter().map(|c| format_pct(c.0, c.1)));
            r.push(format_fraction(avg));
            r.push(format_fraction(rg));
            w.write_record(&r).map_err(csv_err)
        };
        for (i, sub) in self.subsets.iter().enumerate() {
            row(sub, &self.cells[i], self.subset_average(i), self.random_guess[i])?;
        }
        row("Overall", &self.overall, self.overall_average(), self.random_guess_overall)?;
        let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 input"))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-model, per-subset accuracy. Subsets appear in `subset_order` when
/// given (tags outside it are a metadata error), otherwise in order of
/// first appearance in `meta`. Models appear in order of first prediction.
pub fn accuracy_breakdown(
    predictions: &[ScoredPrediction],
    meta: &[BenchmarkMeta],
    subset_order: &[String],
) -> Result<AccuracyTable, ReportError> {
    let mut subsets: Vec<String> = subset_order.to_vec();
    let mut item_subset: HashMap<&str, usize> = HashMap::with_capacity(meta.len());
    let mut per_subset_items: Vec<Vec<u8>> = vec![Vec::new(); subsets.len()];
    for m in meta {
        if m.subset.trim().is_empty() {
            return Err(ReportError::Metadata(format!("item `{}` has no subset tag", m.item_id)));
        }
        if !(2..=26).contains(&m.num_options) {
            return Err(ReportError::Metadata(format!("item `{}` has {} options", m.item_id, m.num_options)));
        }
        let idx = match subsets.iter().position(|s| *s == m.subset) {
            Some(i) => i,
            None if subset_order.is_empty() => {
                subsets.push(m.subset.clone());
                per_subset_items.push(Vec::new());
                subsets.len() - 1
            }
            None => return Err(ReportError::Metadata(format!("unknown subset tag `{}`", m.subset))),
        };
        if item_subset.insert(m.item_id.as_str(), idx).is_some() {
            return Err(ReportError::Metadata(format!("duplicate item `{}`", m.item_id)));
        }
        per_subset_items[idx].push(m.num_options);
    }

    let mut models: Vec<String> = Vec::new();
    for p in predictions {
        if !models.contains(&p.model) {
            models.push(p.model.clone());
        }
    }
    let mut cells = vec![vec![(0u64, 0u64); models.len()]; subsets.len()];
    let mut seen = std::collections::HashSet::new();
    for p in predictions {
        let s = *item_subset
            .get(p.item_id.as_str())
            .ok_or_else(|| ReportError::UnknownItem(p.item_id.clone()))?;
        if !seen.insert((p.model.as_str(), p.item_id.as_str())) {
            return Err(ReportError::DuplicatePrediction { model: p.model.clone(), item_id: p.item_id.clone() });
        }
        let m = models.iter().position(|x| *x == p.model).expect("model registered above");
        cells[s][m].1 += 1;
        cells[s][m].0 += u64::from(p.correct);
    }
    let overall = (0..models.len())
        .map(|m| cells.iter().fold((0, 0), |(c, t), row| (c + row[m].0, t + row[m].1)))
        .collect();
    let random_guess = per_subset_items
        .iter()
        .map(|opts| mean(opts.iter().map(|k| 1.0 / f64::from(*k))))
        .collect();
    let random_guess_overall = mean(per_subset_items.iter().flatten().map(|k| 1.0 / f64::from(*k)));
    Ok(AccuracyTable { models, subsets, cells, overall, random_guess, random_guess_overall })
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Pie chart with one labelled sector per row. `None` for an empty table.
pub fn pie_svg(table: &DistTable) -> Option<String> {
    if table.rows.is_empty() || table.total == 0 {
        return None;
    }
    let (cx, cy, r) = (150.0_f64, 160.0_f64, 110.0_f64);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\" viewBox=\"0 0 480 320\">"
    );
    let _ = writeln!(
        s,
        "<text x=\"240\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>",
        xml_escape(&table.title)
    );
    let mut start = 0u64;
    for (i, row) in table.rows.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if row.count == table.total {
            let _ = writeln!(s, "<circle class=\"sector\" cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{r:.2}\" fill=\"{color}\"/>");
        } else {
            let a0 = std::f64::consts::TAU * start as f64 / table.total as f64;
            let a1 = std::f64::consts::TAU * (start + row.count) as f64 / table.total as f64;
            let (x0, y0) = (cx + r * a0.sin(), cy - r * a0.cos());
            let (x1, y1) = (cx + r * a1.sin(), cy - r * a1.cos());
            let large = u8::from(a1 - a0 > std::f64::consts::PI);
            let _ = writeln!(
                s,
                "<path class=\"sector\" d=\"M {cx:.2} {cy:.2} L {x0:.2} {y0:.2} A {r:.2} {r:.2} 0 {large} 1 {x1:.2} {y1:.2} Z\" fill=\"{color}\"/>"
            );
        }
        start += row.count;
        let ly = 60.0 + 24.0 * i as f64;
        let _ = writeln!(s, "<rect x=\"290\" y=\"{:.2}\" width=\"14\" height=\"14\" fill=\"{color}\"/>", ly - 11.0);
        let _ = writeln!(
            s,
            "<text class=\"label\" x=\"310\" y=\"{ly:.2}\" font-family=\"sans-serif\" font-size=\"13\">{} ({}%)</text>",
            xml_escape(&row.label),
            row.percent
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

pub const BAR_WIDTH: f64 = 400.0;

/// Width of the weak segment of a ratio bar; the strong segment takes the
/// rest of [`BAR_WIDTH`].
pub fn weak_bar_width(row: &RatioRow) -> f64 {
    if row.total == 0 {
        0.0
    } else {
        BAR_WIDTH * row.weak as f64 / row.total as f64
    }
}

/// One stacked weak/strong bar per row. `None` for an empty table.
pub fn ratio_bars_svg(title: &str, rows: &[RatioRow]) -> Option<String> {
    if rows.is_empty() {
        return None;
    }
    let height = 60 + 30 * rows.len();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"580\" height=\"{height}\" viewBox=\"0 0 580 {height}\">"
    );
    let _ = writeln!(
        s,
        "<text x=\"290\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>",
        xml_escape(title)
    );
    for (i, row) in rows.iter().enumerate() {
        let y = 44.0 + 30.0 * i as f64;
        let weak_w = weak_bar_width(row);
        let strong_w = BAR_WIDTH - weak_w;
        let _ = writeln!(
            s,
            "<text x=\"110\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            y + 15.0,
            xml_escape(&row.label)
        );
        let _ = writeln!(
            s,
            "<rect class=\"weak\" x=\"120.00\" y=\"{y:.2}\" width=\"{weak_w:.2}\" height=\"20\" fill=\"{}\"/>",
            PALETTE[0]
        );
        let _ = writeln!(
            s,
            "<rect class=\"strong\" x=\"{:.2}\" y=\"{y:.2}\" width=\"{strong_w:.2}\" height=\"20\" fill=\"{}\"/>",
            120.0 + weak_w,
            PALETTE[1]
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">{} / {}</text>",
            125.0 + BAR_WIDTH,
            y + 15.0,
            row.weak_pct(),
            row.strong_pct()
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Writes `types.svg`, `sources.svg` and `ratios.svg` under `dir`, skipping
/// (with a warning) any chart whose table is empty.
pub fn emit_plots(
    dir: &Path,
    types: &DistTable,
    sources: &DistTable,
    ratios: &[RatioRow],
) -> crate::error::Result<Vec<PathBuf>> {
    let charts = [
        ("types.svg", pie_svg(types)),
        ("sources.svg", pie_svg(sources)),
        ("ratios.svg", ratio_bars_svg("Weak / strong audio contribution", ratios)),
    ];
    let mut written = Vec::new();
    for (name, svg) in charts {
        match svg {
            Some(svg) => {
                let path = dir.join(name);
                crate::manifest::write_atomic(&path, svg.as_bytes())?;
                written.push(path);
            }
            None => tracing::warn!(chart = name, "empty table, chart skipped"),
        }
    }
    Ok(written)
}
