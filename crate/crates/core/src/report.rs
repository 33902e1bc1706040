//! Grouped bar charts (SVG) and summary tables.
//!
//! One SVG per mask with a PCA panel and a Dice panel. In each panel the x
//! axis groups frame counts, bars within a group are base models, whiskers
//! show the standard deviation over rounds and a dashed horizontal line marks
//! the matched condition. Every bar carries its exact values as `data-*`
//! attributes, and its geometry follows from the panel's `data-axis-lo`,
//! `data-axis-hi`, `data-plot-top` and `data-plot-height`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::{
    aggregate, matched_reference, write_aggregate_csv, write_aggregate_json, AggregateRecord,
    EvalError, MetricRecord,
};
use crate::fsutil::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

const WIDTH: f64 = 960.0;
const PANEL_HEIGHT: f64 = 340.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 190.0;
const PLOT_TOP: f64 = 40.0;
const PLOT_HEIGHT: f64 = 260.0;
const PALETTE: [&str; 12] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
    "#ccb974", "#64b5cd", "#1f3b73", "#a13d2d",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Pca,
    Dice,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Pca => "pca",
            Metric::Dice => "dice",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Pca => "PCA",
            Metric::Dice => "Dice",
        }
    }

    fn of(self, r: &AggregateRecord) -> (f64, f64) {
        match self {
            Metric::Pca => (r.mean_pca, r.std_pca),
            Metric::Dice => (r.mean_dice, r.std_dice),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Value axis rounded outward to multiples of 0.05.
fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let step = 0.05;
    let lo = ((lo / step).floor() * step - step).max(0.0);
    let hi = ((hi / step).ceil() * step).max(lo + step);
    (lo, hi)
}

fn panel(svg: &mut String, rows: &[&AggregateRecord], matched: f64, metric: Metric, offset: f64) {
    let models: Vec<&str> = rows
        .iter()
        .map(|r| r.model.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ks: Vec<i64> = rows
        .iter()
        .map(|r| r.k)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (lo, hi) = axis_range(
        rows.iter()
            .flat_map(|r| {
                let (m, s) = metric.of(r);
                [m - s, m + s]
            })
            .chain([matched]),
    );
    let top = offset + PLOT_TOP;
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let y = |v: f64| top + PLOT_HEIGHT * (hi - v) / (hi - lo);
    let _ = writeln!(
        svg,
        r#"<g class="panel" data-metric="{}" data-axis-lo="{lo}" data-axis-hi="{hi}" data-plot-top="{top}" data-plot-height="{PLOT_HEIGHT}">"#,
        metric.as_str()
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN_LEFT}" y="{:.1}" font-size="15" font-weight="bold">{}</text>"#,
        top - 14.0,
        metric.label()
    );
    // Axes and ticks.
    let bottom = top + PLOT_HEIGHT;
    let _ = writeln!(
        svg,
        r#"<line class="axis" x1="{MARGIN_LEFT}" y1="{top}" x2="{MARGIN_LEFT}" y2="{bottom}" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<line class="axis" x1="{MARGIN_LEFT}" y1="{bottom}" x2="{:.1}" y2="{bottom}" stroke="black"/>"#,
        MARGIN_LEFT + plot_w
    );
    let ticks = ((hi - lo) / 0.05).round() as usize;
    let every = ticks.div_ceil(10).max(1);
    for t in (0..=ticks).step_by(every) {
        let v = lo + 0.05 * t as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.4}" font-size="11" text-anchor="end">{v:.2}</text>"#,
            MARGIN_LEFT - 6.0,
            y(v) + 4.0
        );
    }
    let group_w = plot_w / ks.len() as f64;
    let bar_w = group_w * 0.8 / models.len() as f64;
    for (gi, &k) in ks.iter().enumerate() {
        let gx = MARGIN_LEFT + group_w * gi as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.4}" y="{:.1}" font-size="12" text-anchor="middle">{k}</text>"#,
            gx + group_w / 2.0,
            bottom + 16.0
        );
        for (mi, model) in models.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.k == k && r.model == *model) else {
                continue;
            };
            let (mean, std) = metric.of(r);
            let x = gx + group_w * 0.1 + bar_w * mi as f64;
            let _ = writeln!(
                svg,
                r#"<rect class="bar" data-model="{}" data-k="{k}" data-mean="{mean}" data-std="{std}" x="{x:.4}" y="{:.6}" width="{:.4}" height="{:.6}" fill="{}"/>"#,
                escape(model),
                y(mean),
                bar_w * 0.9,
                bottom - y(mean),
                PALETTE[mi % PALETTE.len()]
            );
            let cx = x + bar_w * 0.45;
            let _ = writeln!(
                svg,
                r#"<line class="errorbar" data-model="{}" data-k="{k}" x1="{cx:.4}" y1="{:.6}" x2="{cx:.4}" y2="{:.6}" stroke="black"/>"#,
                escape(model),
                y(mean + std),
                y(mean - std)
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<line class="matched" data-value="{matched}" x1="{MARGIN_LEFT}" y1="{:.6}" x2="{:.1}" y2="{:.6}" stroke="red" stroke-dasharray="6,4"/>"#,
        y(matched),
        MARGIN_LEFT + plot_w,
        y(matched)
    );
    // Legend.
    let lx = WIDTH - MARGIN_RIGHT + 16.0;
    for (mi, model) in models.iter().enumerate() {
        let ly = top + 18.0 * mi as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{ly}" width="12" height="12" fill="{}"/><text x="{}" y="{}" font-size="12">{}</text>"#,
            PALETTE[mi % PALETTE.len()],
            lx + 18.0,
            ly + 10.0,
            escape(model)
        );
    }
    let ly = top + 18.0 * models.len() as f64 + 6.0;
    let _ = writeln!(
        svg,
        r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="red" stroke-dasharray="6,4"/><text x="{}" y="{}" font-size="12">matched</text>"#,
        lx + 12.0,
        lx + 18.0,
        ly + 4.0
    );
    svg.push_str("</g>\n");
}

/// SVG chart of one mask: PCA panel above a Dice panel. `matched` is the
/// matched-condition (PCA, Dice) of this mask.
pub fn mask_chart_svg(rows: &[AggregateRecord], mask: u8, matched: (f64, f64)) -> String {
    let rows: Vec<&AggregateRecord> = rows.iter().filter(|r| r.mask == mask).collect();
    let height = 2.0 * PANEL_HEIGHT + 20.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" data-mask="{mask}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-size="16" text-anchor="middle">Mask {mask}: mean over rounds, whiskers = std, x = adaptation frames</text>"#,
        WIDTH / 2.0
    );
    if !rows.is_empty() {
        panel(&mut svg, &rows, matched.0, Metric::Pca, 10.0);
        panel(
            &mut svg,
            &rows,
            matched.1,
            Metric::Dice,
            10.0 + PANEL_HEIGHT,
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Best relative-to-matched values of one (model, mask) over frame counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub mask: u8,
    pub max_relative_pca: f64,
    pub k_at_max_pca: i64,
    pub max_relative_dice: f64,
    pub k_at_max_dice: i64,
}

pub fn summarize(rows: &[AggregateRecord]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for r in rows {
        match out
            .iter_mut()
            .find(|s| s.model == r.model && s.mask == r.mask)
        {
            Some(s) => {
                if r.relative_to_matched_pca > s.max_relative_pca {
                    s.max_relative_pca = r.relative_to_matched_pca;
                    s.k_at_max_pca = r.k;
                }
                if r.relative_to_matched_dice > s.max_relative_dice {
                    s.max_relative_dice = r.relative_to_matched_dice;
                    s.k_at_max_dice = r.k;
                }
            }
            None => out.push(SummaryRow {
                model: r.model.clone(),
                mask: r.mask,
                max_relative_pca: r.relative_to_matched_pca,
                k_at_max_pca: r.k,
                max_relative_dice: r.relative_to_matched_dice,
                k_at_max_dice: r.k,
            }),
        }
    }
    out.sort_by(|a, b| (&a.model, a.mask).cmp(&(&b.model, b.mask)));
    out
}

/// Plain-text table of [`summarize`] output.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let w = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut s = format!(
        "{:<w$}  mask  max rel PCA %  (k)  max rel Dice %  (k)\n",
        "model"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:>4}  {:>13.2}  {:>3}  {:>14.2}  {:>3}",
            r.model,
            r.mask,
            r.max_relative_pca,
            r.k_at_max_pca,
            r.max_relative_dice,
            r.k_at_max_dice
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub charts: Vec<PathBuf>,
    pub aggregate_csv: PathBuf,
    pub aggregate_json: PathBuf,
    pub summary_csv: PathBuf,
    pub summary: Vec<SummaryRow>,
}

/// Aggregate `records` against `matched` and write `mask{1,2,3}.svg`,
/// `aggregate.csv`, `aggregate.json` and `summary.csv` under `out`.
pub fn write_report(
    records: &[MetricRecord],
    matched: &[MetricRecord],
    out: &Path,
) -> Result<ReportFiles, ReportError> {
    let rows = aggregate(records, matched)?;
    let masks: BTreeSet<u8> = rows.iter().map(|r| r.mask).collect();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    let mut charts = Vec::new();
    for mask in masks {
        let path = out.join(format!("mask{mask}.svg"));
        let svg = mask_chart_svg(&rows, mask, matched_reference(matched, mask)?);
        write_atomic(&path, svg.as_bytes()).map_err(io(&path))?;
        charts.push(path);
    }
    let aggregate_csv = out.join("aggregate.csv");
    write_aggregate_csv(&aggregate_csv, &rows)?;
    let aggregate_json = out.join("aggregate.json");
    write_aggregate_json(&aggregate_json, &rows)?;
    let summary = summarize(&rows);
    let summary_csv = out.join("summary.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &summary {
        w.serialize(r).expect("in-memory CSV");
    }
    let bytes = w.into_inner().expect("in-memory CSV");
    write_atomic(&summary_csv, &bytes).map_err(io(&summary_csv))?;
    Ok(ReportFiles {
        charts,
        aggregate_csv,
        aggregate_json,
        summary_csv,
        summary,
    })
}
