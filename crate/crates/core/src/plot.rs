//! Validation curves as standalone SVG. Output depends only on the records,
//! so identical runs produce identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{records_csv, EpochRecord, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mae,
    Rmse,
    R2,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mae, Metric::Rmse, Metric::R2];

    pub fn file_stem(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::Rmse => "rmse",
            Metric::R2 => "r2",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Mae => "validation MAE",
            Metric::Rmse => "validation RMSE",
            Metric::R2 => "validation R²",
        }
    }

    fn of(self, r: &EpochRecord) -> Option<f64> {
        match self {
            Metric::Mae => Some(r.val_mae),
            Metric::Rmse => Some(r.val_rmse),
            Metric::R2 => r.val_r2,
        }
        .filter(|v| v.is_finite())
    }
}

/// A named polyline in epoch/value space.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 140.0;
const MARGIN_Y: f64 = 40.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders one chart. Empty series are skipped; an error if none remain.
pub fn render_svg(title: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let drawn: Vec<&Series> = series.iter().filter(|s| !s.points.is_empty()).collect();
    if drawn.is_empty() {
        return Err(Error::Config(format!("nothing to plot for {title}")));
    }
    let all = || drawn.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - 2.0 * MARGIN_Y;
    let px = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| MARGIN_Y + (y1 - y) / (y1 - y0) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_Y}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333"/>"##
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let yv = y0 + f * (y1 - y0);
        let xv = x0 + f * (x1 - x0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 6.0,
            py(yv) + 4.0,
            tick(yv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            HEIGHT - MARGIN_Y + 16.0,
            tick(xv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 6.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        MARGIN_Y + plot_h / 2.0,
        MARGIN_Y + plot_h / 2.0,
        escape(y_label)
    );
    for (i, s) in drawn.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN_Y + 14.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 10.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 18.0,
            ly - 4.0
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 24.0, escape(&s.label));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// One series per fold.
pub fn fold_series(records: &[EpochRecord], metric: Metric) -> Vec<Series> {
    let folds = records.iter().map(|r| r.fold + 1).max().unwrap_or(0);
    (0..folds)
        .map(|f| Series {
            label: format!("fold {f}"),
            points: records
                .iter()
                .filter(|r| r.fold == f)
                .filter_map(|r| metric.of(r).map(|v| (r.epoch as f64, v)))
                .collect(),
        })
        .collect()
}

/// Per-epoch mean over folds; epochs missing a value in any fold are skipped.
pub fn mean_series(label: &str, records: &[EpochRecord], metric: Metric) -> Series {
    let mut by_epoch: std::collections::BTreeMap<usize, Vec<Option<f64>>> = Default::default();
    for r in records {
        by_epoch.entry(r.epoch).or_default().push(metric.of(r));
    }
    let points = by_epoch
        .into_iter()
        .filter_map(|(epoch, vals)| {
            let vals: Option<Vec<f64>> = vals.into_iter().collect();
            vals.map(|v| (epoch as f64, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect();
    Series {
        label: label.to_string(),
        points,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv` and `mae.svg`, `rmse.svg`, `r2.svg` with one curve
/// per fold. The R² chart is omitted when no epoch has a defined R².
pub fn render_curves(report: &MetricsReport, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if report.records.is_empty() {
        return Err(Error::Config("report has no epoch records".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("metrics.csv");
    write(&csv, &records_csv(&report.records))?;
    let mut written = vec![csv];
    for metric in Metric::ALL {
        let series = fold_series(&report.records, metric);
        if metric == Metric::R2 && series.iter().all(|s| s.points.is_empty()) {
            continue;
        }
        let svg = render_svg(metric.label(), metric.label(), &series)?;
        let path = out_dir.join(format!("{}.svg", metric.file_stem()));
        write(&path, &svg)?;
        written.push(path);
    }
    Ok(written)
}

/// Overlays the fold-mean curve of several runs, one chart per metric.
pub fn render_comparison(runs: &[(String, MetricsReport)], out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if runs.is_empty() {
        return Err(Error::Config("no runs to compare".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for metric in Metric::ALL {
        let series: Vec<Series> = runs
            .iter()
            .map(|(label, r)| mean_series(label, &r.records, metric))
            .collect();
        if series.iter().all(|s| s.points.is_empty()) {
            if metric == Metric::R2 {
                continue;
            }
            return Err(Error::Config("runs have no epoch records".into()));
        }
        let svg = render_svg(&format!("{} (mean over folds)", metric.label()), metric.label(), &series)?;
        let path = out_dir.join(format!("compare_{}.svg", metric.file_stem()));
        write(&path, &svg)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(fold: usize, epoch: usize, mae: f64, r2: Option<f64>) -> EpochRecord {
        EpochRecord {
            fold,
            epoch,
            train_loss: 1.0,
            val_mae: mae,
            val_rmse: mae * 1.2,
            val_r2: r2,
        }
    }

    #[test]
    fn one_polyline_per_fold() {
        let records = vec![rec(0, 0, 3.0, None), rec(0, 1, 2.0, None), rec(1, 0, 4.0, None), rec(1, 1, 1.0, None)];
        let svg = render_svg("t", "y", &fold_series(&records, Metric::Mae)).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("fold 1"));
    }

    #[test]
    fn empty_is_an_error() {
        assert!(render_svg("t", "y", &[]).is_err());
        let s = Series {
            label: "a".into(),
            points: vec![],
        };
        assert!(render_svg("t", "y", &[s]).is_err());
    }

    #[test]
    fn mean_series_skips_partial_epochs() {
        let records = vec![rec(0, 0, 2.0, Some(0.5)), rec(1, 0, 4.0, None), rec(0, 1, 1.0, Some(0.7)), rec(1, 1, 3.0, Some(0.9))];
        assert_eq!(mean_series("m", &records, Metric::Mae).points, vec![(0.0, 3.0), (1.0, 2.0)]);
        let r2 = mean_series("m", &records, Metric::R2).points;
        assert_eq!(r2.len(), 1);
        assert!((r2[0].1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn markup_is_escaped() {
        let s = Series {
            label: "<a&b>".into(),
            points: vec![(0.0, 1.0)],
        };
        let svg = render_svg("x", "y", &[s]).unwrap();
        assert!(svg.contains("&lt;a&amp;b&gt;"));
    }
}
