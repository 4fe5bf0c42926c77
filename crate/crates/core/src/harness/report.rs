//! Result tables (CSV) and simple SVG charts.
//!
//! `results.csv` columns: `task, method, seed, fold, lr, steps, reg,
//! target_size, F, val_acc, test_acc, flops_rel_ft, storage_rel_ft,
//! storage_rel_lp`. `fold` is a fold index for per-fold validation rows and
//! `final` for the refit on the whole training split; empty cells mean "not
//! applicable". `summary.csv` holds the per task/method median and standard
//! deviation of test accuracy over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::stats::{median, std_dev};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub fold: String,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub reg: String,
    pub target_size: Option<usize>,
    #[serde(rename = "F")]
    pub fraction: Option<f64>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub flops_rel_ft: Option<f64>,
    pub storage_rel_ft: Option<f64>,
    pub storage_rel_lp: Option<f64>,
}

pub const RESULT_COLUMNS: [&str; 14] = [
    "task",
    "method",
    "seed",
    "fold",
    "lr",
    "steps",
    "reg",
    "target_size",
    "F",
    "val_acc",
    "test_acc",
    "flops_rel_ft",
    "storage_rel_ft",
    "storage_rel_lp",
];

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("csv: {other:?}")),
    }
}

/// Writes rows with a header line; an empty slice gives a header-only file.
pub fn write_rows<W: Write, R: Serialize>(out: W, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    write_rows(out, &RESULT_COLUMNS, rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != RESULT_COLUMNS {
        return Err(Error::format(format!("unexpected results header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub method: String,
    pub seeds: usize,
    pub median_test_acc: f64,
    pub std_test_acc: f64,
    pub median_val_acc: Option<f64>,
    pub flops_rel_ft: Option<f64>,
    pub storage_rel_ft: Option<f64>,
    pub storage_rel_lp: Option<f64>,
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "task",
    "method",
    "seeds",
    "median_test_acc",
    "std_test_acc",
    "median_val_acc",
    "flops_rel_ft",
    "storage_rel_ft",
    "storage_rel_lp",
];

/// Median/std over seeds of the `final` rows, in first-appearance order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.fold == "final" && r.test_acc.is_some()) {
        let key = (r.task.clone(), r.method.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let test: Vec<f64> = g.iter().filter_map(|r| r.test_acc).collect();
            let val: Vec<f64> = g.iter().filter_map(|r| r.val_acc).collect();
            let col = |f: fn(&ResultRow) -> Option<f64>| median(&g.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                task: key.0,
                method: key.1,
                seeds: test.len(),
                median_test_acc: median(&test).unwrap_or(0.0),
                std_test_acc: std_dev(&test).unwrap_or(0.0),
                median_val_acc: median(&val),
                flops_rel_ft: col(|r| r.flops_rel_ft),
                storage_rel_ft: col(|r| r.storage_rel_ft),
                storage_rel_lp: col(|r| r.storage_rel_lp),
            }
        })
        .collect()
}

const PALETTE: [&str; 9] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c", "#ccb974",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    width: f64,
    height: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
}

impl Frame {
    const STD: Frame = Frame {
        width: 720.0,
        height: 360.0,
        left: 60.0,
        right: 160.0,
        top: 40.0,
        bottom: 60.0,
    };

    fn plot_w(&self) -> f64 {
        self.width - self.left - self.right
    }

    fn plot_h(&self) -> f64 {
        self.height - self.top - self.bottom
    }

    fn y(&self, v: f64, lo: f64, hi: f64) -> f64 {
        let span = if hi > lo { hi - lo } else { 1.0 };
        self.top + self.plot_h() * (1.0 - (v - lo) / span)
    }

    fn open(&self, title: &str, y_label: &str, lo: f64, hi: f64) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#,
            w = self.width,
            h = self.height
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
            self.left + self.plot_w() / 2.0,
            escape(title)
        );
        let (x0, y0, y1) = (self.left, self.top + self.plot_h(), self.top);
        let _ = writeln!(
            s,
            r#"<g class="axes" stroke="black"><line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#,
            x0 + self.plot_w()
        );
        for i in 0..=4 {
            let v = lo + (hi - lo) * i as f64 / 4.0;
            let y = self.y(v, lo, hi);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{:.2}</text>"#,
                x0 - 6.0,
                y + 4.0,
                v
            );
        }
        let _ = writeln!(
            s,
            r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            self.top + self.plot_h() / 2.0,
            escape(y_label)
        );
        s
    }

    fn legend(&self, s: &mut String, names: &[&str]) {
        for (i, n) in names.iter().enumerate() {
            let y = self.top + 16.0 * i as f64;
            let x = self.width - self.right + 16.0;
            let _ = writeln!(
                s,
                r#"<g class="legend"><rect x="{x}" y="{y}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text></g>"#,
                PALETTE[i % PALETTE.len()],
                x + 14.0,
                y + 9.0,
                escape(n)
            );
        }
    }
}

fn value_range<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = lo.min(0.0);
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Grouped bars: one group per category, one bar (and legend entry) per series.
pub fn bar_chart_svg(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let f = Frame::STD;
    let (lo, hi) = value_range(series.iter().flat_map(|(_, v)| v.iter()));
    let mut s = f.open(title, y_label, lo, hi);
    let groups = categories.len().max(1) as f64;
    let group_w = f.plot_w() / groups;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (si, (name, values)) in series.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<g class="series" data-name="{}" fill="{}">"#,
            escape(name),
            PALETTE[si % PALETTE.len()]
        );
        for (ci, &v) in values.iter().enumerate().take(categories.len()) {
            let x = f.left + group_w * ci as f64 + group_w * 0.1 + bar_w * si as f64;
            let (ya, yb) = (f.y(v.max(lo), lo, hi), f.y(lo.max(0.0).min(hi), lo, hi));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{bar_w:.1}" height="{:.1}"/>"#,
                ya.min(yb),
                (yb - ya).abs()
            );
        }
        let _ = writeln!(s, "</g>");
    }
    for (ci, c) in categories.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            f.left + group_w * (ci as f64 + 0.5),
            f.top + f.plot_h() + 16.0,
            escape(c)
        );
    }
    f.legend(&mut s, &series.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Polylines over a shared x axis, one per series.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, x: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let f = Frame::STD;
    let (lo, hi) = value_range(series.iter().flat_map(|(_, v)| v.iter()));
    let (xlo, xhi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let xspan = if xhi > xlo { xhi - xlo } else { 1.0 };
    let px = |v: f64| f.left + f.plot_w() * (v - xlo) / xspan;
    let mut s = f.open(title, y_label, lo, hi);
    for (si, (name, values)) in series.iter().enumerate() {
        let pts: Vec<String> = x
            .iter()
            .zip(values)
            .map(|(&a, &b)| format!("{:.1},{:.1}", px(a), f.y(b, lo, hi)))
            .collect();
        let _ = writeln!(
            s,
            r#"<g class="series" data-name="{}"><polyline fill="none" stroke="{}" stroke-width="2" points="{}"/></g>"#,
            escape(name),
            PALETTE[si % PALETTE.len()],
            pts.join(" ")
        );
    }
    for &v in x {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(v),
            f.top + f.plot_h() + 16.0,
            v
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        f.left + f.plot_w() / 2.0,
        f.height - 16.0,
        escape(x_label)
    );
    f.legend(&mut s, &series.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Writes `summary.csv` and `accuracy.svg` for a set of result rows.
pub fn emit_report(rows: &[ResultRow], out_dir: &Path) -> Result<Vec<SummaryRow>> {
    std::fs::create_dir_all(out_dir)?;
    let summary = summarize(rows);
    write_rows(
        std::fs::File::create(out_dir.join("summary.csv"))?,
        &SUMMARY_COLUMNS,
        &summary,
    )?;
    let mut tasks: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for r in &summary {
        if !tasks.contains(&r.task) {
            tasks.push(r.task.clone());
        }
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let series: Vec<(String, Vec<f64>)> = methods
        .iter()
        .map(|m| {
            let v = tasks
                .iter()
                .map(|t| {
                    summary
                        .iter()
                        .find(|r| &r.task == t && &r.method == m)
                        .map_or(0.0, |r| r.median_test_acc)
                })
                .collect();
            (m.clone(), v)
        })
        .collect();
    std::fs::write(
        out_dir.join("accuracy.svg"),
        bar_chart_svg("Median test accuracy", "accuracy", &tasks, &series),
    )?;
    Ok(summary)
}
