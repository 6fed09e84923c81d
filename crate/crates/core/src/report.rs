//! CSV tables and the per-class error bar chart.
//!
//! Numbers are written with 9 significant digits and a `.` decimal separator
//! regardless of locale, so repeated runs produce byte-identical files.

use std::fmt::Write as _;

use crate::drw_schedule::EpochLog;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// 9 significant digits; fixed notation for magnitudes in `[1e-5, 1e9)`.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.8e}")
    }
}

pub const EPOCHS_HEADER: &str = "epoch,lr,stage,mean_loss,train_error";

pub fn epochs_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EPOCHS_HEADER);
    out.push('\n');
    for log in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            log.epoch,
            fmt_num(log.lr),
            log.stage,
            fmt_num(log.mean_loss),
            fmt_num(log.train_error)
        );
    }
    out
}

pub const PER_CLASS_HEADER: &str = "class,error,count";

/// One row per class; `count` is the training count of the class.
pub fn per_class_csv(report: &MetricsReport, train_counts: &[usize]) -> String {
    let mut out = String::from(PER_CLASS_HEADER);
    out.push('\n');
    for (j, err) in report.per_class_error.iter().enumerate() {
        let count = train_counts.get(j).copied().unwrap_or(0);
        let _ = writeln!(out, "{j},{},{count}", fmt_num(*err));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerClassRow {
    pub class: String,
    pub error: f64,
    pub count: usize,
}

pub fn parse_per_class_csv(text: &str) -> Result<Vec<PerClassRow>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or(Error::ParseLine {
                line: 1,
                message: format!("missing column `{name}` in header `{header}`"),
            })
    };
    let (ci, ei, ni) = (find("class")?, find("error")?, find("count")?);
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::ParseLine {
                line: line_no,
                message: format!("expected {} fields, found {}", columns.len(), fields.len()),
            });
        }
        let error: f64 = fields[ei].parse().map_err(|_| Error::ParseLine {
            line: line_no,
            message: format!("bad error value `{}`", fields[ei]),
        })?;
        if !error.is_finite() {
            return Err(Error::ParseLine {
                line: line_no,
                message: format!("error value `{}` is not finite", fields[ei]),
            });
        }
        let count: usize = fields[ni].parse().map_err(|_| Error::ParseLine {
            line: line_no,
            message: format!("bad count `{}`", fields[ni]),
        })?;
        rows.push(PerClassRow {
            class: fields[ci].to_string(),
            error,
            count,
        });
    }
    Ok(rows)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Bar chart of per-class error, classes ordered by descending count.
/// Minority classes (below the geometric midpoint of the counts) are drawn in
/// a second color behind a dashed divider. Each bar is one
/// `<rect class="bar">` element.
pub fn per_class_svg(rows: &[PerClassRow]) -> String {
    const BAR: f64 = 36.0;
    const GAP: f64 = 12.0;
    const LEFT: f64 = 56.0;
    const TOP: f64 = 30.0;
    const PLOT_H: f64 = 240.0;
    const BOTTOM: f64 = 60.0;

    let mut order: Vec<&PerClassRow> = rows.iter().collect();
    order.sort_by_key(|r| std::cmp::Reverse(r.count));
    let max = order.iter().map(|r| r.count).max().unwrap_or(0) as u128;
    let min = order.iter().map(|r| r.count).min().unwrap_or(0) as u128;
    let is_minority = |r: &PerClassRow| (r.count as u128).pow(2) < max * min;

    let width = LEFT + GAP + order.len() as f64 * (BAR + GAP) + 20.0;
    let height = TOP + PLOT_H + BOTTOM;
    let base = TOP + PLOT_H;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#,
        w = width,
        h = height
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">Per-class top-1 error</text>"#,
        width / 2.0
    );
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="#333"/>"##
    );
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" y1="{base}" x2="{}" y2="{base}" stroke="#333"/>"##,
        width - 10.0
    );
    for tick in 0..=4 {
        let v = tick as f64 * 0.25;
        let y = base - v * PLOT_H;
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="#333"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"##,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let mut divider_drawn = false;
    for (i, row) in order.iter().enumerate() {
        let x = LEFT + GAP + i as f64 * (BAR + GAP);
        let minority = is_minority(row);
        if minority && !divider_drawn && i > 0 {
            let dx = x - GAP / 2.0;
            let _ = writeln!(
                s,
                r##"<line x1="{dx}" y1="{TOP}" x2="{dx}" y2="{base}" stroke="#888" stroke-dasharray="4,3"/>"##
            );
            divider_drawn = true;
        }
        let h = row.error.clamp(0.0, 1.0) * PLOT_H;
        let fill = if minority { "#d95f02" } else { "#1b9e77" };
        let label = xml_escape(&row.class);
        let _ = writeln!(
            s,
            r#"<rect class="bar" x="{x}" y="{}" width="{BAR}" height="{h}" fill="{fill}"><title>class {label}: error {}, n={}</title></rect>"#,
            base - h,
            fmt_num(row.error),
            row.count
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="middle">C{label}</text><text x="{}" y="{}" text-anchor="middle" fill="#666">{}</text>"##,
            x + BAR / 2.0,
            base + 16.0,
            x + BAR / 2.0,
            base + 30.0,
            row.count
        );
    }
    s.push_str("</svg>\n");
    s
}
