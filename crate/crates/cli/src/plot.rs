//! Minimal SVG renderer for training-history curves: cross-entropy loss on
//! top, accuracy below, train dashed and test solid. Output bytes are a
//! pure function of the input rows, which keeps the plot artifact
//! reproducible.

use std::fmt::Write;

pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

const W: f64 = 640.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;

fn polyline(
    out: &mut String,
    rows: &[HistoryRow],
    value: impl Fn(&HistoryRow) -> f64,
    y_top: f64,
    y_range: (f64, f64),
    x_range: (f64, f64),
    color: &str,
    dashed: bool,
) {
    let (lo, hi) = y_range;
    let span = (hi - lo).max(1e-12);
    let mut points = String::new();
    for r in rows {
        let x = MARGIN
            + (r.epoch as f64 - x_range.0) / (x_range.1 - x_range.0).max(1e-12)
                * (W - 2.0 * MARGIN);
        let y = y_top + PANEL_H - MARGIN - (value(r) - lo) / span * (PANEL_H - 2.0 * MARGIN + 16.0);
        let _ = write!(points, "{x:.2},{y:.2} ");
    }
    let dash = if dashed { " stroke-dasharray=\"6 3\"" } else { "" };
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
        points.trim_end()
    );
}

fn bounds(rows: &[HistoryRow], value: impl Fn(&HistoryRow) -> f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in rows {
        lo = lo.min(value(r));
        hi = hi.max(value(r));
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Renders the two stacked panels as an SVG document.
pub fn render_history_svg(rows: &[HistoryRow]) -> String {
    let height = 2.0 * PANEL_H;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" \
         viewBox=\"0 0 {W} {height}\">"
    );
    let _ = writeln!(out, "<rect width=\"{W}\" height=\"{height}\" fill=\"white\"/>");

    if !rows.is_empty() {
        let x_range = (rows[0].epoch as f64, rows[rows.len() - 1].epoch.max(rows[0].epoch + 1) as f64);
        let loss_bounds = {
            let (lo1, hi1) = bounds(rows, |r| r.train_loss);
            let (lo2, hi2) = bounds(rows, |r| r.test_loss);
            (lo1.min(lo2), hi1.max(hi2))
        };
        let acc_bounds = {
            let (lo1, hi1) = bounds(rows, |r| r.train_acc);
            let (lo2, hi2) = bounds(rows, |r| r.test_acc);
            (lo1.min(lo2), hi1.max(hi2))
        };
        polyline(&mut out, rows, |r| r.train_loss, 0.0, loss_bounds, x_range, "#d95f02", true);
        polyline(&mut out, rows, |r| r.test_loss, 0.0, loss_bounds, x_range, "#d95f02", false);
        polyline(&mut out, rows, |r| r.train_acc, PANEL_H, acc_bounds, x_range, "#1b9e77", true);
        polyline(&mut out, rows, |r| r.test_acc, PANEL_H, acc_bounds, x_range, "#1b9e77", false);
    }

    let _ = writeln!(
        out,
        "<text x=\"{MARGIN}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">\
         Cross-entropy loss (dashed: train, solid: test)</text>"
    );
    let _ = writeln!(
        out,
        "<text x=\"{MARGIN}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\">\
         Accuracy (dashed: train, solid: test)</text>",
        PANEL_H + 20.0
    );
    out.push_str("</svg>\n");
    out
}

/// Parses a `history.csv` written by the trainer.
pub fn parse_history_csv(text: &str) -> anyhow::Result<Vec<HistoryRow>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.is_empty() {
            continue; // header
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            anyhow::bail!("history line {}: expected 6 fields, got {}", idx + 1, fields.len());
        }
        rows.push(HistoryRow {
            epoch: fields[0].parse()?,
            train_loss: fields[1].parse()?,
            train_acc: fields[2].parse()?,
            test_loss: fields[3].parse()?,
            test_acc: fields[4].parse()?,
        });
    }
    Ok(rows)
}
