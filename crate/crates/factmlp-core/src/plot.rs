//! Minimal SVG plotting of sweep CSV columns: one polyline per series,
//! plain axes, and a least-squares slope annotation in log-log mode.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{FactError, Result};
use crate::harness::loglog_slope;

#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub x: String,
    pub y: String,
    pub loglog: bool,
    /// Column whose distinct values split the rows into series.
    pub series: Option<String>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| FactError::invalid(format!("column '{name}' not found in CSV header")))
}

/// Read a sweep CSV and emit a standalone SVG. Rows with unparsable or (in
/// log-log mode) non-positive coordinates are skipped; an empty plot is an
/// error.
pub fn emit_plot(csv_path: &Path, spec: &PlotSpec, out_path: &Path) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(csv_path)
        .map_err(|e| FactError::invalid(format!("cannot read CSV: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| FactError::Malformed(format!("CSV header: {e}")))?
        .clone();
    let xi = column_index(&headers, &spec.x)?;
    let yi = column_index(&headers, &spec.y)?;
    let si = match &spec.series {
        Some(name) => Some(column_index(&headers, name)?),
        None => None,
    };

    // series name -> points, in first-seen order.
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| FactError::Malformed(format!("CSV row: {e}")))?;
        let (Some(xs), Some(ys)) = (row.get(xi), row.get(yi)) else {
            continue;
        };
        let (Ok(x), Ok(y)) = (xs.parse::<f64>(), ys.parse::<f64>()) else {
            continue;
        };
        if !x.is_finite() || !y.is_finite() {
            continue;
        }
        if spec.loglog && (x <= 0.0 || y <= 0.0) {
            continue;
        }
        let key = match si {
            Some(i) => row.get(i).unwrap_or("").to_string(),
            None => String::new(),
        };
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push((x, y)),
            None => series.push((key, vec![(x, y)])),
        }
    }
    if series.iter().all(|(_, pts)| pts.is_empty()) || series.is_empty() {
        return Err(FactError::invalid("CSV contains no plottable rows"));
    }

    let all_points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let transform = |v: f64| if spec.loglog { v.log10() } else { v };
    let xs: Vec<f64> = all_points.iter().map(|p| transform(p.0)).collect();
    let ys: Vec<f64> = all_points.iter().map(|p| transform(p.1)).collect();
    let (x_min, x_max) = span(&xs);
    let (y_min, y_max) = span(&ys);
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let tx = (transform(x) - x_min) / (x_max - x_min);
        let ty = (transform(y) - y_min) / (y_max - y_min);
        (
            MARGIN + tx * (WIDTH - 2.0 * MARGIN),
            HEIGHT - MARGIN - ty * (HEIGHT - 2.0 * MARGIN),
        )
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(
        svg,
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    // Axes.
    let _ = writeln!(
        svg,
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\" stroke-width=\"1\"/>",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\" stroke-width=\"1\"/>",
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{x}\" y=\"{y}\" font-size=\"13\" text-anchor=\"middle\">{label}</text>",
        x = WIDTH / 2.0,
        y = HEIGHT - MARGIN / 3.0,
        label = xml_escape(&spec.x)
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{x}\" y=\"{y}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 {x} {y})\">{label}</text>",
        x = MARGIN / 3.0,
        y = HEIGHT / 2.0,
        label = xml_escape(&spec.y)
    );

    for (idx, (name, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = PALETTE[idx % PALETTE.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut coords = String::new();
        for (x, y) in &sorted {
            let (px, py) = to_px(*x, *y);
            let _ = write!(coords, "{px:.2},{py:.2} ");
        }
        let _ = writeln!(
            svg,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            coords.trim_end()
        );
        let label = if name.is_empty() { &spec.y } else { name };
        let _ = writeln!(
            svg,
            "  <text x=\"{x}\" y=\"{y}\" font-size=\"12\" fill=\"{color}\">{}</text>",
            xml_escape(label),
            x = WIDTH - MARGIN + 4.0,
            y = MARGIN + 16.0 * idx as f64,
        );
    }

    if spec.loglog {
        let slope = loglog_slope(&all_points)?;
        let _ = writeln!(
            svg,
            "  <text x=\"{x}\" y=\"{y}\" font-size=\"13\" data-slope=\"{slope:.4}\">slope {slope:.4}</text>",
            x = MARGIN + 8.0,
            y = MARGIN - 8.0,
        );
    }
    let _ = writeln!(svg, "</svg>");
    std::fs::write(out_path, svg)?;
    Ok(())
}

fn span(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        // Degenerate span: pad so the single value sits mid-plot.
        lo -= 0.5;
        hi += 0.5;
    }
    (lo, hi)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
