use std::fmt::Write;
use std::fs;
use std::path::Path;

use super::train::csv_error;
use crate::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

/// A named column of values.
pub type Series = (String, Vec<f64>);

/// Numeric columns of a CSV: the first is the x axis, every other fully
/// numeric column becomes a series.
pub fn read_series(path: &Path) -> Result<(String, Vec<f64>, Vec<Series>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    if headers.len() < 2 || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::format(path, 0, "need a header with at least two columns"));
    }
    let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); headers.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for (c, v) in cols.iter_mut().zip(rec.iter()) {
            c.push(v.trim().parse::<f64>().ok().filter(|x| x.is_finite()));
        }
    }
    if cols[0].is_empty() {
        return Err(Error::format(path, 0, "no data rows"));
    }
    let x: Vec<f64> = cols[0]
        .iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::format(path, 0, format!("row {} has a non-numeric x value", i + 1))))
        .collect::<Result<_>>()?;
    let series: Vec<(String, Vec<f64>)> = headers
        .iter()
        .zip(&cols)
        .skip(1)
        .filter_map(|(h, c)| c.iter().copied().collect::<Option<Vec<f64>>>().map(|v| (h.clone(), v)))
        .collect();
    if series.is_empty() {
        return Err(Error::format(path, 0, "no numeric series to plot"));
    }
    Ok((headers[0].clone(), x, series))
}

/// Static SVG with one polyline per series.
pub fn render_svg(x_label: &str, x: &[f64], series: &[Series]) -> String {
    let span = |v: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (x0, x1) = span(&mut x.iter().copied());
    let (y0, y1) = span(&mut series.iter().flat_map(|(_, v)| v.iter().copied()));
    let px = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |v: f64| HEIGHT - MARGIN - (v - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(s, r#"<text x="4" y="{}" font-size="10">{y1:.4}</text>"#, MARGIN);
    let _ = writeln!(s, r#"<text x="4" y="{}" font-size="10">{y0:.4}</text>"#, HEIGHT - MARGIN);
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = x.iter().zip(ys).map(|(a, b)| format!("{:.2},{:.2}", px(*a), py(*b))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 150.0,
            MARGIN + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads a training or evaluation CSV and writes a line plot.
pub fn plot(csv_in: &Path, svg_out: &Path) -> Result<()> {
    let (xl, x, series) = read_series(csv_in)?;
    fs::write(svg_out, render_svg(&xl, &x, &series)).map_err(|e| Error::io(svg_out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rows_give_one_polyline() {
        let dir = tempfile::tempdir().unwrap();
        let (i, o) = (dir.path().join("a.csv"), dir.path().join("a.svg"));
        fs::write(&i, "step,loss\n0,1.0\n1,0.5\n").unwrap();
        plot(&i, &o).unwrap();
        let svg = fs::read_to_string(&o).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        plot(&i, &dir.path().join("b.svg")).unwrap();
        assert_eq!(fs::read(&o).unwrap(), fs::read(dir.path().join("b.svg")).unwrap());
    }

    #[test]
    fn text_columns_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let i = dir.path().join("a.csv");
        fs::write(&i, "seed,setting,median\n0,a,3.5\n1,b,2.0\n").unwrap();
        let (_, x, s) = read_series(&i).unwrap();
        assert_eq!(x, vec![0.0, 1.0]);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn malformed_input_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let i = dir.path().join("a.csv");
        let o = dir.path().join("a.svg");
        for bad in ["", "step,loss\n", "step,loss\nx,1\n", "step,loss\n0,1\n1\n"] {
            fs::write(&i, bad).unwrap();
            assert!(matches!(plot(&i, &o), Err(Error::Format { .. })), "{bad:?}");
        }
    }
}
