//! SVG line charts and heatmaps from CSV tables.
//!
//! A table whose columns are `(x, y, fraction)` is drawn as a heatmap with
//! one `<rect>` per row; anything else becomes a line chart with the first
//! column on the x axis and one series per other numeric column, each data
//! point drawn as a `<circle>`.

use std::fmt::Write as _;
use std::path::Path;

use crate::run::{usage, CliResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 30.0, 40.0, 60.0); // left, right, top, bottom
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| usage(format!("bad CSV header in {}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .map_err(|e| usage(format!("bad CSV row in {}: {e}", path.display())))?;
        Ok(Self { headers, rows })
    }

    fn numeric_column(&self, c: usize) -> Option<Vec<Option<f64>>> {
        let vals: Vec<Option<f64>> = self
            .rows
            .iter()
            .map(|r| r.get(c).and_then(|s| s.trim().parse::<f64>().ok()).filter(|v| v.is_finite()))
            .collect();
        let all_numeric_or_na = self
            .rows
            .iter()
            .zip(&vals)
            .all(|(r, v)| v.is_some() || r.get(c).is_some_and(|s| s.trim() == "NA"));
        (all_numeric_or_na && vals.iter().any(Option::is_some)).then_some(vals)
    }

    fn is_heatmap(&self) -> bool {
        self.headers.len() == 3 && self.headers[2] == "fraction"
    }
}

pub fn render(table: &Table, title: &str) -> CliResult<String> {
    if table.rows.is_empty() {
        return Err(usage("CSV has no data rows"));
    }
    if table.is_heatmap() {
        heatmap(table, title)
    } else {
        line_chart(table, title)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
    s
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Self { x: widen(x), y: widen(y) }
    }

    fn px(&self, x: f64) -> f64 {
        let (l, r, _, _) = MARGIN;
        l + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - l - r)
    }

    fn py(&self, y: f64) -> f64 {
        let (_, _, t, b) = MARGIN;
        HEIGHT - b - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - t - b)
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn axes(s: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (l, r, t, b) = MARGIN;
    let _ = writeln!(
        s,
        "<g stroke=\"black\"><line x1=\"{l}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y0:.2}\"/><line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{y0:.2}\"/></g>",
        y0 = HEIGHT - b,
        x1 = WIDTH - r
    );
    for k in 0..=4 {
        let fx = f.x.0 + (f.x.1 - f.x.0) * k as f64 / 4.0;
        let fy = f.y.0 + (f.y.1 - f.y.0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            f.px(fx),
            HEIGHT - b + 16.0,
            fmt_tick(fx)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            l - 6.0,
            f.py(fy) + 4.0,
            fmt_tick(fy)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
        (l + WIDTH - r) / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
        (t + HEIGHT - b) / 2.0,
        (t + HEIGHT - b) / 2.0,
        escape(y_label)
    );
}

fn min_max(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

fn line_chart(table: &Table, title: &str) -> CliResult<String> {
    let (x_label, xs): (String, Vec<Option<f64>>) = match table.numeric_column(0) {
        Some(x) => (table.headers[0].clone(), x),
        None => ("row".into(), (0..table.rows.len()).map(|i| Some(i as f64)).collect()),
    };
    let series: Vec<(usize, Vec<Option<f64>>)> = (1..table.headers.len())
        .filter_map(|c| table.numeric_column(c).map(|v| (c, v)))
        .collect();
    if series.is_empty() {
        return Err(usage("CSV has no numeric series to plot"));
    }
    let points = |v: &Vec<Option<f64>>| -> Vec<(f64, f64)> {
        xs.iter().zip(v).filter_map(|(x, y)| Some(((*x)?, (*y)?))).collect()
    };
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, v)| points(v)).collect();
    let frame = Frame::new(
        min_max(all.iter().map(|p| p.0)).unwrap_or((0.0, 1.0)),
        min_max(all.iter().map(|p| p.1)).unwrap_or((0.0, 1.0)),
    );
    let y_label = if series.len() == 1 { table.headers[series[0].0].as_str() } else { "value" };
    let mut s = header(title);
    axes(&mut s, &frame, &x_label, y_label);
    for (k, (c, v)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts = points(v);
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))).collect();
        let _ = writeln!(
            s,
            "<g class=\"series\" data-column=\"{}\"><polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            escape(&table.headers[*c]),
            path.join(" ")
        );
        for &(x, y) in &pts {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                frame.px(x),
                frame.py(y)
            );
        }
        s.push_str("</g>\n");
        let ly = MARGIN.2 + 14.0 * k as f64;
        let lx = WIDTH - MARGIN.1 - 140.0;
        let _ = writeln!(
            s,
            "<text x=\"{lx:.2}\" y=\"{ly:.2}\" fill=\"{color}\">{}</text>",
            escape(&table.headers[*c])
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// White to dark blue over `[0, 1]`.
fn heat_color(v: f64) -> String {
    let t = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

fn heatmap(table: &Table, title: &str) -> CliResult<String> {
    let cols: Vec<Vec<Option<f64>>> = (0..3)
        .map(|c| table.numeric_column(c).ok_or_else(|| usage(format!("heatmap column {} is not numeric", table.headers[c]))))
        .collect::<CliResult<_>>()?;
    let cells: Vec<(f64, f64, f64)> = (0..table.rows.len())
        .filter_map(|i| Some((cols[0][i]?, cols[1][i]?, cols[2][i]?)))
        .collect();
    let distinct = |k: usize| {
        let mut v: Vec<f64> = cells.iter().map(|c| if k == 0 { c.0 } else { c.1 }).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let (xs, ys) = (distinct(0), distinct(1));
    let (l, r, t, b) = MARGIN;
    let cw = (WIDTH - l - r) / xs.len() as f64;
    let ch = (HEIGHT - t - b) / ys.len() as f64;
    let mut s = header(title);
    for &(x, y, v) in &cells {
        let i = xs.iter().position(|&q| q == x).unwrap_or(0);
        let j = ys.iter().position(|&q| q == y).unwrap_or(0);
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cw:.2}\" height=\"{ch:.2}\" fill=\"{}\" stroke=\"white\" stroke-width=\"0.5\"><title>{}={}, {}={}: {}</title></rect>",
            l + i as f64 * cw,
            HEIGHT - b - (j + 1) as f64 * ch,
            heat_color(v),
            escape(&table.headers[0]),
            fmt_tick(x),
            escape(&table.headers[1]),
            fmt_tick(y),
            fmt_tick(v)
        );
    }
    let every = |n: usize| n.div_ceil(8).max(1);
    for (i, x) in xs.iter().enumerate().step_by(every(xs.len())) {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            l + (i as f64 + 0.5) * cw,
            HEIGHT - b + 16.0,
            fmt_tick(*x)
        );
    }
    for (j, y) in ys.iter().enumerate().step_by(every(ys.len())) {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            l - 6.0,
            HEIGHT - b - (j as f64 + 0.5) * ch + 4.0,
            fmt_tick(*y)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
        (l + WIDTH - r) / 2.0,
        HEIGHT - 16.0,
        escape(&table.headers[0])
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{0:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0:.2})\">{1}</text>",
        (t + HEIGHT - b) / 2.0,
        escape(&table.headers[1])
    );
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(headers: &[&str], rows: &[&[&str]]) -> Table {
        Table {
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
        }
    }

    #[test]
    fn one_circle_per_point_and_na_skipped() {
        let t = table(&["t", "a", "b"], &[&["0", "1", "NA"], &["1", "2", "3"], &["2", "4", "5"]]);
        let svg = render(&t, "x").unwrap();
        assert_eq!(svg.matches("<circle").count(), 5);
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn non_numeric_columns_are_ignored() {
        let t = table(&["axis", "bin", "count", "phase"], &[&["x", "0", "3", "pre"], &["x", "1", "4", "post"]]);
        let svg = render(&t, "h").unwrap();
        assert_eq!(svg.matches("<circle").count(), 4);
    }

    #[test]
    fn heatmap_has_one_rect_per_cell() {
        let t = table(
            &["rotation_deg", "translation", "fraction"],
            &[&["0", "0", "0"], &["0", "0.1", "0.5"], &["5", "0", "0.5"], &["5", "0.1", "1"]],
        );
        let svg = render(&t, "h").unwrap();
        // One background rect plus the cells.
        assert_eq!(svg.matches("<rect").count(), 5);
        assert!(svg.contains(&heat_color(1.0)));
    }

    #[test]
    fn empty_or_textual_tables_fail() {
        assert!(render(&table(&["a", "b"], &[]), "").is_err());
        assert!(render(&table(&["a", "b"], &[&["x", "y"]]), "").is_err());
    }
}
