//! Metric-log plotting: reads the trainer's columnar logs, aggregates
//! multiple seeds per algorithm into a mean curve with a 25%-75% quartile
//! band, and renders the comparison as a standalone SVG file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{FamError, Result};

/// One parsed columnar log (header + numeric rows).
#[derive(Debug, Clone)]
pub struct MetricLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricLog {
    pub fn column_index(&self, key: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == key)
            .ok_or_else(|| FamError::Input(format!("metric log has no column '{key}'")))
    }

    pub fn column(&self, key: &str) -> Result<Vec<f64>> {
        let idx = self.column_index(key)?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }
}

/// Parse a tab-separated log with a one-line header.
pub fn read_metric_log(path: &Path) -> Result<MetricLog> {
    let text = fs::read_to_string(path)
        .map_err(|e| FamError::Input(format!("read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| FamError::Input(format!("{}: empty log", path.display())))?;
    let columns: Vec<String> = header.split('\t').map(str::to_string).collect();
    let mut rows = vec![];
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split('\t')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| FamError::Input(format!("{}: bad number '{v}' on row {}", path.display(), i + 1)))
            })
            .collect::<Result<_>>()?;
        if row.len() != columns.len() {
            return Err(FamError::Input(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                i + 1,
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok(MetricLog { columns, rows })
}

/// Linear-interpolation percentile of an unsorted sample, q in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.len() == 1 {
        return v[0];
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] + frac * (v[hi] - v[lo])
}

/// One named group of seed logs, aggregated into a band.
#[derive(Debug, Clone)]
pub struct SeriesGroup {
    pub name: String,
    pub logs: Vec<MetricLog>,
}

/// Aggregated curve: per step, mean and 25/75 percentiles across logs.
#[derive(Debug, Clone)]
pub struct BandCurve {
    pub name: String,
    pub steps: Vec<f64>,
    pub mean: Vec<f64>,
    pub q25: Vec<f64>,
    pub q75: Vec<f64>,
}

/// Aggregate a group on one metric column; logs must agree on columns and
/// the shared prefix of step values.
pub fn aggregate(group: &SeriesGroup, key: &str) -> Result<BandCurve> {
    if group.logs.is_empty() {
        return Err(FamError::Input(format!("series '{}' has no logs", group.name)));
    }
    let columns = &group.logs[0].columns;
    for log in &group.logs[1..] {
        if &log.columns != columns {
            return Err(FamError::Input(format!(
                "series '{}': logs have mismatched columns",
                group.name
            )));
        }
    }
    let n_rows = group
        .logs
        .iter()
        .map(|l| l.rows.len())
        .min()
        .unwrap();
    if n_rows == 0 {
        return Err(FamError::Input(format!("series '{}' has an empty log", group.name)));
    }
    let step_cols: Vec<Vec<f64>> = group
        .logs
        .iter()
        .map(|l| l.column("step"))
        .collect::<Result<_>>()?;
    for sc in &step_cols[1..] {
        if sc[..n_rows] != step_cols[0][..n_rows] {
            return Err(FamError::Input(format!(
                "series '{}': logs disagree on step values",
                group.name
            )));
        }
    }
    let value_cols: Vec<Vec<f64>> = group
        .logs
        .iter()
        .map(|l| l.column(key))
        .collect::<Result<_>>()?;

    let mut mean = Vec::with_capacity(n_rows);
    let mut q25 = Vec::with_capacity(n_rows);
    let mut q75 = Vec::with_capacity(n_rows);
    for t in 0..n_rows {
        let sample: Vec<f64> = value_cols.iter().map(|c| c[t]).collect();
        mean.push(sample.iter().sum::<f64>() / sample.len() as f64);
        q25.push(percentile(&sample, 0.25));
        q75.push(percentile(&sample, 0.75));
    }
    Ok(BandCurve {
        name: group.name.clone(),
        steps: step_cols[0][..n_rows].to_vec(),
        mean,
        q25,
        q75,
    })
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

const W: f64 = 720.0;
const H: f64 = 480.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 30.0;
const MB: f64 = 50.0;

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Render aggregated curves to a standalone SVG file.
pub fn render_svg(curves: &[BandCurve], key: &str, out: &Path) -> Result<()> {
    if curves.is_empty() {
        return Err(FamError::Input("nothing to plot".into()));
    }
    let all_x: Vec<f64> = curves.iter().flat_map(|c| c.steps.iter().copied()).collect();
    let all_y: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.q25.iter().chain(c.q75.iter()).chain(c.mean.iter()).copied())
        .filter(|v| v.is_finite())
        .collect();
    if all_y.is_empty() {
        return Err(FamError::Input(format!("column '{key}' has no finite values")));
    }
    let (x0, x1) = all_x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (mut y0, mut y1) = all_y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if y0 == y1 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| {
        if x1 == x0 {
            ML + (W - ML - MR) / 2.0
        } else {
            ML + (x - x0) / (x1 - x0) * (W - ML - MR)
        }
    };
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    // axes
    writeln!(
        svg,
        r#"<line x1="{ML}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - MB,
        W - MR,
        H - MB
    )
    .unwrap();
    writeln!(svg, r#"<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{}" stroke="black"/>"#, H - MB).unwrap();
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            sx(fx),
            H - MB + 16.0,
            fmt_tick(fx)
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
            ML - 6.0,
            sy(fy) + 4.0,
            fmt_tick(fy)
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">step</text>"#,
        (ML + W - MR) / 2.0,
        H - 12.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">{key}</text>"#,
        16.0,
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    )
    .unwrap();

    for (ci, curve) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        // quartile band: upper edge forward, lower edge back
        let mut band = String::from("M");
        for (x, y) in curve.steps.iter().zip(curve.q75.iter()) {
            write!(band, " {:.2},{:.2}", sx(*x), sy(*y)).unwrap();
        }
        for (x, y) in curve.steps.iter().rev().zip(curve.q25.iter().rev()) {
            write!(band, " L {:.2},{:.2}", sx(*x), sy(*y)).unwrap();
        }
        band.push_str(" Z");
        writeln!(svg, r#"<path d="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#).unwrap();

        let pts: Vec<String> = curve
            .steps
            .iter()
            .zip(curve.mean.iter())
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
            pts.join(" ")
        )
        .unwrap();
        // legend
        let ly = MT + 16.0 * ci as f64;
        writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
            ML + 10.0,
            ML + 34.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12">{}</text>"#,
            ML + 40.0,
            ly + 4.0,
            curve.name
        )
        .unwrap();
    }
    writeln!(svg, "</svg>").unwrap();
    fs::write(out, svg).map_err(FamError::Io)?;
    Ok(())
}

/// Aggregate every group on `key` and render one comparison figure.
pub fn plot_groups(groups: &[SeriesGroup], key: &str, out: &Path) -> Result<Vec<BandCurve>> {
    let curves: Vec<BandCurve> = groups
        .iter()
        .map(|g| aggregate(g, key))
        .collect::<Result<_>>()?;
    render_svg(&curves, key, out)?;
    Ok(curves)
}
