//! Static plot emission: hand-written SVG line charts with fixed styling,
//! byte-stable for identical inputs. Inputs are dispatched on their
//! header: SFT loss logs, RFT metric logs, eval reports (score vs steps),
//! and latency sidecars (score vs latency).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::eval::EvalReport;
use super::PipelineError;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 52.0;
const PALETTE: [&str; 4] = ["#1f6fb2", "#c23b22", "#3a7d44", "#8e6bb5"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

fn tick_label(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Minimal multi-series line chart.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            xs.push(x);
            ys.push(y);
        }
    }
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let px = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min).max(1e-12) * (WIDTH - MARGIN_L - MARGIN_R);
    let py =
        |y: f64| HEIGHT - MARGIN_B - (y - y_min) / (y_max - y_min).max(1e-12) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"15\" text-anchor=\"middle\">{title}</text>",
        WIDTH / 2.0
    );

    // Axes and ticks.
    let _ = writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B),
        fmt(WIDTH - MARGIN_R),
        fmt(HEIGHT - MARGIN_B)
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B)
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x_min + f * (x_max - x_min);
        let yv = y_min + f * (y_max - y_min);
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            fmt(px(xv)),
            fmt(HEIGHT - MARGIN_B + 16.0),
            tick_label(xv)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            fmt(MARGIN_L - 6.0),
            fmt(py(yv) + 4.0),
            tick_label(yv)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>",
            fmt(MARGIN_L),
            fmt(py(yv)),
            fmt(WIDTH - MARGIN_R),
            fmt(py(yv))
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>",
        fmt((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        fmt(HEIGHT - 12.0)
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>",
        fmt((MARGIN_T + HEIGHT - MARGIN_B) / 2.0),
        fmt((MARGIN_T + HEIGHT - MARGIN_B) / 2.0)
    );

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut d = String::new();
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{} {} ", fmt(px(x)), fmt(py(y)));
        }
        let _ = writeln!(svg, "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>", d.trim_end());
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>",
                fmt(px(x)),
                fmt(py(y))
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{}</text>",
            fmt(WIDTH - MARGIN_R - 150.0),
            fmt(MARGIN_T + 16.0 * si as f64),
            s.name
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(vals: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_csv(path: &Path) -> Result<Csv, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or_else(|| PipelineError::Parse {
        file: path.display().to_string(),
        line: 1,
        what: "empty file".into(),
    })?;
    let header: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| PipelineError::Parse {
            file: path.display().to_string(),
            line: lineno + 1,
            what: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(Csv { header, rows })
}

impl Csv {
    fn column(&self, name: &str, file: &Path) -> Result<Vec<f64>, PipelineError> {
        let idx = self.header.iter().position(|h| h == name).ok_or_else(|| {
            PipelineError::Parse {
                file: file.display().to_string(),
                line: 1,
                what: format!("missing column `{name}`"),
            }
        })?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }
}

/// Dispatch inputs on their content and emit every derivable chart into
/// `out_dir`. Returns the paths written.
pub fn cmd_plot(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut latency_by_steps: Vec<(f64, f64)> = Vec::new();

    for path in inputs {
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("input");
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
            let report: EvalReport = serde_json::from_str(&text).map_err(|e| {
                PipelineError::Parse { file: path.display().to_string(), line: 1, what: e.to_string() }
            })?;
            reports.push(report);
            continue;
        }
        let csv = read_csv(path)?;
        if csv.header.first().map(String::as_str) == Some("epoch") {
            let epochs = csv.column("epoch", path)?;
            let gen = csv.column("gen_loss", path)?;
            let refine = csv.column("refine_loss", path)?;
            let svg = line_chart(
                &format!("training loss ({name})"),
                "epoch",
                "loss",
                &[
                    Series { name: "generation".into(), points: zip(&epochs, &gen) },
                    Series { name: "refinement".into(), points: zip(&epochs, &refine) },
                ],
            );
            written.push(write_svg(out_dir, "training_curve.svg", &svg)?);
        } else if csv.header.first().map(String::as_str) == Some("step") {
            let steps = csv.column("step", path)?;
            let mean_r = csv.column("mean_r", path)?;
            let refined = csv.column("mean_r_refined", path)?;
            let svg = line_chart(
                &format!("reward during fine-tuning ({name})"),
                "step",
                "mean score",
                &[
                    Series { name: "rollout".into(), points: zip(&steps, &mean_r) },
                    Series { name: "refined".into(), points: zip(&steps, &refined) },
                ],
            );
            written.push(write_svg(out_dir, "reward_curve.svg", &svg)?);
        } else if csv.header.first().map(String::as_str) == Some("scene_index") {
            let steps = csv.column("steps", path)?;
            let lat = csv.column("latency_s", path)?;
            if !steps.is_empty() {
                let mut sorted = lat.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let median = sorted[sorted.len() / 2];
                latency_by_steps.push((steps[0], median));
            }
        } else {
            return Err(PipelineError::Parse {
                file: path.display().to_string(),
                line: 1,
                what: format!("unrecognized header `{}`", csv.header.join(",")),
            });
        }
    }

    if reports.len() >= 2 {
        let mut pts: Vec<(f64, f64)> =
            reports.iter().map(|r| (r.steps as f64, r.mean_pdms)).collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let svg = line_chart(
            "score vs sampling steps",
            "steps",
            "mean score",
            &[Series { name: "score".into(), points: pts.clone() }],
        );
        written.push(write_svg(out_dir, "score_vs_steps.svg", &svg)?);

        if !latency_by_steps.is_empty() {
            latency_by_steps.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let score_by_steps: std::collections::BTreeMap<i64, f64> =
                pts.iter().map(|&(s, p)| (s as i64, p)).collect();
            let pairs: Vec<(f64, f64)> = latency_by_steps
                .iter()
                .filter_map(|&(s, lat)| score_by_steps.get(&(s as i64)).map(|&p| (lat, p)))
                .collect();
            if pairs.len() >= 2 {
                let svg = line_chart(
                    "score vs median latency",
                    "median latency (s)",
                    "mean score",
                    &[Series { name: "score".into(), points: pairs }],
                );
                written.push(write_svg(out_dir, "score_vs_latency.svg", &svg)?);
            }
        }
    }

    Ok(written)
}

fn zip(xs: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    xs.iter().copied().zip(ys.iter().copied()).collect()
}

fn write_svg(out_dir: &Path, name: &str, svg: &str) -> Result<PathBuf, PipelineError> {
    let path = out_dir.join(name);
    std::fs::write(&path, svg).map_err(|e| PipelineError::io(&path, e))?;
    Ok(path)
}
