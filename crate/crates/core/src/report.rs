//! CSV tables and standalone SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::exact_gp::TraceRow;
use crate::grid::GridFunction;
use crate::io::IoError;
use crate::pipeline::SweepRow;

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IoError::file(path, io),
        other => IoError::file(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| IoError::file(path, e))
}

/// Loss trace of both phases: one row per likelihood epoch (the value after
/// the update) followed by one row per dual descent epoch. `primal_loss`
/// holds the NLL in the first phase.
pub fn trace_rows(init: &[TraceRow], sdd: &[TraceRow]) -> Vec<TraceRow> {
    let init_rows = init.iter().skip(1);
    let epochs = init.len().saturating_sub(1);
    let mut out: Vec<TraceRow> = init_rows.copied().collect();
    out.extend(sdd.iter().enumerate().map(|(i, r)| TraceRow {
        step: epochs + i + 1,
        ..*r
    }));
    out
}

pub fn write_trace_csv(path: &Path, init: &[TraceRow], sdd: &[TraceRow]) -> Result<(), IoError> {
    let rows = trace_rows(init, sdd).into_iter().map(|r| {
        vec![
            r.step.to_string(),
            r.loss.to_string(),
            r.grad_norm.to_string(),
            format!("{:.3}", r.wall_ms),
        ]
    });
    write_csv(path, &["step", "primal_loss", "grad_norm", "wall_ms"], rows)
}

/// Per-sample relative L2 errors.
pub fn write_errors_csv(path: &Path, rel_l2: &[f64]) -> Result<(), IoError> {
    let rows = rel_l2
        .iter()
        .enumerate()
        .map(|(i, e)| vec![i.to_string(), e.to_string()]);
    write_csv(path, &["sample", "rel_l2"], rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), IoError> {
    let rows = rows
        .iter()
        .map(|r| vec![r.axis_value.to_string(), r.seed.to_string(), r.rel_l2.to_string()]);
    write_csv(path, &["axis_value", "seed", "rel_l2"], rows)
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        let pad = 0.05 * (y1 - y0).max(1e-12);
        Frame {
            x0,
            x1: if x1 > x0 { x1 } else { x0 + 1.0 },
            y0: y0 - pad,
            y1: y1 + pad,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }

    fn axes(&self, out: &mut String, xlabel: &str) {
        let _ = write!(
            out,
            r##"<rect x="{m}" y="{m}" width="{w}" height="{h}" fill="none" stroke="#444"/>"##,
            m = MARGIN,
            w = W - 2.0 * MARGIN,
            h = H - 2.0 * MARGIN
        );
        for (v, anchor, x, y) in [
            (self.x0, "start", MARGIN, H - MARGIN + 16.0),
            (self.x1, "end", W - MARGIN, H - MARGIN + 16.0),
        ] {
            let _ = write!(
                out,
                r#"<text x="{x}" y="{y}" font-size="11" text-anchor="{anchor}">{v:.3}</text>"#
            );
        }
        for (v, y) in [(self.y0, H - MARGIN), (self.y1, MARGIN + 10.0)] {
            let _ = write!(
                out,
                r#"<text x="{x}" y="{y}" font-size="11" text-anchor="end">{v:.3}</text>"#,
                x = MARGIN - 4.0
            );
        }
        let _ = write!(
            out,
            r#"<text x="{x}" y="{y}" font-size="12" text-anchor="middle">{xlabel}</text>"#,
            x = W / 2.0,
            y = H - 10.0
        );
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
}

fn polyline(frame: &Frame, xs: &[f64], ys: &[f64], style: &str) -> String {
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x), frame.py(*y)))
        .collect();
    format!(r#"<polyline fill="none" {style} points="{}"/>"#, pts.join(" "))
}

fn svg(body: &str) -> String {
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">{body}</svg>
"#
    )
}

/// Truth, predictive mean and an optional band for a single-channel 1D
/// field.
pub fn line_plot_svg(
    truth: &GridFunction,
    mean: &GridFunction,
    band: Option<(&GridFunction, &GridFunction)>,
) -> String {
    let xs: Vec<f64> = truth.coordinates().iter().map(|c| c[0]).collect();
    let t = truth.channel(0);
    let m = mean.channel(0);
    let mut ys: Vec<f64> = t.iter().chain(m).copied().collect();
    if let Some((lo, hi)) = band {
        ys.extend(lo.channel(0));
        ys.extend(hi.channel(0));
    }
    let frame = Frame::new(xs.iter().copied(), ys.iter().copied());
    let mut body = String::new();
    if let Some((lo, hi)) = band {
        let upper: Vec<String> = xs
            .iter()
            .zip(hi.channel(0))
            .map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x), frame.py(*y)))
            .collect();
        let lower: Vec<String> = xs
            .iter()
            .zip(lo.channel(0))
            .rev()
            .map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x), frame.py(*y)))
            .collect();
        let _ = write!(
            body,
            r##"<polygon fill="#9ecae1" fill-opacity="0.6" stroke="none" points="{} {}"/>"##,
            upper.join(" "),
            lower.join(" ")
        );
    }
    body += &polyline(&frame, &xs, t, r##"stroke="#000" stroke-width="1.5""##);
    body += &polyline(
        &frame,
        &xs,
        m,
        r##"stroke="#d62728" stroke-width="1.5" stroke-dasharray="5,3""##,
    );
    frame.axes(&mut body, "x");
    let _ = write!(
        body,
        r##"<text x="{x}" y="20" font-size="12">truth (black), mean (red){}</text>"##,
        if band.is_some() { ", band (blue)" } else { "" },
        x = MARGIN
    );
    svg(&body)
}

/// Side-by-side heat maps of single-channel 2D fields sharing one colour
/// scale per panel.
pub fn heatmap_svg(panels: &[(&str, &GridFunction)]) -> String {
    let gap = 16.0;
    let size = (W - gap * (panels.len() as f64 + 1.0)) / panels.len().max(1) as f64;
    let mut body = String::new();
    for (p, (title, f)) in panels.iter().enumerate() {
        let (ny, nx) = (f.dims()[0], f.dims()[1]);
        let v = f.channel(0);
        let (lo, hi) = bounds(v.iter().copied());
        let span = if hi > lo { hi - lo } else { 1.0 };
        let ox = gap + p as f64 * (size + gap);
        let oy = 40.0;
        let (cw, ch) = (size / nx as f64, size / ny as f64);
        for i in 0..ny {
            for j in 0..nx {
                let s = (v[i * nx + j] - lo) / span;
                let r = (255.0 * s) as u8;
                let b = (255.0 * (1.0 - s)) as u8;
                let _ = write!(
                    body,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({r},64,{b})"/>"#,
                    ox + j as f64 * cw,
                    oy + (ny - 1 - i) as f64 * ch,
                    cw + 0.3,
                    ch + 0.3
                );
            }
        }
        let _ = write!(
            body,
            r#"<text x="{x:.1}" y="28" font-size="12" text-anchor="middle">{title} [{lo:.3}, {hi:.3}]</text>"#,
            x = ox + size / 2.0
        );
    }
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{h}" viewBox="0 0 {W} {h}" font-family="sans-serif">{body}</svg>
"#,
        h = size + 60.0
    )
}

/// Median error with min-max whiskers against the swept count.
pub fn sweep_svg(summary: &[(usize, f64, f64, f64)], axis: &str) -> String {
    let xs: Vec<f64> = summary.iter().map(|s| s.0 as f64).collect();
    let ys: Vec<f64> = summary.iter().flat_map(|s| [s.2, s.3]).collect();
    let frame = Frame::new(xs.iter().copied(), ys.iter().copied());
    let mut body = String::new();
    for &(v, _, lo, hi) in summary {
        let x = frame.px(v as f64);
        let _ = write!(
            body,
            r##"<line x1="{x:.2}" x2="{x:.2}" y1="{:.2}" y2="{:.2}" stroke="#1f77b4"/>"##,
            frame.py(lo),
            frame.py(hi)
        );
    }
    let med: Vec<f64> = summary.iter().map(|s| s.1).collect();
    body += &polyline(&frame, &xs, &med, r##"stroke="#1f77b4" stroke-width="2""##);
    for (x, y) in xs.iter().zip(&med) {
        let _ = write!(
            body,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##,
            frame.px(*x),
            frame.py(*y)
        );
    }
    frame.axes(&mut body, axis);
    let _ = write!(
        body,
        r#"<text x="{MARGIN}" y="20" font-size="12">relative L2 error: median and range over seeds</text>"#
    );
    svg(&body)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|e| IoError::file(path, e))
}
