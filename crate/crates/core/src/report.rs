//! CSV records and SVG charts of experiment results.
//!
//! Every float is written with six significant digits so reruns of the same
//! configuration produce byte-identical files apart from `wall_s`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pursuit::PursuitMode;

pub const RESULTS_HEADER: &str =
    "config_hash,seed,mode,T,epsilon,epoch,clean_acc,robust_acc,objective,coherence,frame_potential,welch_bound,wall_s";
pub const EPOCHS_HEADER: &str = "config_hash,seed,mode,T,epoch,learning_rate,train_loss,train_acc,clean_acc,adv_acc,converged";
pub const TRACES_HEADER: &str = "config_hash,seed,mode,T,layer,iteration,residual,objective";

/// Six significant digits in the style of C's `%g`.
pub fn fmt_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_default()
}

/// One evaluated point of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub mode: PursuitMode,
    pub iterations: usize,
    pub epsilon: f64,
    pub epoch: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    /// Mean global objective of the final codes on clean test inputs.
    pub objective: f64,
    /// Global-dictionary metrics; empty when too large to materialize.
    pub coherence: Option<f64>,
    pub frame_potential: Option<f64>,
    pub welch_bound: Option<f64>,
    pub wall_s: f64,
}

impl RunRecord {
    fn to_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.config_hash,
            self.seed,
            self.mode,
            self.iterations,
            fmt_sig(self.epsilon),
            self.epoch,
            fmt_sig(self.clean_acc),
            fmt_sig(self.robust_acc),
            fmt_sig(self.objective),
            opt(self.coherence),
            opt(self.frame_potential),
            opt(self.welch_bound),
            format!("{:.3}", self.wall_s),
        )
    }
}

pub fn results_csv(records: &[RunRecord]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in records {
        out.push_str(&r.to_row());
        out.push('\n');
    }
    out
}

fn field<T: std::str::FromStr>(cells: &[&str], i: usize, line: usize, name: &str) -> Result<T> {
    cells[i]
        .parse()
        .map_err(|_| Error::Data(format!("line {line}: cannot parse {name} from {:?}", cells[i])))
}

fn opt_field(cells: &[&str], i: usize, line: usize, name: &str) -> Result<Option<f64>> {
    if cells[i].is_empty() {
        Ok(None)
    } else {
        field(cells, i, line, name).map(Some)
    }
}

/// Parses a file written by [`results_csv`].
pub fn read_results_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULTS_HEADER => {}
        other => return Err(Error::Data(format!("unexpected header {other:?}"))),
    }
    let mut out = Vec::new();
    for (k, l) in lines.enumerate() {
        let line = k + 2;
        if l.is_empty() {
            continue;
        }
        let c: Vec<&str> = l.split(',').collect();
        if c.len() != 13 {
            return Err(Error::Data(format!("line {line}: {} fields, expected 13", c.len())));
        }
        let mode: PursuitMode = c[2]
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: unknown mode {:?}", c[2])))?;
        out.push(RunRecord {
            config_hash: c[0].to_string(),
            seed: field(&c, 1, line, "seed")?,
            mode,
            iterations: field(&c, 3, line, "T")?,
            epsilon: field(&c, 4, line, "epsilon")?,
            epoch: field(&c, 5, line, "epoch")?,
            clean_acc: field(&c, 6, line, "clean_acc")?,
            robust_acc: field(&c, 7, line, "robust_acc")?,
            objective: field(&c, 8, line, "objective")?,
            coherence: opt_field(&c, 9, line, "coherence")?,
            frame_potential: opt_field(&c, 10, line, "frame_potential")?,
            welch_bound: opt_field(&c, 11, line, "welch_bound")?,
            wall_s: field(&c, 12, line, "wall_s")?,
        });
    }
    Ok(out)
}

/// Per-epoch training curve of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub config_hash: String,
    pub seed: u64,
    pub mode: PursuitMode,
    pub iterations: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub clean_acc: Option<f64>,
    pub adv_acc: Option<f64>,
    pub converged: bool,
}

pub fn epochs_csv(rows: &[EpochRow]) -> String {
    let mut out = format!("{EPOCHS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.config_hash,
            r.seed,
            r.mode,
            r.iterations,
            r.epoch,
            fmt_sig(r.learning_rate),
            fmt_sig(r.train_loss),
            fmt_sig(r.train_acc),
            opt(r.clean_acc),
            opt(r.adv_acc),
            u8::from(r.converged),
        );
    }
    out
}

/// Mean residual of one layer at one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub config_hash: String,
    pub seed: u64,
    pub mode: PursuitMode,
    pub iterations: usize,
    pub layer: usize,
    pub iteration: usize,
    pub residual: f64,
    /// Mean global objective at this iteration (same for every layer).
    pub objective: f64,
}

pub fn traces_csv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACES_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.config_hash,
            r.seed,
            r.mode,
            r.iterations,
            r.layer,
            r.iteration,
            fmt_sig(r.residual),
            fmt_sig(r.objective),
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Deterministic line chart with markers, five ticks per axis and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (x0, x1) = nice_range(x0, x1);
    let (y0, y1) = nice_range(y0, y1);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{py:.2}" x2="{left}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 5.0,
            left - 8.0,
            py + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for p in &path {
            let (cx, cy) = p.split_once(',').expect("pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    let r = (v * 1e4).round() / 1e4;
    fmt_sig(if r == 0.0 { 0.0 } else { r })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
