//! Static SVG figures written next to the CSV files they are drawn from.

use std::fmt::Write;

use lseq_core::evaluation::{ConfusionMatrix, RecordingScore};
use lseq_core::frontend::{Stage, NUM_CLASSES};
use lseq_core::scaling::ScalingRow;
use lseq_core::Variant;

const FONT: &str = "font-family=\"sans-serif\" font-size=\"12\"";

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self { body: String::new(), width, height }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="{fill}"/>"#);
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(self.body, r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{stroke}"/>"#);
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.1}" cy="{y:.1}" r="{r:.1}" fill="{fill}" fill-opacity="0.8"/>"#);
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(self.body, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" {FONT}>{}</text>"#, escape(s));
    }

    fn polyline(&mut self, points: &[(f64, f64)], stroke: &str) {
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(self.body, r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="2"/>"#, pts.join(" "));
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// White to dark blue.
fn shade(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * (1.0 - 0.85 * v)) as u8;
    let g = (255.0 * (1.0 - 0.65 * v)) as u8;
    let b = (255.0 * (1.0 - 0.25 * v)) as u8;
    format!("rgb({r},{g},{b})")
}

/// Row-normalized heatmap with raw counts in each cell and per-class error
/// counts on the right.
pub fn confusion_heatmap(cm: &ConfusionMatrix) -> String {
    let cell = 56.0;
    let (left, top) = (70.0, 50.0);
    let mut svg = Svg::new(left + cell * NUM_CLASSES as f64 + 90.0, top + cell * NUM_CLASSES as f64 + 50.0);
    svg.text(left + cell * 2.5, 20.0, "middle", "predicted");
    svg.text(16.0, top - 10.0, "start", "reference");
    let errors = cm.errors_per_class();
    for (r, ref_stage) in Stage::ALL.iter().enumerate() {
        let row_total: u64 = cm.counts[r].iter().sum();
        let y = top + r as f64 * cell;
        svg.text(left - 8.0, y + cell / 2.0 + 4.0, "end", ref_stage.name());
        for c in 0..NUM_CLASSES {
            let x = left + c as f64 * cell;
            let frac = if row_total > 0 { cm.counts[r][c] as f64 / row_total as f64 } else { 0.0 };
            svg.rect(x, y, cell - 2.0, cell - 2.0, &shade(frac));
            svg.text(x + cell / 2.0 - 1.0, y + cell / 2.0 + 4.0, "middle", &cm.counts[r][c].to_string());
        }
        svg.text(left + cell * NUM_CLASSES as f64 + 12.0, y + cell / 2.0 + 4.0, "start", &format!("{} err", errors[r]));
    }
    for (c, stage) in Stage::ALL.iter().enumerate() {
        svg.text(left + c as f64 * cell + cell / 2.0, top - 8.0, "middle", stage.name());
    }
    svg.text(
        left + cell * 2.5,
        top + cell * NUM_CLASSES as f64 + 30.0,
        "middle",
        &format!("accuracy {:.3} over {} epochs", cm.accuracy(), cm.total()),
    );
    svg.finish()
}

/// One column of points per group, one point per recording, on a 0..1
/// accuracy axis. Points within a column are spread horizontally by rank.
pub fn strip_plot(groups: &[(String, Vec<&RecordingScore>)]) -> String {
    let col = 80.0;
    let (left, top, plot_h) = (60.0, 30.0, 300.0);
    let mut svg = Svg::new(left + col * groups.len().max(1) as f64 + 20.0, top + plot_h + 60.0);
    let y_of = |acc: f64| top + plot_h * (1.0 - acc.clamp(0.0, 1.0));
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = y_of(v);
        svg.line(left - 4.0, y, left + col * groups.len() as f64, y, "#dddddd");
        svg.text(left - 8.0, y + 4.0, "end", &format!("{v:.1}"));
    }
    svg.text(14.0, top - 10.0, "start", "per-recording accuracy");
    for (g, (label, scores)) in groups.iter().enumerate() {
        let cx = left + col * (g as f64 + 0.5);
        let n = scores.len().max(1) as f64;
        for (i, s) in scores.iter().enumerate() {
            let dx = if scores.len() > 1 { (i as f64 / (n - 1.0) - 0.5) * col * 0.6 } else { 0.0 };
            svg.circle(cx + dx, y_of(s.accuracy), 4.0, "#1f5fa8");
        }
        if !scores.is_empty() {
            let mean = scores.iter().map(|s| s.accuracy).sum::<f64>() / n;
            svg.line(cx - col * 0.4, y_of(mean), cx + col * 0.4, y_of(mean), "#c0392b");
        }
        svg.text(cx, top + plot_h + 20.0, "middle", label);
    }
    svg.finish()
}

/// Wall clock against sequence length; flat rows joined by a line, folded
/// rows as labelled points.
pub fn scaling_curve(rows: &[ScalingRow]) -> String {
    let (left, top, w, h) = (70.0, 30.0, 420.0, 280.0);
    let mut svg = Svg::new(left + w + 40.0, top + h + 60.0);
    let max_l = rows.iter().map(|r| r.l).max().unwrap_or(1) as f64;
    let max_t = rows.iter().map(|r| r.wall_clock_s).fold(0.0, f64::max).max(1e-9);
    let x_of = |l: usize| left + w * l as f64 / max_l;
    let y_of = |t: f64| top + h * (1.0 - t / max_t);
    svg.line(left, top + h, left + w, top + h, "black");
    svg.line(left, top, left, top + h, "black");
    for tick in 0..=4 {
        let t = max_t * tick as f64 / 4.0;
        svg.text(left - 6.0, y_of(t) + 4.0, "end", &format!("{t:.1}"));
    }
    let mut ls: Vec<usize> = rows.iter().map(|r| r.l).collect();
    ls.sort_unstable();
    ls.dedup();
    for l in ls {
        svg.text(x_of(l), top + h + 18.0, "middle", &l.to_string());
    }
    svg.text(left + w / 2.0, top + h + 40.0, "middle", "sequence length L (epochs)");
    svg.text(14.0, top - 10.0, "start", "wall clock (s)");
    let mut flat: Vec<&ScalingRow> = rows.iter().filter(|r| r.variant == Variant::Flat).collect();
    flat.sort_by_key(|r| r.l);
    let pts: Vec<(f64, f64)> = flat.iter().map(|r| (x_of(r.l), y_of(r.wall_clock_s))).collect();
    if pts.len() > 1 {
        svg.polyline(&pts, "#7f8c8d");
    }
    for r in &flat {
        svg.circle(x_of(r.l), y_of(r.wall_clock_s), 5.0, "#7f8c8d");
    }
    for r in rows.iter().filter(|r| r.variant == Variant::Folded) {
        svg.circle(x_of(r.l), y_of(r.wall_clock_s), 5.0, "#1f5fa8");
        svg.text(x_of(r.l) + 8.0, y_of(r.wall_clock_s) + 4.0, "start", &format!("{}x{}", r.b, r.k));
    }
    svg.finish()
}
