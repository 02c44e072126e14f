//! PNG plots of training metrics and eval reports.
//!
//! Loss curves use a log10 y axis. Series colors, in metrics-CSV column
//! order: total black, trans red, rot green, open blue, collision orange,
//! depth purple, dyn_inf teal. The legend numbers them 1 to 7 in the same
//! order.

use veye_core::draw::{Canvas, Rgb};

const W: i64 = 720;
const H: i64 = 420;
const LEFT: i64 = 70;
const RIGHT: i64 = 110;
const TOP: i64 = 20;
const BOTTOM: i64 = 40;
const SERIES: [Rgb; 7] = [[0, 0, 0], [210, 40, 40], [40, 160, 60], [40, 80, 210], [240, 140, 20], [140, 50, 170], [20, 150, 150]];
const GRID: Rgb = [225, 225, 225];
const AXIS: Rgb = [60, 60, 60];

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Frame {
    canvas: Canvas,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64), y_label: impl Fn(f64) -> String) -> Self {
        let mut canvas = Canvas::new(W as u32, H as u32, [255, 255, 255]);
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        for i in 0..=5 {
            let t = i as f64 / 5.0;
            let py = TOP + ph - (t * ph as f64).round() as i64;
            canvas.line(LEFT, py, LEFT + pw, py, GRID, 1);
            let label = y_label(y.0 + t * (y.1 - y.0));
            canvas.text(LEFT - 6 - Canvas::text_width(&label, 1), py - 3, &label, AXIS, 1);
            let px = LEFT + (t * pw as f64).round() as i64;
            canvas.line(px, TOP, px, TOP + ph, GRID, 1);
            let label = fmt_tick(x.0 + t * (x.1 - x.0));
            canvas.text(px - Canvas::text_width(&label, 1) / 2, TOP + ph + 8, &label, AXIS, 1);
        }
        canvas.line(LEFT, TOP, LEFT, TOP + ph, AXIS, 1);
        canvas.line(LEFT, TOP + ph, LEFT + pw, TOP + ph, AXIS, 1);
        Self { canvas, x, y }
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let (pw, ph) = ((W - LEFT - RIGHT) as f64, (H - TOP - BOTTOM) as f64);
        let tx = if self.x.1 > self.x.0 { (x - self.x.0) / (self.x.1 - self.x.0) } else { 0.0 };
        let ty = if self.y.1 > self.y.0 { (y - self.y.0) / (self.y.1 - self.y.0) } else { 0.0 };
        (LEFT + (tx * pw).round() as i64, TOP + (ph - ty * ph).round() as i64)
    }

    fn legend(&mut self, n: usize) {
        for (i, c) in SERIES.iter().take(n).enumerate() {
            let y = TOP + 10 + 18 * i as i64;
            self.canvas.fill_rect(W - RIGHT + 16, y, 14, 10, *c);
            self.canvas.text(W - RIGHT + 36, y + 2, &(i + 1).to_string(), AXIS, 1);
        }
    }
}

/// Loss curves from a metrics CSV (`step,total,trans,rot,open,collision,depth,dyn_inf`).
pub fn loss_curves(csv: &str) -> Result<Vec<u8>, String> {
    let mut lines = csv.lines();
    let header = lines.next().ok_or("empty metrics file")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() != 8 || cols[0] != "step" {
        return Err(format!("unexpected metrics header {header:?}"));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let r: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        let r = r.map_err(|e| format!("metrics line {}: {e}", i + 2))?;
        if r.len() != 8 {
            return Err(format!("metrics line {}: expected 8 columns", i + 2));
        }
        rows.push(r);
    }
    if rows.is_empty() {
        return Err("metrics file has no rows".into());
    }
    let floor = 1e-6f64;
    let logs: Vec<Vec<f64>> = rows.iter().map(|r| r[1..].iter().map(|v| v.max(floor).log10()).collect()).collect();
    let lo = logs.iter().flatten().cloned().fold(f64::INFINITY, f64::min).floor();
    let hi = logs.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max).ceil().max(lo + 1.0);
    let (x0, x1) = (rows[0][0], rows[rows.len() - 1][0].max(rows[0][0] + 1.0));
    let mut f = Frame::new((x0, x1), (lo, hi), |v| fmt_tick(10f64.powf(v)));
    for s in (0..7).rev() {
        let pts: Vec<(i64, i64)> = rows.iter().zip(&logs).map(|(r, l)| f.to_px(r[0], l[s])).collect();
        for w in pts.windows(2) {
            f.canvas.line(w[0].0, w[0].1, w[1].0, w[1].1, SERIES[s], if s == 0 { 2 } else { 1 });
        }
    }
    f.legend(7);
    f.canvas.to_png().map_err(|e| e.to_string())
}

/// Histogram of per-keyframe position errors from an eval report, with the
/// quantization bound marked as a vertical line.
pub fn error_histogram(json: &str) -> Result<Vec<u8>, String> {
    let v: serde_json::Value = serde_json::from_str(json).map_err(|e| format!("report: {e}"))?;
    let errors: Vec<f64> =
        v["per_keyframe"].as_array().ok_or("report has no per_keyframe array")?.iter().filter_map(|r| r["position_error_m"].as_f64()).collect();
    let bound = v["quantization_bound_m"].as_f64().ok_or("report has no quantization_bound_m")?;
    let max = errors.iter().cloned().fold(bound, f64::max) * 1.05;
    let bins = 20usize;
    let mut counts = vec![0usize; bins];
    for e in &errors {
        counts[((e / max * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut f = Frame::new((0.0, max), (0.0, top), |v| format!("{}", v.round()));
    for (i, &c) in counts.iter().enumerate() {
        let (x0, y0) = f.to_px(i as f64 * max / bins as f64, c as f64);
        let (x1, y1) = f.to_px((i + 1) as f64 * max / bins as f64, 0.0);
        f.canvas.fill_rect(x0 + 1, y0, (x1 - x0 - 1).max(1), y1 - y0, SERIES[3]);
    }
    let (bx, by0) = f.to_px(bound, 0.0);
    let (_, by1) = f.to_px(bound, top);
    f.canvas.line(bx, by0, bx, by1, SERIES[1], 2);
    f.canvas.to_png().map_err(|e| e.to_string())
}
