//! Self-contained SVG charts of closed-loop traces.

use std::fmt::Write as _;

use crate::multiphase::Phase;
use crate::spec_monitor::SpecConfig;
use crate::trace::Trace;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 520.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
/// Height of the frequency panel; the participation panel sits below.
const F_PANEL: f64 = 300.0;
const GAP: f64 = 40.0;
const U_PANEL: f64 = 90.0;
/// Horizontal resolution below which polyline points are dropped.
const MIN_STEP_PX: f64 = 0.5;

fn phase_color(p: Phase) -> &'static str {
    match p {
        Phase::NoControl => "#bbbbbb",
        Phase::C1 => "#e4572e",
        Phase::C2 => "#f3a712",
        Phase::FixedControl => "#29335c",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

/// Tick positions at a 1/2/5 step giving roughly `n` intervals.
fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let raw = (hi - lo) / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut out = Vec::new();
    let mut v = (lo / step).ceil() * step;
    while v <= hi + 1e-9 * step {
        out.push(v);
        v += step;
    }
    out
}

/// Frequency trace with the containment limit, I₁ and I₂ shaded, samples
/// coloured by supervisor phase, and the applied participation underneath.
pub fn frequency_svg(trace: &Trace, cfg: &SpecConfig, title: &str) -> String {
    let t_end = trace.samples.last().map_or(1.0, |s| s.t).max(trace.tau);
    let f_min = trace.min_f_hz().min(cfg.c_zone) - 0.05;
    let f_max = (0..trace.len())
        .map(|k| trace.f_hz(k))
        .fold(cfg.f_nom, f64::max)
        + 0.05;
    let x = Axis {
        lo: 0.0,
        hi: t_end,
        px_lo: LEFT,
        px_hi: WIDTH - RIGHT,
    };
    let y = Axis {
        lo: f_min,
        hi: f_max,
        px_lo: TOP + F_PANEL,
        px_hi: TOP,
    };
    let u_top = TOP + F_PANEL + GAP;
    let yu = Axis {
        lo: 0.0,
        hi: 1.0,
        px_lo: u_top + U_PANEL,
        px_hi: u_top,
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="22" font-size="15">{}</text>"#, escape(title));

    let band = |s: &mut String, lo: f64, hi: f64, fill: &str, label: &str| {
        let (a, b) = (y.map(hi.min(f_max)), y.map(lo.max(f_min)));
        if b > a {
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{a:.1}" width="{:.1}" height="{:.1}" fill="{fill}"><title>{label}</title></rect>"#,
                x.px_lo,
                x.px_hi - x.px_lo,
                b - a
            );
        }
    };
    band(&mut s, f_min, cfg.c_zone, "#f8d0d0", "below containment limit");
    band(&mut s, cfg.i1.lo, cfg.i1.hi, "#dbe9f6", "I1");
    band(&mut s, cfg.i2.lo, cfg.i2.hi, "#b4d3ee", "I2");

    for v in ticks(f_min, f_max, 6) {
        let py = y.map(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            x.px_hi,
            LEFT - 6.0,
            py + 4.0
        );
    }
    for v in ticks(0.0, t_end, 8) {
        let px = x.map(v);
        let _ = writeln!(
            s,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{v}</text>"#,
            yu.px_lo + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" transform="rotate(-90 18 {:.1})" text-anchor="middle">frequency (Hz)</text>"#,
        TOP + F_PANEL / 2.0,
        TOP + F_PANEL / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" transform="rotate(-90 18 {:.1})" text-anchor="middle">u</text>"#,
        u_top + U_PANEL / 2.0,
        u_top + U_PANEL / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">time (s)</text>"#,
        (x.px_lo + x.px_hi) / 2.0,
        HEIGHT - 8.0
    );

    // frequency and participation polylines, split into runs of equal phase
    let mut k = 0;
    while k < trace.len() {
        let phase = trace.samples[k].phase;
        let mut end = k;
        while end + 1 < trace.len() && trace.samples[end + 1].phase == phase {
            end += 1;
        }
        let last = (end + 1).min(trace.len() - 1);
        let mut fp = String::new();
        let mut prev = f64::NEG_INFINITY;
        for j in k..=last {
            let px = x.map(trace.samples[j].t);
            if px - prev >= MIN_STEP_PX || j == last {
                let _ = write!(fp, "{px:.1},{:.1} ", y.map(trace.f_hz(j)));
                prev = px;
            }
        }
        let c = phase_color(phase);
        let _ = writeln!(s, r#"<polyline points="{fp}" fill="none" stroke="{c}" stroke-width="2"/>"#);
        let mut up = String::new();
        let mut prev = f64::NEG_INFINITY;
        for j in k..=end {
            let (t0, t1) = (trace.samples[j].t, trace.samples[j].t + trace.tau);
            if x.map(t0) - prev < MIN_STEP_PX && j != end {
                continue;
            }
            prev = x.map(t0);
            let _ = write!(
                up,
                "{:.1},{:.1} {:.1},{:.1} ",
                x.map(t0),
                yu.map(trace.samples[j].u),
                x.map(t1.min(t_end)),
                yu.map(trace.samples[j].u)
            );
        }
        let _ = writeln!(s, r#"<polyline points="{up}" fill="none" stroke="{c}" stroke-width="1.5"/>"#);
        k = end + 1;
    }

    for (py, label) in [(yu.px_lo, "0"), (yu.px_hi, "1")] {
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#cccccc"/><text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"##,
            x.px_hi,
            LEFT - 6.0,
            py + 4.0
        );
    }
    for (i, p) in [Phase::NoControl, Phase::C1, Phase::C2, Phase::FixedControl].into_iter().enumerate() {
        let lx = WIDTH - RIGHT - 360.0 + 90.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="12" width="14" height="10" fill="{}"/><text x="{:.1}" y="21">{}</text>"#,
            phase_color(p),
            lx + 18.0,
            p.as_str()
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{:.1}" height="{F_PANEL}" fill="none" stroke="#444444"/>"##,
        x.px_hi - x.px_lo
    );
    s.push_str("</svg>\n");
    s
}
