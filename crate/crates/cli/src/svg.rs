//! Minimal SVG charts: Kaplan–Meier step curves and a 2-D scatter.

use std::fmt::Write;

use bdvae_core::cohort::KmCurve;
use bdvae_core::ndmath::Tensor;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        MARGIN + (x - self.x0) / span * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        H - MARGIN - (y - self.y0) / span * (H - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{l:.1},{t:.1} L{l:.1},{b:.1} L{r:.1},{b:.1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * k as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let (x, y) = (f.px(fx), f.py(fy));
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{b:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            b + 4.0,
            b + 18.0,
            tick(fx)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{l:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            l - 4.0,
            l - 6.0,
            y + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn legend(out: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 16.0 * i as f64;
        let x = W - MARGIN - 110.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}">{}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            escape(name)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Step curves, one per group, with censoring ticks.
pub fn km_plot(curves: &[(String, KmCurve)]) -> String {
    let t_max = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.time).chain(c.censor_times.iter().copied()))
        .fold(0.0f64, f64::max);
    let f = Frame {
        x0: 0.0,
        x1: if t_max > 0.0 { t_max } else { 1.0 },
        y0: 0.0,
        y1: 1.0,
    };
    let mut out = String::new();
    header(&mut out, "Progression-free survival by cluster");
    axes(&mut out, &f, "time (days)", "survival probability");
    for (i, (_, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = format!("M{:.2},{:.2}", f.px(0.0), f.py(1.0));
        for p in &curve.points {
            let _ = write!(d, " H{:.2} V{:.2}", f.px(p.time), f.py(p.survival));
        }
        let _ = write!(d, " H{:.2}", f.px(f.x1));
        let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#);
        for &t in &curve.censor_times {
            let y = f.py(curve.survival_at(t));
            let x = f.px(t);
            let _ = writeln!(
                out,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/>"#,
                y - 4.0,
                y + 4.0
            );
        }
    }
    let names: Vec<String> = curves.iter().map(|(n, _)| n.clone()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Scatter of the first two columns of `coords`, coloured by cluster label
/// (1-based); responders are filled, non-responders hollow.
pub fn scatter(coords: &Tensor, clusters: &[usize], responders: &[u8], names: &[String]) -> String {
    let n = coords.rows();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        let (x, y) = (coords.get2(i, 0), coords.get2(i, 1));
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if n == 0 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let f = Frame { x0, x1, y0, y1 };
    let mut out = String::new();
    header(&mut out, "MDS of significant latents");
    axes(&mut out, &f, "MDS 1", "MDS 2");
    for i in 0..n {
        let color = PALETTE[(clusters[i] - 1) % PALETTE.len()];
        let fill = if responders[i] == 1 { color } else { "none" };
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{fill}" stroke="{color}"/>"#,
            f.px(coords.get2(i, 0)),
            f.py(coords.get2(i, 1))
        );
    }
    legend(&mut out, names);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use bdvae_core::cohort::{km_estimator, SurvivalRecord};

    #[test]
    fn km_plot_is_well_formed() {
        let recs: Vec<SurvivalRecord> = [(1.0, true), (2.0, false), (3.0, true)]
            .iter()
            .map(|&(time, event)| SurvivalRecord { time, event })
            .collect();
        let c = km_estimator(&recs).unwrap();
        let s = km_plot(&[("C1-R".into(), c.clone()), ("C2-NR".into(), c)]);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert_eq!(s.matches("stroke-width=\"2\"").count(), 2);
        assert!(s.contains("C2-NR"));
    }

    #[test]
    fn scatter_marks_every_point() {
        let coords = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let s = scatter(&coords, &[1, 2, 1], &[1, 0, 0], &["C1-R".into(), "C2-NR".into()]);
        assert_eq!(s.matches("<circle").count(), 3);
        assert_eq!(s.matches("fill=\"none\"").count(), 2 + 1);
    }
}
