//! Static SVG trace plots and histograms. Written by hand so that the
//! output is byte-stable and needs no font metrics.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 240.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(lo < hi) {
        let c = if lo.is_finite() { lo } else { 0.0 };
        return (c - 0.5, c + 0.5);
    }
    (lo, hi)
}

fn frame(title: &str, lo: f64, hi: f64, body: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        PAD * 0.6,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{}" font-family="sans-serif" font-size="10">{hi:.4}</text>"#,
        PAD + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{}" font-family="sans-serif" font-size="10">{lo:.4}</text>"#,
        H - PAD
    );
    s.push_str(body);
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per chain, iteration on the horizontal axis.
pub fn trace_svg(title: &str, chains: &[Vec<f64>]) -> String {
    let (lo, hi) = range(chains.iter().flatten().copied());
    let len = chains.iter().map(Vec::len).max().unwrap_or(0).max(2);
    let sx = (W - 2.0 * PAD) / (len - 1) as f64;
    let sy = (H - 2.0 * PAD) / (hi - lo);
    let mut body = String::new();
    for (c, chain) in chains.iter().enumerate() {
        let pts: Vec<String> = chain
            .iter()
            .enumerate()
            .map(|(k, v)| format!("{:.2},{:.2}", PAD + k as f64 * sx, H - PAD - (v - lo) * sy))
            .collect();
        let _ = writeln!(
            body,
            r#"<polyline fill="none" stroke="{}" stroke-width="0.6" stroke-opacity="0.8" points="{}"/>"#,
            COLORS[c % COLORS.len()],
            pts.join(" ")
        );
    }
    frame(title, lo, hi, &body)
}

/// Equal-width histogram with `bins` bars over the range of `values`.
pub fn histogram_svg(title: &str, values: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let (lo, hi) = range(values.iter().copied());
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let bw = (W - 2.0 * PAD) / bins as f64;
    let mut body = String::new();
    for (k, c) in counts.iter().enumerate() {
        let h = (H - 2.0 * PAD) * *c as f64 / top;
        let _ = writeln!(
            body,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" stroke="white" stroke-width="0.5"/>"##,
            PAD + k as f64 * bw,
            H - PAD - h,
            bw,
            h
        );
    }
    frame(title, lo, hi, &body)
}

/// File-name-safe version of a column name.
pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
