//! Minimal chart and image emitters: hand-built SVG line/bar charts and
//! binary PGM (P5) grids. Charts are derived views over the CSV metrics and
//! never feed back into them.

use std::path::Path;

use crate::dataio::pixel_to_byte;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn axis_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo.min(0.0), hi + pad)
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        W / 2.0
    )
}

/// Multi-series line chart; each series is (label, points (x, y)).
pub fn svg_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let mut out = svg_open(title);
    let (x_lo, x_hi) = axis_bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y_lo, y_hi) = axis_bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let sx = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y_lo) / (y_hi - y_lo) * (H - 2.0 * MARGIN);

    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{lb}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cy})\">{y_label}</text>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN,
        cx = W / 2.0,
        lb = H - 14.0,
        cy = H / 2.0,
    ));
    for i in 0..=4 {
        let yv = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let xv = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.1}</text>\n",
            MARGIN - 6.0,
            sy(yv) + 4.0,
            yv,
            sx(xv),
            H - MARGIN + 16.0,
            xv
        ));
    }
    for (i, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        if !path.is_empty() {
            out.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                path.join(" ")
            ));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>\n",
            W - MARGIN + 4.0,
            MARGIN + 16.0 * i as f64
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart with optional error whiskers; bars are (label, mean, std).
pub fn svg_bar_chart(title: &str, y_label: &str, bars: &[(String, f64, f64)]) -> String {
    let mut out = svg_open(title);
    let (_, y_hi) = axis_bounds(bars.iter().map(|(_, m, s)| m + s));
    let y_lo = 0.0;
    let sy = |y: f64| H - MARGIN - (y - y_lo) / (y_hi - y_lo) * (H - 2.0 * MARGIN);
    let n = bars.len().max(1) as f64;
    let slot = (W - 2.0 * MARGIN) / n;
    let bw = slot * 0.6;

    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cy})\">{y_label}</text>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN,
        cy = H / 2.0,
    ));
    for i in 0..=4 {
        let yv = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n",
            MARGIN - 6.0,
            sy(yv) + 4.0,
            yv
        ));
    }
    for (i, (label, mean, std)) in bars.iter().enumerate() {
        let x0 = MARGIN + slot * i as f64 + (slot - bw) / 2.0;
        let xc = x0 + bw / 2.0;
        let color = PALETTE[i % PALETTE.len()];
        out.push_str(&format!(
            "<rect x=\"{x0:.2}\" y=\"{:.2}\" width=\"{bw:.2}\" height=\"{:.2}\" fill=\"{color}\"/>\n",
            sy(*mean),
            sy(0.0) - sy(*mean)
        ));
        if *std > 0.0 {
            out.push_str(&format!(
                "<line x1=\"{xc:.2}\" y1=\"{:.2}\" x2=\"{xc:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
                sy(mean - std).min(sy(0.0)),
                sy(mean + std)
            ));
        }
        out.push_str(&format!(
            "<text x=\"{xc:.2}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
            H - MARGIN + 16.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Tile a batch tensor (N, 1, h, w) of pixels in [-1, 1] into one grayscale
/// grid image, `cols` images wide.
pub fn pgm_grid(batch: &Tensor, cols: usize) -> Result<(usize, usize, Vec<u8>)> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != 1 || cols == 0 {
        return Err(Error::ShapeMismatch {
            context: "pgm_grid expects (N, 1, h, w)".into(),
            expected: vec![0, 1, 0, 0],
            got: shape.to_vec(),
        });
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut bytes = vec![0u8; gw * gh];
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        let img = &batch.data()[i * h * w..(i + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                bytes[(r * h + y) * gw + c * w + x] = pixel_to_byte(img[y * w + x]);
            }
        }
    }
    Ok((gw, gh, bytes))
}

/// Write a binary PGM (P5, maxval 255) file.
pub fn write_pgm<P: AsRef<Path>>(path: P, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::LengthMismatch {
            context: "pgm payload".into(),
            expected: width * height,
            got: bytes.len(),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out)?;
    Ok(())
}
