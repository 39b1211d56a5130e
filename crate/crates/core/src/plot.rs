//! Post-hoc SVG artifacts: per-epoch metric line charts and prediction
//! overlays (PNG embedded as a data URI with box rectangles on top).

use std::path::Path;

use base64::Engine;

use crate::anchors::BBox;
use crate::error::{Error, Result};

pub struct Series {
    pub name: String,
    /// (epoch, value); gaps (undefined metrics) are simply absent.
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

fn nice_ticks(min: f64, max: f64, n: usize) -> Vec<f64> {
    if !(max > min) {
        return vec![min];
    }
    let raw = (max - min) / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    } * mag;
    let start = (min / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = start;
    while t <= max + step * 1e-9 {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Writes a line chart of one or more series to `path`.
pub fn line_chart(title: &str, series: &[Series], path: &Path) -> Result<()> {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if !min_x.is_finite() {
        // no data at all; emit an empty chart rather than failing the run
        min_x = 0.0;
        max_x = 1.0;
        min_y = 0.0;
        max_y = 1.0;
    }
    if max_y == min_y {
        max_y = min_y + 1.0;
    }
    if max_x == min_x {
        max_x = min_x + 1.0;
    }
    let pad = (max_y - min_y) * 0.05;
    min_y -= pad;
    max_y += pad;

    let px = |x: f64| MARGIN_L + (x - min_x) / (max_x - min_x) * (W - MARGIN_L - MARGIN_R);
    let py = |y: f64| H - MARGIN_B - (y - min_y) / (max_y - min_y) * (H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        title
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MARGIN_B,
        W - MARGIN_R,
        H - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MARGIN_B
    ));
    for t in nice_ticks(min_x, max_x, 8) {
        let x = px(t);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"#ddd\"/>\n",
            MARGIN_T,
            H - MARGIN_B
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            H - MARGIN_B + 16.0,
            fmt(t)
        ));
    }
    for t in nice_ticks(min_y, max_y, 6) {
        let y = py(t);
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>\n",
            W - MARGIN_R
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            y + 4.0,
            fmt(t)
        ));
    }
    // series
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.len() > 1 {
            let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                pts.join(" ")
            ));
        }
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        // legend
        let lx = MARGIN_L + 10.0 + 130.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{lx}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            MARGIN_T - 6.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            lx + 16.0,
            MARGIN_T + 4.0,
            s.name
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes an SVG with the PNG image embedded and labelled boxes drawn over
/// it; `scale` enlarges the canvas for readability.
pub fn overlay_svg(
    png_bytes: &[u8],
    width: usize,
    height: usize,
    boxes: &[(BBox, String)],
    path: &Path,
) -> Result<()> {
    let scale = (512.0 / width.max(height) as f64).max(1.0).floor();
    let (cw, ch) = (width as f64 * scale, height as f64 * scale);
    let data = base64::engine::general_purpose::STANDARD.encode(png_bytes);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{cw}\" height=\"{ch}\" viewBox=\"0 0 {cw} {ch}\">\n"
    ));
    svg.push_str(&format!(
        "<image href=\"data:image/png;base64,{data}\" x=\"0\" y=\"0\" width=\"{cw}\" height=\"{ch}\" preserveAspectRatio=\"none\" image-rendering=\"pixelated\"/>\n"
    ));
    for (i, (b, label)) in boxes.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            b.x1 * scale,
            b.y1 * scale,
            b.width() * scale,
            b.height() * scale
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            b.x1 * scale + 2.0,
            (b.y1 * scale - 4.0).max(10.0),
            label
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_writes_valid_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.svg");
        let series = vec![
            Series {
                name: "train".into(),
                points: (0..10).map(|i| (i as f64, (i as f64 * 0.3).sin())).collect(),
            },
            Series {
                name: "val".into(),
                points: (0..10).map(|i| (i as f64, (i as f64 * 0.3).cos())).collect(),
            },
        ];
        line_chart("loss", &series, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
        assert!(text.contains("train"));
    }

    #[test]
    fn empty_chart_still_writes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.svg");
        line_chart("nothing", &[], &path).unwrap();
        assert!(path.exists());
    }

    #[test]
    fn overlay_embeds_image_and_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.svg");
        let img = image::GrayImage::from_raw(8, 8, vec![120u8; 64]).unwrap();
        let mut png = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png).unwrap();
        let boxes = vec![(BBox::new(1.0, 1.0, 5.0, 6.0), "scratch 0.93".to_string())];
        overlay_svg(&png, 8, 8, &boxes, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("data:image/png;base64,"));
        assert!(text.contains("scratch 0.93"));
    }
}
