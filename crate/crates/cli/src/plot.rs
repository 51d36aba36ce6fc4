//! Minimal SVG line charts and PNG contact sheets.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

/// A single-series line chart. The raw values are kept in the polyline's
/// `data-values` attribute so that the plot can be checked without rasterising.
pub fn line_chart_svg(title: &str, x_label: &str, xs: &[f64], ys: &[f64]) -> String {
    let (x0, x1) = bounds(xs);
    let (y0, y1) = bounds(ys);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {t} V{b} H{r}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for (v, y) in [(y0, HEIGHT - MARGIN), (y1, MARGIN)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            short(v)
        );
    }
    for (v, x) in [(x0, MARGIN), (x1, WIDTH - MARGIN)] {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            HEIGHT - MARGIN + 16.0,
            short(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let points: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let values: Vec<String> = ys.iter().map(|y| format!("{y:?}")).collect();
    let _ = writeln!(
        svg,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}" data-values="{}"/>"#,
        points.join(" "),
        values.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn short(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One row per sample: image, ground truth, prediction, separated by a 2-pixel gutter.
pub fn contact_sheet(rows: &[(&Array3<f64>, &Array2<f64>, &Array2<f64>)]) -> RgbImage {
    const GAP: u32 = 2;
    let (h, w) = rows.first().map_or((1, 1), |r| r.1.dim());
    let (h, w) = (h as u32, w as u32);
    let n = rows.len() as u32;
    let mut sheet =
        RgbImage::from_pixel(3 * w + 4 * GAP, n * h + (n + 1) * GAP, Rgb([255, 255, 255]));
    for (r, (image, gt, pred)) in rows.iter().enumerate() {
        let top = GAP + r as u32 * (h + GAP);
        let channels = image.dim().2;
        for y in 0..h {
            for x in 0..w {
                let (yy, xx) = (y as usize, x as usize);
                let px = |c: usize| byte(image[[yy, xx, c.min(channels - 1)]]);
                sheet.put_pixel(GAP + x, top + y, Rgb([px(0), px(1), px(2)]));
                let g = byte(gt[[yy, xx]]);
                sheet.put_pixel(2 * GAP + w + x, top + y, Rgb([g, g, g]));
                let p = byte(pred[[yy, xx]]);
                sheet.put_pixel(3 * GAP + 2 * w + x, top + y, Rgb([p, p, p]));
            }
        }
    }
    sheet
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_keeps_raw_values() {
        let svg = line_chart_svg("lr", "epoch", &[1.0, 2.0, 3.0], &[2e-4, 1e-4, 0.0]);
        assert!(svg.contains(r#"data-values="0.0002 0.0001 0.0""#));
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn flat_series_does_not_divide_by_zero() {
        let svg = line_chart_svg("flat", "x", &[1.0], &[0.5]);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn sheet_dimensions() {
        let img = Array3::zeros((4, 5, 3));
        let m = Array2::ones((4, 5));
        let sheet = contact_sheet(&[(&img, &m, &m), (&img, &m, &m)]);
        assert_eq!(sheet.dimensions(), (3 * 5 + 8, 2 * 4 + 6));
        assert_eq!(sheet.get_pixel(2 + 5 + 2, 2).0, [255, 255, 255]);
    }
}
