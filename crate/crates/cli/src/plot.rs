//! Median-HM line chart, written as SVG and as a PNG raster of the same
//! geometry.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 140.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;
const COLORS: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

pub struct Series {
    pub name: String,
    /// `(labeled_patients, median hm)`, sorted by x.
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x_min: f64,
    x_max: f64,
}

impl Frame {
    fn new(series: &[Series]) -> Self {
        let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let (mut x_min, mut x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        if !x_min.is_finite() {
            (x_min, x_max) = (0.0, 1.0);
        }
        if x_max == x_min {
            x_max = x_min + 1.0;
        }
        Self { x_min, x_max }
    }

    fn px(&self, x: f64) -> f64 {
        let w = WIDTH as f64 - MARGIN_LEFT - MARGIN_RIGHT;
        MARGIN_LEFT + (x - self.x_min) / (self.x_max - self.x_min) * w
    }

    /// HM axis is fixed to [0, 1].
    fn py(&self, y: f64) -> f64 {
        let h = HEIGHT as f64 - MARGIN_TOP - MARGIN_BOTTOM;
        MARGIN_TOP + (1.0 - y.clamp(0.0, 1.0)) * h
    }
}

pub fn render_svg(series: &[Series], title: &str) -> String {
    let f = Frame::new(series);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{title}</text>"#, WIDTH / 2);
    let (x0, x1) = (f.px(f.x_min), f.px(f.x_max));
    let (y0, y1) = (f.py(0.0), f.py(1.0));
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = f.py(v);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, x0 - 6.0, y + 4.0);
    }
    let mut ticks: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for t in ticks {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#, f.px(t), y0 + 18.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">labeled patients</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT as f64 - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">median HM</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (k, ser) in series.iter().enumerate() {
        let [r, g, b] = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", f.px(x), f.py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="rgb({r},{g},{b})" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for &(x, y) in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="rgb({r},{g},{b})"/>"#,
                f.px(x),
                f.py(y)
            );
        }
        let ly = MARGIN_TOP + 20.0 * k as f64 + 10.0;
        let lx = x1 + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="rgb({r},{g},{b})" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, ser.name);
    }
    s.push_str("</svg>\n");
    s
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>, thick: i64) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as i64).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = ((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64);
        for dy in -(thick / 2)..=(thick / 2) {
            for dx in -(thick / 2)..=(thick / 2) {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
}

/// Raster version: axes, grid, lines and markers; no text.
pub fn render_png(series: &[Series]) -> RgbImage {
    let f = Frame::new(series);
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (x0, x1) = (f.px(f.x_min), f.px(f.x_max));
    for i in 1..=5 {
        let y = f.py(i as f64 / 5.0);
        draw_line(&mut img, (x0, y), (x1, y), Rgb([221, 221, 221]), 1);
    }
    draw_line(&mut img, (x0, f.py(0.0)), (x1, f.py(0.0)), Rgb([0, 0, 0]), 1);
    draw_line(&mut img, (x0, f.py(0.0)), (x0, f.py(1.0)), Rgb([0, 0, 0]), 1);
    for (k, ser) in series.iter().enumerate() {
        let color = Rgb(COLORS[k % COLORS.len()]);
        for w in ser.points.windows(2) {
            draw_line(&mut img, (f.px(w[0].0), f.py(w[0].1)), (f.px(w[1].0), f.py(w[1].1)), color, 2);
        }
        for &(x, y) in &ser.points {
            draw_line(&mut img, (f.px(x), f.py(y)), (f.px(x), f.py(y)), color, 6);
        }
        let ly = MARGIN_TOP + 20.0 * k as f64 + 10.0;
        draw_line(&mut img, (x1 + 15.0, ly), (x1 + 35.0, ly), color, 2);
    }
    img
}

pub fn write_hm_curve(series: &[Series], title: &str, svg: &Path, png: &Path) -> Result<()> {
    if let Some(dir) = svg.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(svg, render_svg(series, title)).with_context(|| format!("writing {}", svg.display()))?;
    render_png(series)
        .save(png)
        .with_context(|| format!("writing {}", png.display()))
}
