//! Overlay PNGs: each detection drawn as a colored ray leaving its tip.

use image::{Rgb, RgbImage};

use vecgauge::decode::VectorDetection;
use vecgauge::geom::BBox;

const COLORS: [[u8; 3]; 6] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]];

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], c: [u8; 3]) {
    let steps = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = (a[0] + t * (b[0] - a[0])).round() as i64;
        let y = (a[1] + t * (b[1] - a[1])).round() as i64;
        put(img, x, y, c);
        put(img, x + 1, y, c);
        put(img, x, y + 1, c);
    }
}

fn rect(img: &mut RgbImage, b: &BBox, c: [u8; 3]) {
    let (x0, y0, x1, y1) = b.span();
    for (p, q) in [([x0, y0], [x1, y0]), ([x1, y0], [x1, y1]), ([x1, y1], [x0, y1]), ([x0, y1], [x0, y0])] {
        line(img, p, q, c);
    }
}

/// Draw meter boxes and detections onto a copy of `img`. Ray length scales
/// with the box size.
pub fn draw(img: &RgbImage, meters: &[(BBox, &[VectorDetection])]) -> RgbImage {
    let mut out = img.clone();
    for (b, dets) in meters {
        rect(&mut out, b, [255, 255, 0]);
        let len = 0.35 * b.w.max(b.h);
        for (k, d) in dets.iter().enumerate() {
            let c = COLORS[k % COLORS.len()];
            let tip = d.tip();
            let dir = d.direction();
            line(&mut out, tip, [tip[0] + len * dir[0], tip[1] + len * dir[1]], c);
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut out, tip[0].round() as i64 + dx, tip[1].round() as i64 + dy, c);
                }
            }
        }
    }
    out
}
