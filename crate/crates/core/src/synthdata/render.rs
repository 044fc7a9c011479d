//! Procedural scene renderer.

use super::{Finding, Modality, SceneAttributes};
use crate::image::RgbImage;
use crate::rng::{derive_seed, Stream};

/// Base colours per hue class. Classes 0–2 belong to the target domain, 3–5 to the generic one.
pub const HUE_BASE: [[f64; 3]; 6] = [
    [225.0, 125.0, 140.0],
    [205.0, 75.0, 65.0],
    [225.0, 145.0, 60.0],
    [90.0, 175.0, 95.0],
    [80.0, 125.0, 210.0],
    [155.0, 95.0, 195.0],
];

const ENDO_RIM_FACTOR: f64 = 0.3;
const XRAY_RIM: [u8; 3] = [250, 250, 250];
const XRAY_METAL: [u8; 3] = [232, 232, 232];
const XRAY_STRIPE: [u8; 3] = [255, 255, 255];

/// Exact colour used for ellipse rims in a scene with these attributes.
pub fn rim_color(a: &SceneAttributes) -> [u8; 3] {
    match a.modality {
        Modality::Endo => HUE_BASE[a.hue as usize].map(|c| (c * ENDO_RIM_FACTOR).round() as u8),
        Modality::Xray => XRAY_RIM,
    }
}

/// Smooth value noise in [0, 1]: two octaves of bilinearly interpolated lattice values.
fn value_noise(r: &mut Stream, side: usize) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for (cells, amp) in [(4usize, 0.67), (8, 0.33)] {
        let n = cells + 1;
        let lattice: Vec<f64> = (0..n * n).map(|_| r.uniform()).collect();
        for y in 0..side {
            let fy = y as f64 / side as f64 * cells as f64;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            let sy = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..side {
                let fx = x as f64 / side as f64 * cells as f64;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let v = |i: usize, j: usize| lattice[j * n + i];
                let top = v(x0, y0) * (1.0 - sx) + v(x0 + 1, y0) * sx;
                let bot = v(x0, y0 + 1) * (1.0 - sx) + v(x0 + 1, y0 + 1) * sx;
                out[y * side + x] += amp * (top * (1.0 - sy) + bot * sy);
            }
        }
    }
    out
}

fn background(a: &SceneAttributes, noise: &[f64], side: usize) -> RgbImage {
    let base = HUE_BASE[a.hue as usize];
    let mut img = RgbImage::new(side, side);
    let c = (side as f64 - 1.0) / 2.0;
    for y in 0..side {
        for x in 0..side {
            let n = noise[y * side + x];
            let rgb = match a.modality {
                Modality::Endo => {
                    let d = (((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() / (c * 1.42)).min(1.0);
                    let f = (0.55 + 0.45 * n) * (1.0 - 0.3 * d * d);
                    base.map(|b| (b * f).round() as u8)
                }
                Modality::Xray => {
                    let g = 40.0 + 90.0 * n;
                    base.map(|b| (0.85 * g + 0.15 * b * g / 128.0).round().min(200.0) as u8)
                }
            };
            img.put(x, y, rgb);
        }
    }
    img
}

fn draw_ellipse(img: &mut RgbImage, cx: f64, cy: f64, rx: f64, ry: f64, fill: [u8; 3], rim: [u8; 3]) {
    let side = img.width;
    for y in 0..img.height {
        for x in 0..side {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            let d = dx * dx + dy * dy;
            if d <= 1.0 {
                let inner = ((x as f64 + 0.5 - cx) / (rx - 1.0)).powi(2) + ((y as f64 + 0.5 - cy) / (ry - 1.0)).powi(2);
                img.put(x, y, if inner <= 1.0 { fill } else { rim });
            }
        }
    }
}

fn draw_instrument(img: &mut RgbImage, r: &mut Stream, a: &SceneAttributes) {
    let side = img.width as f64;
    let horizontal = r.bernoulli(0.5);
    let len = side * (0.45 + 0.3 * r.uniform());
    let thick = (side * (0.1 + 0.06 * r.uniform())).max(2.0);
    let (x0, y0) = (r.uniform() * (side - len).max(1.0), r.uniform() * (side - thick).max(1.0));
    let (w, h, x0, y0) = if horizontal { (len, thick, x0, y0) } else { (thick, len, y0, x0) };
    let (body, stripe) = match a.modality {
        Modality::Endo => ([150, 150, 155], [245, 245, 245]),
        Modality::Xray => (XRAY_METAL, XRAY_STRIPE),
    };
    let (xs, ys) = (x0.round() as usize, y0.round() as usize);
    let (xe, ye) = (((x0 + w).round() as usize).min(img.width), ((y0 + h).round() as usize).min(img.height));
    for y in ys..ye {
        for x in xs..xe {
            let along_stripe = if horizontal { y == ys + 1 } else { x == xs + 1 };
            img.put(x, y, if along_stripe { stripe } else { body });
        }
    }
}

/// Render a `side × side` scene; the same `(attrs, seed)` always gives the same pixels.
pub fn render_scene_sized(a: &SceneAttributes, seed: u64, side: usize) -> RgbImage {
    let mut r = Stream::new(derive_seed(seed, &a.key()));
    let noise = value_noise(&mut r, side);
    let mut img = background(a, &noise, side);
    let s = side as f64;
    for _ in 0..a.count {
        match a.finding {
            Finding::Polyp => {
                let rx = s * (0.11 + 0.08 * r.uniform());
                let ry = s * (0.11 + 0.08 * r.uniform());
                let cx = rx + r.uniform() * (s - 2.0 * rx);
                let cy = ry + r.uniform() * (s - 2.0 * ry);
                let fill = match a.modality {
                    Modality::Endo => HUE_BASE[a.hue as usize].map(|b| (b + 0.35 * (255.0 - b)).round() as u8),
                    Modality::Xray => [205, 205, 205],
                };
                draw_ellipse(&mut img, cx, cy, rx, ry, fill, rim_color(a));
            }
            Finding::Instrument => draw_instrument(&mut img, &mut r, a),
            Finding::Clean => {}
        }
    }
    img
}

pub fn render_scene(a: &SceneAttributes, seed: u64) -> RgbImage {
    render_scene_sized(a, seed, super::DEFAULT_IMAGE_SIZE)
}
