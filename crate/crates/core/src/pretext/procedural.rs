//! Procedural stand-in for natural photographs.
//!
//! Each image is a sky gradient over a textured ground plane with a few
//! top-lit shapes. Scenes are upright (bright sky above, ground below) so
//! that rotations are detectable, and contain smooth regions, sharp edges
//! and fine texture so that every catalog operation leaves a visible trace.

use crate::error::{invalid, Result};
use crate::pixel::{Image, RngStream};

const MIN_SIZE: usize = 16;

fn random_color(rng: &mut RngStream, lo: f64, hi: f64) -> [f64; 3] {
    [rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)]
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Smoothly interpolated lattice noise in roughly `[-1, 1]`.
struct ValueNoise {
    cells_x: usize,
    spacing: f64,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut RngStream, h: usize, w: usize, spacing: f64) -> Self {
        let cells_x = (w as f64 / spacing).ceil() as usize + 2;
        let cells_y = (h as f64 / spacing).ceil() as usize + 2;
        let lattice = (0..cells_x * cells_y)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect();
        ValueNoise {
            cells_x,
            spacing,
            lattice,
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let gy = y / self.spacing;
        let gx = x / self.spacing;
        let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (smooth(gy.fract()), smooth(gx.fract()));
        let l = |yy: usize, xx: usize| self.lattice[yy * self.cells_x + xx];
        let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
        let bot = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

enum Shape {
    Disk {
        cy: f64,
        cx: f64,
        r: f64,
    },
    Rect {
        cy: f64,
        cx: f64,
        hh: f64,
        hw: f64,
        cos: f64,
        sin: f64,
    },
}

impl Shape {
    /// Signed distance in pixels (negative inside).
    fn distance(&self, y: f64, x: f64) -> f64 {
        match *self {
            Shape::Disk { cy, cx, r } => ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r,
            Shape::Rect {
                cy,
                cx,
                hh,
                hw,
                cos,
                sin,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = (dx * cos + dy * sin).abs() - hw;
                let v = (-dx * sin + dy * cos).abs() - hh;
                let outside = (u.max(0.0).powi(2) + v.max(0.0).powi(2)).sqrt();
                outside + u.max(v).min(0.0)
            }
        }
    }

    fn center_y_and_extent(&self) -> (f64, f64) {
        match *self {
            Shape::Disk { cy, r, .. } => (cy, r),
            Shape::Rect { cy, hh, hw, .. } => (cy, hh.max(hw)),
        }
    }
}

struct PlacedShape {
    shape: Shape,
    color: [f64; 3],
}

/// Generate one `h`×`w` RGB scene.
pub fn generate_procedural(rng: &mut RngStream, h: usize, w: usize) -> Result<Image> {
    if h < MIN_SIZE || w < MIN_SIZE {
        return Err(invalid!(
            "procedural images must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}"
        ));
    }
    let (hf, wf) = (h as f64, w as f64);

    // Sky: bright at the top, gradient axis tilted at most 25 degrees.
    let sky_top = random_color(rng, 0.55, 0.95);
    let sky_low = lerp3(sky_top, random_color(rng, 0.3, 0.8), rng.uniform(0.3, 0.8));
    let tilt = rng.uniform(-25.0f64, 25.0).to_radians();
    let (gy, gx) = (tilt.cos(), tilt.sin());

    // Ground below a slightly tilted horizon, darker and more textured.
    let horizon = hf * rng.uniform(0.4, 0.75);
    let slope = rng.uniform(-0.15, 0.15);
    let ground_near = random_color(rng, 0.1, 0.5);
    let ground_far = lerp3(ground_near, sky_low, rng.uniform(0.1, 0.4));

    let coarse_spacing = rng.uniform(6.0, 14.0);
    let coarse = ValueNoise::new(rng, h, w, coarse_spacing);
    let fine_spacing = rng.uniform(2.0, 4.0);
    let fine = ValueNoise::new(rng, h, w, fine_spacing);
    let coarse_amp = rng.uniform(0.02, 0.06);
    let ground_amp = rng.uniform(0.04, 0.1);

    let n_shapes = 1 + rng.below(4);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let scale = hf.min(wf);
        let cx = rng.uniform(0.0, wf);
        // shapes sit on or above the ground line, rarely in the sky
        let cy = rng.uniform(horizon * 0.5, hf);
        let shape = if rng.chance(0.5) {
            Shape::Disk {
                cy,
                cx,
                r: rng.uniform(0.06, 0.22) * scale,
            }
        } else {
            let angle = rng.uniform(-0.5, 0.5);
            Shape::Rect {
                cy,
                cx,
                hh: rng.uniform(0.05, 0.25) * scale,
                hw: rng.uniform(0.05, 0.25) * scale,
                cos: angle.cos(),
                sin: angle.sin(),
            }
        };
        shapes.push(PlacedShape {
            shape,
            color: random_color(rng, 0.05, 0.95),
        });
    }

    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let horizon_here = horizon + slope * (px - wf / 2.0);
            let mut color = if py < horizon_here {
                let t = ((py * gy + (px - wf / 2.0) * gx) / horizon_here.max(1.0)).clamp(0.0, 1.0);
                lerp3(sky_top, sky_low, t)
            } else {
                let t = ((py - horizon_here) / (hf - horizon_here).max(1.0)).clamp(0.0, 1.0);
                let mut g = lerp3(ground_far, ground_near, t);
                let tex = ground_amp * fine.at(py, px);
                g.iter_mut().for_each(|c| *c += tex);
                g
            };
            // soft horizon edge
            let edge = (0.5 - (py - horizon_here).abs()).clamp(0.0, 1.0);
            if edge > 0.0 {
                color = lerp3(color, lerp3(sky_low, ground_far, 0.5), edge * 0.5);
            }
            for s in &shapes {
                let coverage = (0.5 - s.shape.distance(py, px)).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let (cy, extent) = s.shape.center_y_and_extent();
                    // lit from above
                    let shade = 1.0 + 0.25 * ((cy - py) / extent.max(1.0)).clamp(-1.0, 1.0);
                    let lit = s.color.map(|c| c * shade);
                    color = lerp3(color, lit, coverage);
                }
            }
            let n = coarse_amp * coarse.at(py, px);
            for c in color {
                data.push(c + n);
            }
        }
    }
    Image::from_vec(h, w, 3, data)
}
