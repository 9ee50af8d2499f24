use crate::error::{invalid, Result};
use crate::manips::jpeg::jpeg_simulate;
use crate::manips::{Manipulation, OpFamily};
use crate::pixel::{bilinear_resize, clip01, Image, RngStream};

/// Apply a manipulation to `p`. Output always has the shape of `p`.
///
/// `rng` is consumed by the stochastic families (noise, patch shuffle);
/// `partner` must be given for mixup and only for mixup.
pub fn apply(
    m: &Manipulation,
    p: &Image,
    rng: &mut RngStream,
    partner: Option<&Image>,
) -> Result<Image> {
    if m.family.needs_partner() != partner.is_some() {
        return Err(if partner.is_none() {
            invalid!("mixup requires a partner image")
        } else {
            invalid!("{} does not take a partner image", m.family)
        });
    }
    let param = m.param;
    if !param.is_finite() {
        return Err(invalid!("non-finite parameter for {}", m.family));
    }
    match m.family {
        OpFamily::None => Ok(p.clone()),
        OpFamily::JpegCompression => {
            if param.fract() != 0.0 {
                return Err(invalid!("jpeg quality must be an integer, got {param}"));
            }
            jpeg_simulate(p, param as u32)
        }
        OpFamily::GaussianNoise => {
            if param < 0.0 {
                return Err(invalid!("noise variance must be non-negative, got {param}"));
            }
            let sigma = param.sqrt();
            Ok(p.map_with(|v| v + sigma * rng.normal()))
        }
        OpFamily::Rotation => rotate(p, param),
        OpFamily::Downsampling => {
            let k = positive_int(param, "downsampling factor")?;
            let small = bilinear_resize(p, p.height().div_ceil(k), p.width().div_ceil(k))?;
            bilinear_resize(&small, p.height(), p.width())
        }
        OpFamily::Quantization => {
            let levels = positive_int(param, "quantization levels")?;
            if levels < 2 {
                return Err(invalid!("quantization needs at least 2 levels, got {levels}"));
            }
            let steps = (levels - 1) as f64;
            Ok(p.map(|v| (v * steps).round() / steps))
        }
        OpFamily::Pixelation => pixelate(p, positive_int(param, "pixelation block size")?),
        OpFamily::Exposure => {
            if param < 0.0 {
                return Err(invalid!("exposure gain must be non-negative, got {param}"));
            }
            Ok(p.map(|v| v * param))
        }
        OpFamily::GaussianBlur => gaussian_blur(p, param),
        OpFamily::PatchShuffle => patch_shuffle(p, param, rng),
        OpFamily::Mixup => {
            let partner = partner.expect("checked above");
            if !partner.same_shape(p) {
                return Err(invalid!(
                    "mixup partner shape {:?} differs from {:?}",
                    partner.dims(),
                    p.dims()
                ));
            }
            if !(0.0..=1.0).contains(&param) {
                return Err(invalid!("mixup weight must be in [0, 1], got {param}"));
            }
            let data = p
                .data()
                .iter()
                .zip(partner.data())
                .map(|(&a, &b)| (1.0 - param) * a + param * b)
                .collect();
            Image::from_vec(p.height(), p.width(), p.channels(), data)
        }
    }
}

fn positive_int(param: f64, what: &str) -> Result<usize> {
    if param < 1.0 || param.fract() != 0.0 {
        return Err(invalid!("{what} must be a positive integer, got {param}"));
    }
    Ok(param as usize)
}

trait MapWith {
    fn map_with(&self, f: impl FnMut(f64) -> f64) -> Image;
}

impl MapWith for Image {
    /// Sequential map for closures that draw from an rng.
    fn map_with(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        let data = self.data().iter().map(|&v| clip01(f(v))).collect();
        Image::from_vec(self.height(), self.width(), self.channels(), data)
            .expect("shape unchanged")
    }
}

/// Counter-clockwise rotation by a multiple of 90 degrees.
fn rotate(p: &Image, degrees: f64) -> Result<Image> {
    let (h, w, c) = p.dims();
    let quarter = match degrees {
        d if d == 0.0 => return Ok(p.clone()),
        d if d == 90.0 => 1,
        d if d == 180.0 => 2,
        d if d == 270.0 => 3,
        d => return Err(invalid!("rotation must be 90, 180 or 270 degrees, got {d}")),
    };
    if quarter != 2 && h != w {
        return Err(invalid!(
            "rotation by {degrees} needs a square image, got {h}x{w}"
        ));
    }
    Image::from_fn(h, w, c, |y, x, ch| match quarter {
        1 => p.get(x, w - 1 - y, ch),
        2 => p.get(h - 1 - y, w - 1 - x, ch),
        _ => p.get(h - 1 - x, y, ch),
    })
}

fn pixelate(p: &Image, block: usize) -> Result<Image> {
    let (h, w, c) = p.dims();
    let mut out = p.clone();
    let mut sums = vec![0.0; c];
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let ye = (by + block).min(h);
            let xe = (bx + block).min(w);
            sums.iter_mut().for_each(|s| *s = 0.0);
            for y in by..ye {
                for x in bx..xe {
                    for (ch, s) in sums.iter_mut().enumerate() {
                        *s += p.get(y, x, ch);
                    }
                }
            }
            let n = ((ye - by) * (xe - bx)) as f64;
            for y in by..ye {
                for x in bx..xe {
                    for (ch, s) in sums.iter().enumerate() {
                        out.set(y, x, ch, s / n);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Normalised Gaussian weights for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
#[inline]
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as i64 {
        m = period - m;
    }
    m as usize
}

fn gaussian_blur(p: &Image, sigma: f64) -> Result<Image> {
    if sigma < 0.0 {
        return Err(invalid!("blur sigma must be non-negative, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(p.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w, c) = p.dims();
    let src = p.data();
    // horizontal pass
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sx = reflect(x as i64 + j as i64 - r, w);
                    acc += kv * src[(y * w + sx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    // vertical pass
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sy = reflect(y as i64 + j as i64 - r, h);
                    acc += kv * tmp[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Image::from_vec(h, w, c, out)
}

const SHUFFLE_GRID: usize = 8;

/// Cell `i` of `cells` along an axis of length `len`: (start, core length).
/// The last cell's extra remainder stays in place; only the leading
/// `len / cells` samples of each cell move.
fn cell_span(i: usize, cells: usize, len: usize) -> (usize, usize) {
    let size = len / cells;
    (i * size, size)
}

fn patch_shuffle(p: &Image, fraction: f64, rng: &mut RngStream) -> Result<Image> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid!("shuffle fraction must be in [0, 1], got {fraction}"));
    }
    let (h, w, c) = p.dims();
    let rows = SHUFFLE_GRID.min(h);
    let cols = SHUFFLE_GRID.min(w);
    let cells = rows * cols;
    let k = (fraction * cells as f64).ceil() as usize;
    if k == 0 {
        return Ok(p.clone());
    }
    let selected = rng.sample_indices(cells, k);
    let mut targets = selected.clone();
    rng.shuffle(&mut targets);

    let mut out = p.clone();
    for (&from, &to) in selected.iter().zip(&targets) {
        if from == to {
            continue;
        }
        let (fy, ch_) = cell_span(from / cols, rows, h);
        let (fx, cw) = cell_span(from % cols, cols, w);
        let (ty, _) = cell_span(to / cols, rows, h);
        let (tx, _) = cell_span(to % cols, cols, w);
        for dy in 0..ch_ {
            for dx in 0..cw {
                for ch in 0..c {
                    out.set(ty + dy, tx + dx, ch, p.get(fy + dy, fx + dx, ch));
                }
            }
        }
    }
    Ok(out)
}
