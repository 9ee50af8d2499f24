use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Row-major, channel-interleaved raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        check_dims(height, width, channels)?;
        Ok(Image {
            height,
            width,
            channels,
            data: vec![value.clamp(0.0, 1.0); height * width * channels],
        })
    }

    /// Wrap raw samples; values are clipped into `[0, 1]`.
    pub fn from_vec(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(invalid!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            ));
        }
        for v in &mut data {
            *v = clip01(*v);
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    /// Build from a per-pixel function `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_dims(height, width, channels)?;
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(clip01(f(y, x, c)));
                }
            }
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    /// Store a sample, clipping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = clip01(v);
    }

    /// Apply `f` to every sample, clipping the result.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| clip01(f(v))).collect(),
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// Copy out a rectangular region.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(invalid!(
                "crop {}x{}@({},{}) outside {}x{} image",
                height,
                width,
                top,
                left,
                self.height,
                self.width
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = self.index(y, left, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Image {
            height,
            width,
            channels: c,
            data,
        })
    }

    /// Round every sample to the nearest 8-bit level.
    pub fn quantize_8bit(&self) -> Image {
        self.map(|v| (v * 255.0).round() / 255.0)
    }

    /// Samples as 8-bit values, `round(v * 255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Image> {
        Image::from_vec(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Mean over all samples.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

#[inline]
pub(crate) fn clip01(v: f64) -> f64 {
    // NaN maps to 0 so that the unit-interval invariant always holds.
    if v >= 1.0 {
        1.0
    } else if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(invalid!("image dimensions must be nonzero, got {height}x{width}"));
    }
    if channels != 1 && channels != 3 {
        return Err(invalid!("channels must be 1 or 3, got {channels}"));
    }
    Ok(())
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("resize target must be nonzero, got {out_h}x{out_w}"));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let ys = sample_positions(img.height, out_h);
    let xs = sample_positions(img.width, out_w);
    let c = img.channels;
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                data.push(clip01(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    })
}

/// For each output index: (lower source index, upper source index, weight of upper).
fn sample_positions(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    let max = (in_len - 1) as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor();
            let i0 = lo as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - lo)
        })
        .collect()
}

// Full-range BT.601 luma weights; the chroma rows and the inverse are derived
// from them exactly so that the round trip is limited only by rounding error.
const KR: f64 = 0.299;
const KB: f64 = 0.114;
const KG: f64 = 1.0 - KR - KB;

#[inline]
pub(crate) fn rgb_to_ycbcr_px(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = KR * r + KG * g + KB * b;
    let cb = (b - y) / (2.0 * (1.0 - KB)) + 0.5;
    let cr = (r - y) / (2.0 * (1.0 - KR)) + 0.5;
    (y, cb, cr)
}

#[inline]
pub(crate) fn ycbcr_to_rgb_px(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    let cb = cb - 0.5;
    let cr = cr - 0.5;
    let r = y + 2.0 * (1.0 - KR) * cr;
    let b = y + 2.0 * (1.0 - KB) * cb;
    let g = (y - KR * r - KB * b) / KG;
    (r, g, b)
}

fn convert3(img: &Image, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) -> Result<Image> {
    if img.channels != 3 {
        return Err(invalid!(
            "colour conversion needs 3 channels, got {}",
            img.channels
        ));
    }
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let (a, b, c) = f(px[0], px[1], px[2]);
        data.extend_from_slice(&[clip01(a), clip01(b), clip01(c)]);
    }
    Ok(Image {
        height: img.height,
        width: img.width,
        channels: 3,
        data,
    })
}

/// JFIF RGB → YCbCr with chroma offset by one half.
pub fn rgb_to_ycbcr(img: &Image) -> Result<Image> {
    convert3(img, rgb_to_ycbcr_px)
}

pub fn ycbcr_to_rgb(img: &Image) -> Result<Image> {
    convert3(img, ycbcr_to_rgb_px)
}

/// Peak signal-to-noise ratio in dB with peak 1. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(invalid!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        ));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}
