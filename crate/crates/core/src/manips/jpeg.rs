//! In-memory JPEG round trip: baseline DCT, Annex K tables scaled by the IJG
//! quality rule, 4:4:4 sampling and no entropy coding (which is lossless and
//! therefore irrelevant to the decoded pixels).

use std::sync::OnceLock;

use crate::error::{invalid, Result};
use crate::pixel::{rgb_to_ycbcr_px, ycbcr_to_rgb_px, Image};

/// Luminance table, ITU T.81 Annex K.1, row-major.
pub const BASE_LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Chrominance table, ITU T.81 Annex K.2, row-major.
pub const BASE_CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

fn scale_table(base: &[u16; 64], quality: u32) -> [u16; 64] {
    let scale = if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

/// (luma, chroma) quantization tables for an IJG quality in `1..=100`.
pub fn quant_tables(quality: u32) -> Result<([u16; 64], [u16; 64])> {
    if !(1..=100).contains(&quality) {
        return Err(invalid!("jpeg quality must be in 1..=100, got {quality}"));
    }
    Ok((
        scale_table(&BASE_LUMA_TABLE, quality),
        scale_table(&BASE_CHROMA_TABLE, quality),
    ))
}

/// `A[u][x] = C(u)/2 * cos((2x+1)uπ/16)`, so that `F = A S Aᵀ` is the
/// JPEG-normalised forward DCT and `S = Aᵀ F A` its inverse.
fn dct_matrix() -> &'static [[f64; 8]; 8] {
    static M: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    M.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (u, row) in m.iter_mut().enumerate() {
            let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5
                    * cu
                    * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
            }
        }
        m
    })
}

fn fdct(block: &[f64; 64]) -> [f64; 64] {
    let a = dct_matrix();
    let mut tmp = [0.0; 64];
    // rows: tmp[y][u] = Σ_x A[u][x] s[y][x]
    for y in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                acc += a[u][x] * block[y * 8 + x];
            }
            tmp[y * 8 + u] = acc;
        }
    }
    let mut out = [0.0; 64];
    // columns: out[v][u] = Σ_y A[v][y] tmp[y][u]
    for v in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                acc += a[v][y] * tmp[y * 8 + u];
            }
            out[v * 8 + u] = acc;
        }
    }
    out
}

fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let a = dct_matrix();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                acc += a[u][x] * coef[v * 8 + u];
            }
            tmp[v * 8 + x] = acc;
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for v in 0..8 {
                acc += a[v][y] * tmp[v * 8 + x];
            }
            out[y * 8 + x] = acc;
        }
    }
    out
}

/// Half-integers in exact arithmetic are common here (the DC term is a
/// sum of integers over 8, colour transforms have small rational
/// coefficients) and may land a few ulps either side of the tie. Values
/// within this distance of a half-integer are rounded as exact ties.
const TIE_EPS: f64 = 1e-9;

/// Round half away from zero, independent of floating-point summation order.
#[inline]
pub(crate) fn round_stable(x: f64) -> f64 {
    let twice = (2.0 * x).round();
    if twice.rem_euclid(2.0) == 1.0 && (2.0 * x - twice).abs() < TIE_EPS {
        (twice / 2.0).round()
    } else {
        x.round()
    }
}

#[inline]
fn to_level(v: f64) -> f64 {
    round_stable(v * 255.0).clamp(0.0, 255.0)
}

// 8-bit chroma is centred on level 128, so neutral colours carry exactly
// zero chroma through the codec.
const CHROMA_CENTER: f64 = 128.0;

#[inline]
fn chroma_level(c: f64) -> f64 {
    round_stable((c - 0.5) * 255.0 + CHROMA_CENTER).clamp(0.0, 255.0)
}

/// Compress and decompress one plane of 8-bit levels in place.
fn roundtrip_plane(plane: &mut [f64], h: usize, w: usize, table: &[u16; 64]) {
    let bh = h.div_ceil(8);
    let bw = w.div_ceil(8);
    let mut block = [0.0; 64];
    for by in 0..bh {
        for bx in 0..bw {
            for y in 0..8 {
                let sy = (by * 8 + y).min(h - 1);
                for x in 0..8 {
                    let sx = (bx * 8 + x).min(w - 1);
                    block[y * 8 + x] = plane[sy * w + sx] - 128.0;
                }
            }
            let mut coef = fdct(&block);
            for (c, &q) in coef.iter_mut().zip(table) {
                let q = q as f64;
                *c = round_stable(*c / q) * q;
            }
            let rec = idct(&coef);
            for y in 0..8 {
                let sy = by * 8 + y;
                if sy >= h {
                    break;
                }
                for x in 0..8 {
                    let sx = bx * 8 + x;
                    if sx >= w {
                        break;
                    }
                    plane[sy * w + sx] = round_stable(rec[y * 8 + x] + 128.0).clamp(0.0, 255.0);
                }
            }
        }
    }
}

/// JPEG round trip at the given quality. Rounding to integer levels happens
/// where a real codec rounds: colour-converted input samples, decoded
/// samples and the final RGB output.
pub fn jpeg_simulate(img: &Image, quality: u32) -> Result<Image> {
    let (luma, chroma) = quant_tables(quality)?;
    let (h, w, c) = img.dims();
    let n = h * w;
    let data = img.data();
    if c == 1 {
        let mut plane: Vec<f64> = data.iter().map(|&v| to_level(v)).collect();
        roundtrip_plane(&mut plane, h, w, &luma);
        return Image::from_vec(h, w, 1, plane.into_iter().map(|v| v / 255.0).collect());
    }
    let mut planes = vec![vec![0.0; n]; 3];
    for (i, px) in data.chunks_exact(3).enumerate() {
        let (y, cb, cr) = rgb_to_ycbcr_px(px[0], px[1], px[2]);
        planes[0][i] = to_level(y);
        planes[1][i] = chroma_level(cb);
        planes[2][i] = chroma_level(cr);
    }
    roundtrip_plane(&mut planes[0], h, w, &luma);
    roundtrip_plane(&mut planes[1], h, w, &chroma);
    roundtrip_plane(&mut planes[2], h, w, &chroma);
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        let (r, g, b) = ycbcr_to_rgb_px(
            planes[0][i] / 255.0,
            (planes[1][i] - CHROMA_CENTER) / 255.0 + 0.5,
            (planes[2][i] - CHROMA_CENTER) / 255.0 + 0.5,
        );
        out.extend_from_slice(&[to_level(r) / 255.0, to_level(g) / 255.0, to_level(b) / 255.0]);
    }
    Image::from_vec(h, w, 3, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_rounding_resolves_near_ties_away_from_zero() {
        assert_eq!(round_stable(2.5 - 1e-13), 3.0);
        assert_eq!(round_stable(2.5 + 1e-13), 3.0);
        assert_eq!(round_stable(-2.5 + 1e-13), -3.0);
        assert_eq!(round_stable(2.4999), 2.0);
        assert_eq!(round_stable(7.0 - 1e-13), 7.0);
    }

    #[test]
    fn quality_scaling_rule() {
        let (l60, c60) = quant_tables(60).unwrap();
        // scale 80: floor((16*80 + 50)/100) = 13
        assert_eq!(l60[0], 13);
        assert_eq!(c60[0], 14);
        let (l10, _) = quant_tables(10).unwrap();
        // scale 500: floor((16*500 + 50)/100) = 80
        assert_eq!(l10[0], 80);
        assert!(l10.iter().all(|&q| (1..=255).contains(&q)));
        let (l100, _) = quant_tables(100).unwrap();
        assert!(l100.iter().all(|&q| q == 1));
        assert!(quant_tables(0).is_err());
        assert!(quant_tables(101).is_err());
    }

    #[test]
    fn dct_inverse_is_exact() {
        let mut block = [0.0; 64];
        for (i, b) in block.iter_mut().enumerate() {
            *b = ((i * 37) % 255) as f64 - 128.0;
        }
        let back = idct(&fdct(&block));
        for (a, b) in block.iter().zip(back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_block_dc_matches_scalar_oracle() {
        // DC = 8 * (200 - 128) = 576; Q = 13; round(576/13) * 13 = 572;
        // reconstruction 572/8 + 128 = 199.5.
        let img = Image::filled(8, 8, 1, 200.0 / 255.0).unwrap();
        let coef = fdct(&[72.0; 64]);
        assert!((coef[0] - 576.0).abs() < 1e-9);
        let out = jpeg_simulate(&img, 60).unwrap();
        for &v in out.data() {
            assert!((v - 200.0 / 255.0).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn constant_gray_reconstructs_within_tolerance() {
        for level in 0..=255 {
            let v = level as f64 / 255.0;
            let img = Image::filled(20, 13, 3, v).unwrap();
            let out = jpeg_simulate(&img, 60).unwrap();
            for (a, b) in img.data().iter().zip(out.data()) {
                assert!((a - b).abs() <= 1.5 / 255.0, "{a} vs {b}");
            }
        }
    }
}
