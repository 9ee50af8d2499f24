//! 8-bit PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pixel::Image;

/// Encode as an 8-bit grayscale or RGB PNG (`round(v * 255)`).
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(match img.channels() {
            1 => png::ColorType::Grayscale,
            _ => png::ColorType::Rgb,
        });
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Default);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&img.to_u8())
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Decode an 8-bit PNG into unit-interval samples (`v / 255`).
///
/// Palette and low-bit-depth files are expanded; alpha is dropped; 16-bit
/// samples are reduced to 8 bits.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Png(format!("{}: unexpanded palette", path.display())))
        }
    };
    let out_channels = if src_channels <= 2 { 1 } else { 3 };
    let mut bytes = Vec::with_capacity(h * w * out_channels);
    for px in buf[..h * w * src_channels].chunks_exact(src_channels) {
        bytes.extend_from_slice(&px[..out_channels]);
    }
    Image::from_u8(h, w, out_channels, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pixel::RngStream;

    #[test]
    fn png_round_trip_is_lossless_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::derive(11, 0);
        for c in [1, 3] {
            let img = Image::from_fn(13, 7, c, |_, _, _| rng.next_f64())
                .unwrap()
                .quantize_8bit();
            let path = dir.path().join(format!("x{c}.png"));
            write_png(&img, &path).unwrap();
            let back = read_png(&path).unwrap();
            assert_eq!(back.to_u8(), img.to_u8());
            assert_eq!(back, img);
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_png(Path::new("/nonexistent/definitely.png")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
