//! Image container, seeded randomness, resampling, colour conversion,
//! quality metrics and PNG I/O.

mod image;
pub mod io;
mod rng;

pub use image::{bilinear_resize, psnr, rgb_to_ycbcr, ycbcr_to_rgb, Image};
pub(crate) use image::{clip01, rgb_to_ycbcr_px, ycbcr_to_rgb_px};
pub use rng::{splitmix64_finalize, stream_id, RngStream, SplitMix64};
