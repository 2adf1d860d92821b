use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use super::Image;
use crate::error::{Error, Result};

/// Reads any decodable image as 8-bit RGB with `v = byte / 255`.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

fn to_rgb8(image: &Image) -> RgbImage {
    let bytes = image
        .as_slice()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("buffer sized from image dims")
}

/// PNG bytes of `image` (8-bit RGB, values rounded to the nearest byte).
pub fn encode_png(image: &Image) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(image)
        .write_to(&mut out, ImageFormat::Png)
        .expect("in-memory png encoding");
    out.into_inner()
}

pub fn write_png(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(image)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_image_round_trips_exactly() {
        let img = Image::from_fn(5, 7, |y, x, c| ((y * 31 + x * 17 + c * 101) % 256) as f64 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        write_png(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_png("/nonexistent/x.png"), Err(Error::Io { .. })));
    }
}
