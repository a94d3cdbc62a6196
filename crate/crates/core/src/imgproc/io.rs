use std::path::Path;

use super::ImageTensor;
use crate::error::{NeatError, Result};

/// Decode a PNG/JPEG into an RGB image in [0, 1].
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let decoded = image::open(path).map_err(|e| NeatError::Data {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(3, h, w, data)
}

/// Encode as 8-bit RGB (or gray for one channel); format from the extension.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match img.channels() {
        3 => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (i, px) in buf.pixels_mut().enumerate() {
                for c in 0..3 {
                    px[c] = quantize(img.plane(c)[i]);
                }
            }
            buf.save(path)?;
        }
        1 => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for (i, px) in buf.pixels_mut().enumerate() {
                px[0] = quantize(img.plane(0)[i]);
            }
            buf.save(path)?;
        }
        c => return Err(NeatError::invalid(format!("cannot encode a {c}-channel image"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f64> = (0..3 * 8 * 8).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = ImageTensor::new(3, 8, 8, data).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn undecodable_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not an image").unwrap();
        assert!(matches!(load_image(&path), Err(NeatError::Data { .. })));
    }
}
