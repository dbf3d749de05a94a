use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::Error;
use crate::tensor::Tensor;

/// Decodes an image to an H×W×3 tensor with bytes mapped to `[0, 1]` by `/255`.
/// Gray and alpha channels are converted to RGB.
pub fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor<f32>, Error> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Tensor::new(&[h, w, 3], data)?)
}

/// Quantizes an H×W×3 tensor to 8 bits, clamping to `[0, 1]`; NaN maps to 0.
pub fn to_rgb8(image: &Tensor<f32>) -> Result<RgbImage, Error> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Invalid(format!("expected an H×W×3 image, got {shape:?}")));
    }
    let bytes = image
        .data()
        .iter()
        .map(|v| if v.is_nan() { 0 } else { (v.clamp(0.0, 1.0) * 255.0).round() as u8 })
        .collect();
    RgbImage::from_raw(shape[1] as u32, shape[0] as u32, bytes)
        .ok_or_else(|| Error::Invalid("image buffer size mismatch".into()))
}

pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>, Error> {
    let rgb = to_rgb8(image)?;
    let mut out = Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image {
        path: "<memory>".into(),
        msg: e.to_string(),
    })?;
    Ok(out.into_inner())
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<(), Error> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_within_half_a_level() {
        let img = Tensor::from_fn(&[5, 7, 3], |i| (i as f32 * 0.0137).fract());
        let back = decode_png(&encode_png(&img).unwrap(), Path::new("x.png")).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back) <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn black_pixel_reads_zero() {
        let img = Tensor::zeros(&[1, 1, 3]);
        let back = decode_png(&encode_png(&img).unwrap(), Path::new("x.png")).unwrap();
        assert_eq!(back.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let img = Tensor::new(&[1, 2, 3], vec![-0.5, 1.5, 0.5, f32::NAN, 2.0, -1.0]).unwrap();
        let rgb = to_rgb8(&img).unwrap();
        assert_eq!(rgb.into_raw(), vec![0, 255, 128, 0, 255, 0]);
    }

    #[test]
    fn garbage_is_an_image_error() {
        assert!(matches!(
            decode_png(b"not a png", Path::new("bad.png")),
            Err(Error::Image { .. })
        ));
    }
}
