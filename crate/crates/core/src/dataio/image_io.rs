//! PNG/JPEG reading and PNG writing for image tiles and masks.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageOutputFormat};

use super::synth::rgb8_to_tensor;
use super::{Sample, Split};
use crate::error::{io_err, Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// Mask values at or above this are road.
pub const MASK_THRESHOLD: u8 = 128;
/// Mask values strictly between these bounds are ambiguous.
pub const AMBIGUOUS_BAND: (u8, u8) = (32, 223);
/// Largest share of ambiguous mask pixels tolerated (anti-aliased edges).
pub const AMBIGUOUS_TOLERANCE: f64 = 0.01;

fn read_image(path: &Path) -> Result<(DynamicImage, ImageFormat)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let format = image::guess_format(&bytes).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })?;
    Ok((img, format))
}

/// Reads an RGB image as `[3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let (img, format) = read_image(path)?;
    match format {
        ImageFormat::Png => {}
        ImageFormat::Jpeg => log::warn!("{}: JPEG input is lossy", path.display()),
        other => {
            return Err(Error::Image {
                path: path.into(),
                message: format!("unsupported format {other:?}"),
            })
        }
    }
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(rgb8_to_tensor(rgb.as_raw(), h as usize, w as usize))
}

/// Reads a single-channel mask, binarized at 128.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let (img, format) = read_image(path)?;
    if format != ImageFormat::Png {
        return Err(Error::Image {
            path: path.into(),
            message: "masks must be PNG".into(),
        });
    }
    if img.color().channel_count() != 1 {
        return Err(Error::Image {
            path: path.into(),
            message: format!("mask must be single-channel, found {:?}", img.color()),
        });
    }
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let ambiguous = luma
        .as_raw()
        .iter()
        .filter(|&&v| v > AMBIGUOUS_BAND.0 && v < AMBIGUOUS_BAND.1)
        .count();
    if ambiguous as f64 > AMBIGUOUS_TOLERANCE * luma.as_raw().len() as f64 {
        return Err(Error::NonBinaryMask {
            path: path.into(),
            count: ambiguous,
        });
    }
    BinaryMask::new(
        [h as usize, w as usize],
        luma.as_raw().iter().map(|&v| v >= MASK_THRESHOLD).collect(),
    )
}

pub fn load_image_pair(image: &Path, mask: &Path, id: &str, split: Split) -> Result<Sample> {
    let img = load_image(image)?;
    let m = load_mask(mask)?;
    let (ih, iw) = (img.shape()[1], img.shape()[2]);
    let (mh, mw) = (m.shape()[0], m.shape()[1]);
    if (ih, iw) != (mh, mw) {
        return Err(Error::SizeMismatch {
            image: (ih, iw),
            mask: (mh, mw),
        });
    }
    Sample::new(id, split, img, m)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// PNG bytes of a `[3, H, W]` image in `[0, 1]`.
pub fn encode_image_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Shape(format!("expected [3, H, W], got {:?}", image.shape())));
    };
    let plane = h * w;
    let mut rgb = vec![0u8; plane * 3];
    for (i, px) in rgb.iter_mut().enumerate() {
        *px = quantize(image.data()[(i % 3) * plane + i / 3]);
    }
    encode_png(DynamicImage::ImageRgb8(
        image::RgbImage::from_raw(w as u32, h as u32, rgb).expect("buffer sized to image"),
    ))
}

/// PNG bytes of an 8-bit grayscale plane.
pub fn encode_gray_png(values: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(Error::Shape(format!("{} values for a {h}x{w} plane", values.len())));
    }
    encode_png(DynamicImage::ImageLuma8(
        image::GrayImage::from_raw(w as u32, h as u32, values.to_vec()).expect("buffer sized to plane"),
    ))
}

pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let &[h, w] = mask.shape() else {
        return Err(Error::Shape(format!("expected [H, W] mask, got {:?}", mask.shape())));
    };
    let v: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_gray_png(&v, h, w)
}

fn encode_png(img: DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageOutputFormat::Png).map_err(|e| Error::Image {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(out.into_inner())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn save_image_png(path: &Path, image: &Tensor<f32>) -> Result<Vec<u8>> {
    let bytes = encode_image_png(image)?;
    write_bytes(path, &bytes)?;
    Ok(bytes)
}

pub fn save_mask_png(path: &Path, mask: &BinaryMask) -> Result<Vec<u8>> {
    let bytes = encode_mask_png(mask)?;
    write_bytes(path, &bytes)?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{synth_sample, SynthConfig};

    #[test]
    fn synthetic_sample_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_sample(&SynthConfig::default(), 3);
        let (ip, mp) = (dir.path().join("i.png"), dir.path().join("m.png"));
        save_image_png(&ip, &s.image).unwrap();
        save_mask_png(&mp, &s.mask).unwrap();
        let back = load_image_pair(&ip, &mp, &s.id, s.split).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn threshold_and_white_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_bytes(&p, &encode_gray_png(&[255; 16], 4, 4).unwrap()).unwrap();
        assert!(load_mask(&p).unwrap().data().iter().all(|&b| b));
        let mut v = vec![0u8; 400];
        v[0] = 200;
        v[1] = 50;
        write_bytes(&p, &encode_gray_png(&v, 20, 20).unwrap()).unwrap();
        let m = load_mask(&p).unwrap();
        assert!(m.data()[0]);
        assert!(!m.data()[1]);
    }

    #[test]
    fn error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(load_mask(&missing), Err(Error::Io { .. })));

        let gray = dir.path().join("gray.png");
        write_bytes(&gray, &encode_gray_png(&[128; 16], 4, 4).unwrap()).unwrap();
        assert!(matches!(load_mask(&gray), Err(Error::NonBinaryMask { count: 16, .. })));

        let img = dir.path().join("img.png");
        save_image_png(&img, &Tensor::zeros([3, 4, 5])).unwrap();
        let small = dir.path().join("small.png");
        write_bytes(&small, &encode_gray_png(&[0; 16], 4, 4).unwrap()).unwrap();
        assert!(matches!(
            load_image_pair(&img, &small, "x", Split::Train),
            Err(Error::SizeMismatch { .. })
        ));

        let junk = dir.path().join("junk.png");
        write_bytes(&junk, b"not an image").unwrap();
        assert!(matches!(load_image(&junk), Err(Error::Image { .. })));
    }
}
