use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::{BinaryMask, Image, InstanceLabelMap};
use crate::error::{Error, Result};

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let img_err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(img_err)
}

fn encode_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads an 8-bit PNG as RGB (color inputs) or single-channel (gray inputs).
pub fn load_image(path: &Path) -> Result<Image> {
    let dynamic = decode(path)?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    if dynamic.color().has_color() {
        let rgb = dynamic.to_rgb8();
        let data = rgb.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Image::from_data(w, h, 3, data)
    } else {
        let gray = dynamic.to_luma8();
        let data = gray.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Image::from_data(w, h, 1, data)
    }
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let quantized: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    match image.channels() {
        1 => save_gray8(path, image.width(), image.height(), quantized),
        3 => RgbImage::from_raw(w, h, quantized)
            .expect("buffer sized to image")
            .save(path)
            .map_err(encode_err(path)),
        c => Err(Error::InvalidArgument(format!(
            "cannot encode a {c}-channel image as PNG"
        ))),
    }
}

/// Loads a mask from any PNG; a pixel is set when its gray level is at least 0.5.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let gray = decode(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let bits = gray.as_raw().iter().map(|&v| f32::from(v) / 255.0 >= 0.5).collect();
    BinaryMask::from_bits(w, h, bits)
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let values = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    save_gray8(path, mask.width(), mask.height(), values)
}

/// Loads an 8-bit label image; distinct nonzero gray levels become labels `1..=C` in ascending order.
pub fn load_label_map(path: &Path) -> Result<InstanceLabelMap> {
    let gray = decode(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut remap = [0u32; 256];
    let mut present = [false; 256];
    for &v in gray.as_raw() {
        present[v as usize] = true;
    }
    let mut next = 0;
    for level in 1..256 {
        if present[level] {
            next += 1;
            remap[level] = next;
        }
    }
    let labels = gray.as_raw().iter().map(|&v| remap[v as usize]).collect();
    InstanceLabelMap::from_labels(w, h, labels)
}

pub fn save_label_map(path: &Path, labels: &InstanceLabelMap) -> Result<()> {
    if labels.num_instances() > 255 {
        return Err(Error::InvalidArgument(format!(
            "{} labels do not fit an 8-bit PNG",
            labels.num_instances()
        )));
    }
    let values = labels.labels().iter().map(|&l| l as u8).collect();
    save_gray8(path, labels.width(), labels.height(), values)
}

pub fn save_gray8(path: &Path, width: usize, height: usize, values: Vec<u8>) -> Result<()> {
    GrayImage::from_raw(width as u32, height as u32, values)
        .ok_or_else(|| Error::InvalidArgument("gray buffer does not match extent".to_string()))?
        .save(path)
        .map_err(encode_err(path))
}

/// 16-bit gray PNG with `round(v * 65535)` per sample.
pub fn save_gray16(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let quantized: Vec<u16> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(width as u32, height as u32, quantized)
        .ok_or_else(|| Error::InvalidArgument("gray buffer does not match extent".to_string()))?
        .save(path)
        .map_err(encode_err(path))
}

pub fn save_rgb8(path: &Path, width: usize, height: usize, values: Vec<u8>) -> Result<()> {
    ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(width as u32, height as u32, values)
        .ok_or_else(|| Error::InvalidArgument("rgb buffer does not match extent".to_string()))?
        .save(path)
        .map_err(encode_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = BinaryMask::from_fn(13, 7, |x, y| (x * 3 + y) % 4 == 0);
        save_mask(&path, &mask).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
    }

    #[test]
    fn sixteen_bit_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        save_gray16(&path, 2, 1, &[0.6, 1.0]).unwrap();
        let img = image::open(&path).unwrap().to_luma16();
        assert_eq!(img.as_raw(), &vec![39321u16, 65535]);
    }

    #[test]
    fn label_map_round_trip_compacts_levels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        save_gray8(&path, 4, 1, vec![0, 7, 3, 7]).unwrap();
        let labels = load_label_map(&path).unwrap();
        assert_eq!(labels.labels(), &[0, 2, 1, 2]);
        save_label_map(&path, &labels).unwrap();
        assert_eq!(load_label_map(&path).unwrap(), labels);
    }

    #[test]
    fn rgb_image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let data: Vec<f32> = (0..5 * 4 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = Image::from_data(5, 4, 3, data).unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
