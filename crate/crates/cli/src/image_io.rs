//! 8-bit RGB image files ↔ `[0, 1]` patches.

use std::path::Path;

use cgd_core::ImagePatch;
use image::{ImageFormat, RgbImage};

pub fn read(path: &Path) -> Result<ImagePatch, String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    ImagePatch::from_vec(h, w, data).map_err(|e| e.to_string())
}

/// Quantizes with `round(255·clamp(v, 0, 1))`.
pub fn write(path: &Path, patch: &ImagePatch) -> Result<(), String> {
    let (h, w) = (patch.height(), patch.width());
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (patch.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    let format = ImageFormat::from_path(path).map_err(|e| e.to_string())?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(format!("unsupported output format {format:?} (use .png or .ppm)"));
    }
    img.save_with_format(path, format).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i * 4) as f32 / 255.0).collect();
        let p = ImagePatch::from_vec(4, 5, data).unwrap();
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            write(&path, &p).unwrap();
            assert_eq!(read(&path).unwrap(), p);
        }
        assert!(write(&dir.path().join("a.bmp"), &p).is_err());
    }
}
