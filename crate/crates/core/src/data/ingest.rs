use std::fs;
use std::path::Path;

use image::imageops::FilterType;

use super::Dataset;
use crate::error::{Error, Result};

/// Loads a directory-per-class image folder. Class directories are sorted by
/// name and numbered from 0; every decodable image is converted to RGB and
/// resized to `size × size`.
pub fn load_image_folder(root: &Path, size: usize) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let mut class_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Config(format!("{} contains no class directories", root.display())));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::parse(file.display().to_string(), e))?
                .resize_exact(size as u32, size as u32, FilterType::Triangle)
                .to_rgb8();
            let plane = size * size;
            let start = pixels.len();
            pixels.resize(start + 3 * plane, 0.0);
            for (i, px) in img.pixels().enumerate() {
                for ch in 0..3 {
                    pixels[start + ch * plane + i] = px[ch] as f64 / 255.0;
                }
            }
            labels.push(class as u32);
        }
    }
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image-folder".into());
    Dataset::new(name, [3, size, size], pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_class_folders() {
        let dir = tempfile::tempdir().unwrap();
        for (ci, name) in ["a_cls", "b_cls"].iter().enumerate() {
            let d = dir.path().join(name);
            fs::create_dir(&d).unwrap();
            for j in 0..2 {
                let img = image::RgbImage::from_pixel(6, 6, image::Rgb([ci as u8 * 200, 10, 255]));
                img.save(d.join(format!("{j}.png"))).unwrap();
            }
        }
        let ds = load_image_folder(dir.path(), 4).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.classes().len(), 2);
        assert_eq!(ds.image_shape(), [3, 4, 4]);
        assert!((ds.image(3)[0] - 200.0 / 255.0).abs() < 1e-12);
        assert!((ds.image(0)[32] - 1.0).abs() < 1e-12);
    }
}
