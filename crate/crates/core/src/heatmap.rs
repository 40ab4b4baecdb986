//! Activation heatmaps: channel-mean maps of every scale and of the fused
//! feature, min-max normalized and blown up to input size.

use std::path::Path;

use fsfg_autograd::Tensor;
use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

/// Min-max normalization to `[0, 1]`; a constant map becomes all `0.5`.
pub fn normalize(map: &[f64]) -> Vec<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; map.len()];
    }
    map.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Nearest-neighbor resize of a row-major `h×w` map.
pub fn upsample_nearest(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    (0..out_h)
        .flat_map(|i| (0..out_w).map(move |j| map[(i * h / out_h) * w + j * w / out_w]))
        .collect()
}

/// Mean over channels of sample `n` of a `[B, C, H, W]` tensor.
pub fn channel_mean(t: &Tensor, n: usize) -> (usize, usize, Vec<f64>) {
    let s = t.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let base = n * c * hw;
    let data = t.data();
    let map = (0..hw)
        .map(|p| (0..c).map(|ch| data[base + ch * hw + p]).sum::<f64>() / c as f64)
        .collect();
    (s[2], s[3], map)
}

fn to_gray(values: &[f64], h: usize, w: usize) -> GrayImage {
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(values[y as usize * w + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub sample: usize,
    /// `input`, `scale1`..`scale4` or `fused`.
    pub layer: String,
    pub file: String,
    /// Resolution of the map before upsampling.
    pub source_height: usize,
    pub source_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapManifest {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<HeatmapEntry>,
}

/// Writes one color input image and five grayscale heatmaps per sample of
/// `images: [B, 3, H, W]`, plus `manifest.json`.
pub fn export_heatmaps(model: &Model, images: &Tensor, dir: &Path) -> Result<HeatmapManifest> {
    let s = images.shape().to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Argument(format!("expected RGB image batch, got shape {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let (maps, fused) = model.features(images)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let save = |img: std::result::Result<(), image::ImageError>, path: &Path| {
        img.map_err(|e| Error::io(path, std::io::Error::other(e)))
    };

    let mut entries = Vec::new();
    for n in 0..s[0] {
        let file = format!("sample{n:03}_input.ppm");
        let path = dir.join(&file);
        let px = &images.data()[n * 3 * h * w..(n + 1) * 3 * h * w];
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| (px[c * h * w + y as usize * w + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([at(0), at(1), at(2)])
        });
        save(rgb.save_with_format(&path, ImageFormat::Pnm), &path)?;
        entries.push(HeatmapEntry {
            sample: n,
            layer: "input".into(),
            file,
            source_height: h,
            source_width: w,
        });

        let layers = maps
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("scale{}", i + 1), m))
            .chain(fused.iter().map(|f| ("fused".to_string(), f)));
        for (layer, t) in layers {
            let (mh, mw, mean) = channel_mean(t, n);
            let up = upsample_nearest(&normalize(&mean), mh, mw, h, w);
            let file = format!("sample{n:03}_{layer}.pgm");
            let path = dir.join(&file);
            save(to_gray(&up, h, w).save_with_format(&path, ImageFormat::Pnm), &path)?;
            entries.push(HeatmapEntry {
                sample: n,
                layer,
                file,
                source_height: mh,
                source_width: mw,
            });
        }
    }
    let manifest = HeatmapManifest { height: h, width: w, entries };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse("heatmap manifest", e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
