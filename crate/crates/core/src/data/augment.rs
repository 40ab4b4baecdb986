use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::uniform;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Range of the cropped area as a fraction of the image (square crops).
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    /// Side fraction kept by the test-time center crop.
    pub test_crop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.6, 1.0],
            flip_prob: 0.5,
            jitter: 0.4,
            test_crop: 0.875,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Train,
    Test,
    /// Pass-through.
    Off,
}

/// Augments one `C×H×W` image. The output has the input's shape and values
/// in `[0, 1]`.
pub fn augment(image: &[f64], shape: [usize; 3], cfg: &AugmentConfig, mode: AugmentMode, rng: &mut Rng) -> Vec<f64> {
    let [_, h, w] = shape;
    let mut out = match mode {
        AugmentMode::Off => return image.to_vec(),
        AugmentMode::Test => {
            let side = cfg.test_crop.clamp(0.0, 1.0);
            let (ch, cw) = (side * h as f64, side * w as f64);
            crop_resize(image, shape, (h as f64 - ch) / 2.0, (w as f64 - cw) / 2.0, ch, cw)
        }
        AugmentMode::Train => {
            let area = uniform(rng, cfg.crop_scale[0], cfg.crop_scale[1]).clamp(0.0, 1.0);
            let side = area.sqrt();
            let (ch, cw) = (side * h as f64, side * w as f64);
            let oy = uniform(rng, 0.0, h as f64 - ch);
            let ox = uniform(rng, 0.0, w as f64 - cw);
            let mut img = crop_resize(image, shape, oy, ox, ch, cw);
            if rng.gen::<f64>() < cfg.flip_prob {
                flip_horizontal(&mut img, shape);
            }
            let j = cfg.jitter.max(0.0);
            let brightness = uniform(rng, 1.0 - j, 1.0 + j);
            let contrast = uniform(rng, 1.0 - j, 1.0 + j);
            let saturation = uniform(rng, 1.0 - j, 1.0 + j);
            color_jitter(&mut img, shape, brightness, contrast, saturation);
            img
        }
    };
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Bilinear resample of the window at `(oy, ox)` of size `ch×cw` back to the
/// full `h×w` grid (pixel-center alignment).
fn crop_resize(image: &[f64], [c, h, w]: [usize; 3], oy: f64, ox: f64, ch: f64, cw: f64) -> Vec<f64> {
    if ch == h as f64 && cw == w as f64 && oy == 0.0 && ox == 0.0 {
        return image.to_vec();
    }
    let coord = |o: usize, off: f64, span: f64, n: usize| {
        let s = (off + (o as f64 + 0.5) * span / n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..h).map(|y| coord(y, oy, ch, h)).collect();
    let xs: Vec<_> = (0..w).map(|x| coord(x, ox, cw, w)).collect();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &image[ci * h * w..(ci + 1) * h * w];
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[ci * h * w + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn flip_horizontal(image: &mut [f64], [_, _, w]: [usize; 3]) {
    for row in image.chunks_mut(w) {
        row.reverse();
    }
}

fn color_jitter(image: &mut [f64], [c, h, w]: [usize; 3], brightness: f64, contrast: f64, saturation: f64) {
    let plane = h * w;
    if brightness != 1.0 {
        image.iter_mut().for_each(|v| *v *= brightness);
    }
    if contrast != 1.0 {
        let mean = image.iter().sum::<f64>() / image.len() as f64;
        image.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
    }
    if saturation != 1.0 && c == 3 {
        for p in 0..plane {
            let gray = 0.299 * image[p] + 0.587 * image[plane + p] + 0.114 * image[2 * plane + p];
            for ci in 0..3 {
                let v = &mut image[ci * plane + p];
                *v = gray + (*v - gray) * saturation;
            }
        }
    }
}
