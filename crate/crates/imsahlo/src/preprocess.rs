//! Deterministic input normalization: area-interpolated resize, CLAHE local
//! contrast enhancement, and mask-safe nearest-neighbor resampling.

use crate::imgio::SamplePair;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("target size must be positive, got {0}x{1}")]
    NonPositiveTarget(usize, usize),
    #[error("source must be at least 8x8, got {0}x{1}")]
    SourceTooSmall(usize, usize),
    #[error("image ({ih}x{iw}) is smaller than one CLAHE tile ({th}x{tw})")]
    ImageSmallerThanTile {
        ih: usize,
        iw: usize,
        th: usize,
        tw: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// (height, width) fed to the network.
    pub target_size: (usize, usize),
    /// CLAHE tile size in pixels (height, width).
    pub clahe_tile: (usize, usize),
    pub clahe_clip: f64,
    pub apply_clahe: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: (512, 768),
            clahe_tile: (8, 8),
            clahe_clip: 3.0,
            apply_clahe: true,
        }
    }
}

impl PreprocessConfig {
    /// `encoder_depth` is the number of 2x downsamplings the target size
    /// must survive.
    pub fn validate(&self, encoder_depth: usize) -> Result<(), PreprocessError> {
        let (h, w) = self.target_size;
        if h == 0 || w == 0 {
            return Err(PreprocessError::NonPositiveTarget(h, w));
        }
        let div = 1usize << encoder_depth;
        if h % div != 0 || w % div != 0 {
            return Err(PreprocessError::InvalidConfig(format!(
                "target size {h}x{w} must be divisible by 2^{encoder_depth}"
            )));
        }
        if self.clahe_clip <= 1.0 {
            return Err(PreprocessError::InvalidConfig(
                "clahe_clip must be > 1.0".into(),
            ));
        }
        if self.clahe_tile.0 == 0 || self.clahe_tile.1 == 0 {
            return Err(PreprocessError::InvalidConfig("clahe_tile must be positive".into()));
        }
        Ok(())
    }
}

/// Area-averaging resize (box filter over the exact source footprint of
/// each destination pixel). Behaves as plain averaging when downscaling and
/// degenerates to identity at the source size.
pub fn resize_area(src: &Tensor, th: usize, tw: usize) -> Tensor {
    let [n, c, h, w] = src.shape();
    assert_eq!((n, c), (1, 1), "resize expects a single-channel image");
    if (th, tw) == (h, w) {
        return src.clone();
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = Tensor::zeros([1, 1, th, tw]);
    for oy in 0..th {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        for ox in 0..tw {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let mut acc = 0.0;
            let mut weight = 0.0;
            let mut y = y0.floor();
            while y < y1 {
                let wy = (y + 1.0).min(y1) - y.max(y0);
                let yi = (y as usize).min(h - 1);
                let mut x = x0.floor();
                while x < x1 {
                    let wx = (x + 1.0).min(x1) - x.max(x0);
                    let xi = (x as usize).min(w - 1);
                    acc += wy * wx * src.at(0, 0, yi, xi);
                    weight += wy * wx;
                    x += 1.0;
                }
                y += 1.0;
            }
            out.set(0, 0, oy, ox, acc / weight);
        }
    }
    out
}

/// Nearest-neighbor resize for masks; output is re-binarized.
pub fn resize_nearest_mask(src: &Tensor, th: usize, tw: usize) -> Tensor {
    let [_, _, h, w] = src.shape();
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = Tensor::zeros([1, 1, th, tw]);
    for oy in 0..th {
        let yi = (((oy as f64 + 0.5) * sy) as usize).min(h - 1);
        for ox in 0..tw {
            let xi = (((ox as f64 + 0.5) * sx) as usize).min(w - 1);
            out.set(0, 0, oy, ox, if src.at(0, 0, yi, xi) > 0.5 { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Resizes an image/mask pair to `(th, tw)`: the image by area averaging,
/// the mask by nearest neighbor (stays binary).
pub fn resize_pair(sample: &SamplePair, target: (usize, usize)) -> Result<SamplePair, PreprocessError> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(PreprocessError::NonPositiveTarget(th, tw));
    }
    let (h, w) = (sample.image.h(), sample.image.w());
    if h < 8 || w < 8 {
        return Err(PreprocessError::SourceTooSmall(h, w));
    }
    Ok(SamplePair {
        image: resize_area(&sample.image, th, tw),
        mask: resize_nearest_mask(&sample.mask, th, tw),
        id: sample.id.clone(),
        density_tag: sample.density_tag,
    })
}

const CLAHE_BINS: usize = 256;

fn clahe_bin(v: f64) -> usize {
    ((v * CLAHE_BINS as f64) as usize).min(CLAHE_BINS - 1)
}

/// Contrast-limited adaptive histogram equalization.
///
/// Non-overlapping tiles of `tile` pixels (edge tiles extend by clamping
/// coordinates, so every histogram sees a full tile worth of pixels), 256
/// bins, histogram clipped at `clip` times the mean bin count with the
/// excess redistributed uniformly, and per-pixel bilinear blending between
/// the four nearest tile mappings.
pub fn clahe(image: &Tensor, tile: (usize, usize), clip: f64) -> Result<Tensor, PreprocessError> {
    let [n, c, h, w] = image.shape();
    assert_eq!((n, c), (1, 1), "clahe expects a single-channel image");
    let (th, tw) = tile;
    if th == 0 || tw == 0 || clip <= 1.0 {
        return Err(PreprocessError::InvalidConfig(
            "clahe needs positive tile dims and clip > 1".into(),
        ));
    }
    if h < th || w < tw {
        return Err(PreprocessError::ImageSmallerThanTile {
            ih: h,
            iw: w,
            th,
            tw,
        });
    }
    let ty = h.div_ceil(th);
    let tx = w.div_ceil(tw);
    let tile_pixels = (th * tw) as f64;
    let limit = clip * tile_pixels / CLAHE_BINS as f64;

    // one equalization LUT per tile
    let mut luts = vec![vec![0.0f64; CLAHE_BINS]; ty * tx];
    for tyi in 0..ty {
        for txi in 0..tx {
            let mut hist = [0.0f64; CLAHE_BINS];
            for dy in 0..th {
                let y = (tyi * th + dy).min(h - 1);
                for dx in 0..tw {
                    let x = (txi * tw + dx).min(w - 1);
                    hist[clahe_bin(image.at(0, 0, y, x))] += 1.0;
                }
            }
            // clip and redistribute the excess uniformly
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > limit {
                    excess += *b - limit;
                    *b = limit;
                }
            }
            let share = excess / CLAHE_BINS as f64;
            let lut = &mut luts[tyi * tx + txi];
            let mut cdf = 0.0;
            for (b, l) in hist.iter().zip(lut.iter_mut()) {
                cdf += b + share;
                *l = cdf / tile_pixels;
            }
        }
    }

    // bilinear blend between the four neighboring tile mappings
    let mut out = Tensor::zeros(image.shape());
    for y in 0..h {
        let fy = (y as f64 + 0.5) / th as f64 - 0.5;
        let ty0 = (fy.floor() as isize).clamp(0, ty as isize - 1) as usize;
        let ty1 = (fy.floor() as isize + 1).clamp(0, ty as isize - 1) as usize;
        let wy = (fy - fy.floor()).clamp(0.0, 1.0);
        for x in 0..w {
            let fx = (x as f64 + 0.5) / tw as f64 - 0.5;
            let tx0 = (fx.floor() as isize).clamp(0, tx as isize - 1) as usize;
            let tx1 = (fx.floor() as isize + 1).clamp(0, tx as isize - 1) as usize;
            let wx = (fx - fx.floor()).clamp(0.0, 1.0);
            let b = clahe_bin(image.at(0, 0, y, x));
            let v00 = luts[ty0 * tx + tx0][b];
            let v01 = luts[ty0 * tx + tx1][b];
            let v10 = luts[ty1 * tx + tx0][b];
            let v11 = luts[ty1 * tx + tx1][b];
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            out.set(0, 0, y, x, (top + (bot - top) * wy).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Full preprocessing: resize, then CLAHE when enabled.
pub fn preprocess_sample(
    sample: &SamplePair,
    cfg: &PreprocessConfig,
) -> Result<SamplePair, PreprocessError> {
    let mut out = resize_pair(sample, cfg.target_size)?;
    if cfg.apply_clahe {
        out.image = clahe(&out.image, cfg.clahe_tile, cfg.clahe_clip)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::Density;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize, seed: u64) -> SamplePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::from_vec(
            [1, 1, h, w],
            (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        );
        let mask = image.map(|v| if v > 0.6 { 1.0 } else { 0.0 });
        SamplePair {
            image,
            mask,
            id: "t".into(),
            density_tag: Density::Sparse,
        }
    }

    #[test]
    fn resize_to_paper_resolution_shape() {
        let s = sample(1200, 1600, 1);
        let r = resize_pair(&s, (512, 768)).unwrap();
        assert_eq!(r.image.shape(), [1, 1, 512, 768]);
        assert_eq!(r.mask.shape(), [1, 1, 512, 768]);
        assert!(r.mask.is_binary());
    }

    #[test]
    fn resize_to_source_size_is_identity() {
        let s = sample(32, 48, 2);
        let r = resize_pair(&s, (32, 48)).unwrap();
        assert_eq!(r.image, s.image);
        assert_eq!(r.mask, s.mask);
    }

    #[test]
    fn checkerboard_mask_stays_binary_after_downsize() {
        let mut mask = Tensor::zeros([1, 1, 8, 8]);
        for y in 0..8 {
            for x in 0..8 {
                if (y + x) % 2 == 0 {
                    mask.set(0, 0, y, x, 1.0);
                }
            }
        }
        let s = SamplePair {
            image: mask.clone(),
            mask,
            id: "cb".into(),
            density_tag: Density::Sparse,
        };
        let r = resize_pair(&s, (4, 4)).unwrap();
        assert!(r.mask.is_binary());
    }

    #[test]
    fn resize_downscale_averages_blocks() {
        // 2x2 block average is exact for integer ratios
        let src = Tensor::from_vec([1, 1, 2, 4], vec![0.0, 1.0, 0.2, 0.6, 1.0, 0.0, 0.2, 0.6]);
        let r = resize_area(&src, 1, 2);
        assert!((r.at(0, 0, 0, 0) - 0.5).abs() < 1e-12);
        assert!((r.at(0, 0, 0, 1) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn clahe_constant_image_stays_constant() {
        let img = Tensor::full([1, 1, 32, 32], 0.37);
        let out = clahe(&img, (8, 8), 3.0).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn clahe_two_tile_halves_stay_nearly_flat() {
        // one tile row, two tiles: left all 0.2, right all 0.8; inter-tile
        // blending keeps each half flat up to the clipped-histogram residue
        let mut img = Tensor::zeros([1, 1, 8, 16]);
        for y in 0..8 {
            for x in 0..16 {
                img.set(0, 0, y, x, if x < 8 { 0.2 } else { 0.8 });
            }
        }
        let out = clahe(&img, (8, 8), 3.0).unwrap();
        let half_stats = |lo: usize, hi: usize| {
            let vals: Vec<f64> = (0..8)
                .flat_map(|y| (lo..hi).map(move |x| (y, x)))
                .map(|(y, x)| out.at(0, 0, y, x))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let spread = vals
                .iter()
                .map(|v| (v - mean).abs())
                .fold(0.0, f64::max);
            (mean, spread)
        };
        let (ml, sl) = half_stats(0, 8);
        let (mr, sr) = half_stats(8, 16);
        assert!(sl < 0.02, "left half spread {sl}");
        assert!(sr < 0.02, "right half spread {sr}");
        assert!(mr > ml, "right half must stay brighter");
    }

    #[test]
    fn clahe_boosts_low_contrast_ramp() {
        // fixed 64x64 ramp squeezed into [0.45, 0.55]
        let mut img = Tensor::zeros([1, 1, 64, 64]);
        for y in 0..64 {
            for x in 0..64 {
                img.set(0, 0, y, x, 0.45 + 0.1 * (x as f64 / 63.0));
            }
        }
        let out = clahe(&img, (8, 8), 3.0).unwrap();
        let std = |t: &Tensor| {
            let m = t.mean();
            (t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t.len() as f64).sqrt()
        };
        let (s_in, s_out) = (std(&img), std(&out));
        assert!(
            s_out > s_in,
            "contrast must increase: in {s_in:.4} out {s_out:.4}"
        );
        // regression fixtures: discrete uniform ramp over 64 levels in
        // [0.45, 0.55] has std 0.1 * sqrt((64^2 - 1) / 12) / 63; the output
        // value is frozen from the first verified run
        assert!((s_in - 0.0293221479).abs() < 1e-9, "input std {s_in}");
        assert!((s_out - 0.0311922046).abs() < 1e-9, "output std {s_out}");
    }

    #[test]
    fn clahe_output_stays_in_unit_range() {
        let s = sample(40, 56, 3);
        let out = clahe(&s.image, (8, 8), 3.0).unwrap();
        assert!(out.min() >= 0.0 && out.max() <= 1.0);
    }

    #[test]
    fn clahe_rejects_undersized_images() {
        let img = Tensor::zeros([1, 1, 6, 6]);
        assert!(matches!(
            clahe(&img, (8, 8), 3.0),
            Err(PreprocessError::ImageSmallerThanTile { .. })
        ));
    }

    #[test]
    fn preprocess_is_deterministic() {
        let s = sample(100, 140, 4);
        let cfg = PreprocessConfig {
            target_size: (64, 96),
            ..Default::default()
        };
        let a = preprocess_sample(&s, &cfg).unwrap();
        let b = preprocess_sample(&s, &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn config_validation_catches_divisibility() {
        let cfg = PreprocessConfig {
            target_size: (100, 96),
            ..Default::default()
        };
        assert!(cfg.validate(3).is_err());
        let cfg = PreprocessConfig {
            target_size: (64, 96),
            ..Default::default()
        };
        assert!(cfg.validate(3).is_ok());
    }
}
