//! Synchronized geometric + photometric augmentation of image/mask pairs,
//! and the online batch generator feeding training.
//!
//! Every transform is driven by an explicit [`Draw`] record, so any
//! augmented sample can be replayed exactly from its logged draw. Geometric
//! transforms always resample the image bilinearly and the mask by nearest
//! neighbor (masks stay binary); photometric transforms never touch the
//! mask.

use crate::imgio::SamplePair;
use crate::kernels::gaussian_blur;
use crate::preprocess::clahe;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("degenerate crop: fraction {0} yields a zero-area window")]
    DegenerateCrop(f64),
    #[error("batch generator needs a nonempty sample list")]
    EmptySamples,
    #[error("batch size must be >= 1")]
    BadBatchSize,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Preprocess(#[from] crate::preprocess::PreprocessError),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticConfig {
    /// Displacement magnitude in pixels at the 512x768 reference canvas.
    pub alpha: f64,
    /// Gaussian smoothing of the displacement field, same reference scale.
    pub sigma: f64,
    pub probability: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self {
            alpha: 30.0,
            sigma: 6.0,
            probability: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GridDistortConfig {
    pub steps: usize,
    /// Per-cell scale drawn from [1 - limit, 1 + limit].
    pub limit: f64,
    pub probability: f64,
}

impl Default for GridDistortConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            limit: 0.2,
            probability: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_flip_h: f64,
    pub p_flip_v: f64,
    pub p_rotate: f64,
    pub rotate_max_deg: f64,
    pub p_crop: f64,
    /// Crop side fraction range; the crop is resized back to full size.
    pub crop_fraction: (f64, f64),
    pub p_brightness: f64,
    pub brightness_delta: f64,
    pub p_contrast: f64,
    pub contrast_delta: f64,
    pub p_noise: f64,
    pub noise_sigma: (f64, f64),
    pub p_blur: f64,
    pub blur_sigma: (f64, f64),
    pub elastic: ElasticConfig,
    pub grid_distort: GridDistortConfig,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip_h: 0.5,
            p_flip_v: 0.5,
            p_rotate: 0.5,
            rotate_max_deg: 45.0,
            p_crop: 0.5,
            crop_fraction: (0.8, 1.0),
            p_brightness: 0.5,
            brightness_delta: 0.3,
            p_contrast: 0.5,
            contrast_delta: 0.3,
            p_noise: 0.3,
            noise_sigma: (0.0, 0.05),
            p_blur: 0.3,
            blur_sigma: (0.0, 1.5),
            elastic: ElasticConfig::default(),
            grid_distort: GridDistortConfig::default(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration whose draws are always the identity.
    pub fn disabled() -> Self {
        Self {
            p_flip_h: 0.0,
            p_flip_v: 0.0,
            p_rotate: 0.0,
            p_crop: 0.0,
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_noise: 0.0,
            p_blur: 0.0,
            elastic: ElasticConfig {
                probability: 0.0,
                ..Default::default()
            },
            grid_distort: GridDistortConfig {
                probability: 0.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let probs = [
            self.p_flip_h,
            self.p_flip_v,
            self.p_rotate,
            self.p_crop,
            self.p_brightness,
            self.p_contrast,
            self.p_noise,
            self.p_blur,
            self.elastic.probability,
            self.grid_distort.probability,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(AugmentError::InvalidConfig(
                "probabilities must be in [0, 1]".into(),
            ));
        }
        if !(0.0..=180.0).contains(&self.rotate_max_deg) {
            return Err(AugmentError::InvalidConfig(
                "rotate_max_deg must be in [0, 180]".into(),
            ));
        }
        if self.grid_distort.limit >= 1.0 || self.grid_distort.limit < 0.0 {
            return Err(AugmentError::InvalidConfig(
                "grid limit must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// draw records
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CropDraw {
    pub fraction: f64,
    /// Window offsets as fractions of the slack, in [0, 1].
    pub off_y: f64,
    pub off_x: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ElasticDraw {
    pub seed: u64,
    pub alpha: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GridDraw {
    pub y_scales: Vec<f64>,
    pub x_scales: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct GeometricDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Degrees, counter-clockwise in display orientation; 0 disables.
    pub rotate_deg: f64,
    pub crop: Option<CropDraw>,
    pub elastic: Option<ElasticDraw>,
    pub grid: Option<GridDraw>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NoiseDraw {
    pub seed: u64,
    pub sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PhotometricDraw {
    /// Additive shift; 0 disables.
    pub brightness: f64,
    /// Scale about the image mean; 1 disables.
    pub contrast: f64,
    pub noise: Option<NoiseDraw>,
    /// Gaussian blur sigma; 0 disables.
    pub blur_sigma: f64,
}

impl Default for PhotometricDraw {
    fn default() -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            noise: None,
            blur_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Draw {
    pub geometric: GeometricDraw,
    pub photometric: PhotometricDraw,
}

impl Draw {
    pub fn identity() -> Self {
        Self::default()
    }
}

/// Samples one draw record from the config under the given RNG.
pub fn sample_draw(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Draw {
    let geometric = GeometricDraw {
        flip_h: rng.random_bool(cfg.p_flip_h),
        flip_v: rng.random_bool(cfg.p_flip_v),
        rotate_deg: if rng.random_bool(cfg.p_rotate) {
            rng.random_range(-cfg.rotate_max_deg..=cfg.rotate_max_deg)
        } else {
            0.0
        },
        crop: rng.random_bool(cfg.p_crop).then(|| CropDraw {
            fraction: rng.random_range(cfg.crop_fraction.0..=cfg.crop_fraction.1),
            off_y: rng.random_range(0.0..1.0),
            off_x: rng.random_range(0.0..1.0),
        }),
        elastic: rng.random_bool(cfg.elastic.probability).then(|| ElasticDraw {
            seed: rng.random(),
            alpha: cfg.elastic.alpha,
            sigma: cfg.elastic.sigma,
        }),
        grid: rng.random_bool(cfg.grid_distort.probability).then(|| {
            let lo = 1.0 - cfg.grid_distort.limit;
            let hi = 1.0 + cfg.grid_distort.limit;
            GridDraw {
                y_scales: (0..cfg.grid_distort.steps)
                    .map(|_| rng.random_range(lo..hi))
                    .collect(),
                x_scales: (0..cfg.grid_distort.steps)
                    .map(|_| rng.random_range(lo..hi))
                    .collect(),
            }
        }),
    };
    let photometric = PhotometricDraw {
        brightness: if rng.random_bool(cfg.p_brightness) {
            rng.random_range(-cfg.brightness_delta..=cfg.brightness_delta)
        } else {
            0.0
        },
        contrast: if rng.random_bool(cfg.p_contrast) {
            1.0 + rng.random_range(-cfg.contrast_delta..=cfg.contrast_delta)
        } else {
            1.0
        },
        noise: rng.random_bool(cfg.p_noise).then(|| NoiseDraw {
            seed: rng.random(),
            sigma: rng.random_range(cfg.noise_sigma.0..=cfg.noise_sigma.1),
        }),
        blur_sigma: if rng.random_bool(cfg.p_blur) {
            rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1)
        } else {
            0.0
        },
    };
    Draw {
        geometric,
        photometric,
    }
}

// ---------------------------------------------------------------------------
// warping machinery
// ---------------------------------------------------------------------------

enum Border {
    Fill(f64),
    Clamp,
}

/// Backward-warps `src` through `map: (out_y, out_x) -> (src_y, src_x)`.
fn warp_bilinear(src: &Tensor, map: &dyn Fn(f64, f64) -> (f64, f64), border: Border) -> Tensor {
    let [_, _, h, w] = src.shape();
    let mut out = Tensor::zeros(src.shape());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64, x as f64);
            let v = match border {
                Border::Fill(fill) => {
                    if sy < -0.5 || sy > h as f64 - 0.5 || sx < -0.5 || sx > w as f64 - 0.5 {
                        fill
                    } else {
                        sample_bilinear_clamped(src, sy, sx)
                    }
                }
                Border::Clamp => sample_bilinear_clamped(src, sy, sx),
            };
            out.set(0, 0, y, x, v);
        }
    }
    out
}

fn sample_bilinear_clamped(src: &Tensor, sy: f64, sx: f64) -> f64 {
    let (h, w) = (src.h(), src.w());
    let fy = sy.floor();
    let fx = sx.floor();
    let ty = sy - fy;
    let tx = sx - fx;
    let y0 = (fy as isize).clamp(0, h as isize - 1) as usize;
    let y1 = (fy as isize + 1).clamp(0, h as isize - 1) as usize;
    let x0 = (fx as isize).clamp(0, w as isize - 1) as usize;
    let x1 = (fx as isize + 1).clamp(0, w as isize - 1) as usize;
    let v00 = src.at(0, 0, y0, x0);
    let v01 = src.at(0, 0, y0, x1);
    let v10 = src.at(0, 0, y1, x0);
    let v11 = src.at(0, 0, y1, x1);
    let top = v00 + (v01 - v00) * tx;
    let bot = v10 + (v11 - v10) * tx;
    top + (bot - top) * ty
}

fn warp_nearest_mask(src: &Tensor, map: &dyn Fn(f64, f64) -> (f64, f64), border: Border) -> Tensor {
    let [_, _, h, w] = src.shape();
    let mut out = Tensor::zeros(src.shape());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64, x as f64);
            let (ry, rx) = (sy.round() as isize, sx.round() as isize);
            let v = if ry >= 0 && ry < h as isize && rx >= 0 && rx < w as isize {
                if src.at(0, 0, ry as usize, rx as usize) > 0.5 {
                    1.0
                } else {
                    0.0
                }
            } else {
                match border {
                    Border::Fill(_) => 0.0,
                    Border::Clamp => {
                        let cy = ry.clamp(0, h as isize - 1) as usize;
                        let cx = rx.clamp(0, w as isize - 1) as usize;
                        if src.at(0, 0, cy, cx) > 0.5 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            };
            out.set(0, 0, y, x, v);
        }
    }
    out
}

fn flip(t: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    let [_, _, h, w] = t.shape();
    let mut out = Tensor::zeros(t.shape());
    for y in 0..h {
        for x in 0..w {
            let sy = if vertical { h - 1 - y } else { y };
            let sx = if horizontal { w - 1 - x } else { x };
            out.set(0, 0, y, x, t.at(0, 0, sy, sx));
        }
    }
    out
}

/// Smoothed random displacement field for elastic warps; magnitudes scale
/// with the canvas relative to 512x768.
fn elastic_field(h: usize, w: usize, draw: &ElasticDraw) -> (Tensor, Tensor) {
    let scale = ((h * w) as f64 / (512.0 * 768.0)).sqrt();
    let alpha = draw.alpha * scale;
    let sigma = (draw.sigma * scale).max(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(draw.seed);
    let mut dy = Tensor::zeros([1, 1, h, w]);
    let mut dx = Tensor::zeros([1, 1, h, w]);
    for v in dy.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in dx.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut dy = gaussian_blur(&dy, sigma);
    let mut dx = gaussian_blur(&dx, sigma);
    for v in dy.data_mut() {
        *v *= alpha;
    }
    for v in dx.data_mut() {
        *v *= alpha;
    }
    (dy, dx)
}

/// Piecewise-linear axis map for grid distortion: `scales[k]` stretches
/// cell k, renormalized so the full axis maps onto itself.
fn grid_axis(len: usize, scales: &[f64]) -> Vec<f64> {
    let steps = scales.len();
    let nominal = len as f64 / steps as f64;
    let total: f64 = scales.iter().map(|s| s * nominal).sum();
    let norm = len as f64 / total;
    // source anchor positions for uniform output anchors
    let mut anchors = Vec::with_capacity(steps + 1);
    let mut acc = 0.0;
    anchors.push(0.0);
    for &s in scales {
        acc += s * nominal * norm;
        anchors.push(acc);
    }
    // per output coordinate, interpolated source coordinate
    (0..len)
        .map(|o| {
            let cell = ((o as f64 / nominal) as usize).min(steps - 1);
            let t = (o as f64 - cell as f64 * nominal) / nominal;
            anchors[cell] + t * (anchors[cell + 1] - anchors[cell])
        })
        .collect()
}

/// Applies the same spatial transform chain (flips, rotation, crop+resize,
/// elastic, grid) to the image (bilinear) and mask (nearest, re-binarized).
pub fn apply_geometric(sample: &SamplePair, draw: &GeometricDraw) -> Result<SamplePair, AugmentError> {
    let (h, w) = (sample.image.h(), sample.image.w());
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();

    if draw.flip_h || draw.flip_v {
        image = flip(&image, draw.flip_h, draw.flip_v);
        mask = flip(&mask, draw.flip_h, draw.flip_v);
    }

    if draw.rotate_deg != 0.0 {
        let theta = draw.rotate_deg.to_radians();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (ct, st) = (theta.cos(), theta.sin());
        // backward map: rotate output coords by -theta about the center
        let map = move |y: f64, x: f64| {
            let (ry, rx) = (y - cy, x - cx);
            (cy + st * rx + ct * ry, cx + ct * rx - st * ry)
        };
        image = warp_bilinear(&image, &map, Border::Fill(0.0));
        mask = warp_nearest_mask(&mask, &map, Border::Fill(0.0));
    }

    if let Some(crop) = &draw.crop {
        let ch = ((h as f64 * crop.fraction).round() as usize).min(h);
        let cw = ((w as f64 * crop.fraction).round() as usize).min(w);
        if ch == 0 || cw == 0 {
            return Err(AugmentError::DegenerateCrop(crop.fraction));
        }
        let oy = (crop.off_y * (h - ch) as f64).round();
        let ox = (crop.off_x * (w - cw) as f64).round();
        let sy = ch as f64 / h as f64;
        let sx = cw as f64 / w as f64;
        let map = move |y: f64, x: f64| (oy + y * sy, ox + x * sx);
        image = warp_bilinear(&image, &map, Border::Clamp);
        mask = warp_nearest_mask(&mask, &map, Border::Clamp);
    }

    if let Some(elastic) = &draw.elastic {
        let (dy, dx) = elastic_field(h, w, elastic);
        let map = move |y: f64, x: f64| {
            let i = y as usize * w + x as usize;
            (y + dy.data()[i], x + dx.data()[i])
        };
        image = warp_bilinear(&image, &map, Border::Clamp);
        mask = warp_nearest_mask(&mask, &map, Border::Clamp);
    }

    if let Some(grid) = &draw.grid {
        let ys = grid_axis(h, &grid.y_scales);
        let xs = grid_axis(w, &grid.x_scales);
        let map = move |y: f64, x: f64| (ys[y as usize], xs[x as usize]);
        image = warp_bilinear(&image, &map, Border::Clamp);
        mask = warp_nearest_mask(&mask, &map, Border::Clamp);
    }

    Ok(SamplePair {
        image,
        mask,
        id: sample.id.clone(),
        density_tag: sample.density_tag,
    })
}

/// Brightness shift, contrast scale about the mean, additive Gaussian
/// noise, Gaussian blur; output clipped to [0, 1]. Masks are untouched by
/// construction (this takes no mask).
pub fn apply_photometric(image: &Tensor, draw: &PhotometricDraw) -> Tensor {
    let mut out = image.clone();
    if draw.brightness != 0.0 {
        for v in out.data_mut() {
            *v += draw.brightness;
        }
    }
    if draw.contrast != 1.0 {
        let mean = out.mean();
        for v in out.data_mut() {
            *v = mean + draw.contrast * (*v - mean);
        }
    }
    if let Some(noise) = &draw.noise {
        if noise.sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            let dist = Normal::new(0.0, noise.sigma).unwrap();
            for v in out.data_mut() {
                *v += dist.sample(&mut rng);
            }
        }
    }
    if draw.blur_sigma > 0.0 {
        out = gaussian_blur(&out, draw.blur_sigma);
    }
    out.clamp_in_place(0.0, 1.0);
    out
}

// ---------------------------------------------------------------------------
// batch generator
// ---------------------------------------------------------------------------

/// Infinite augmented batch stream. Each pass over the data reshuffles the
/// sample order under the seeded generator; batches are always full size
/// (a batch may straddle two passes).
pub struct BatchGenerator {
    samples: Vec<SamplePair>,
    batch_size: usize,
    cfg: AugmentConfig,
    /// CLAHE (tile, clip) reapplied to augmented images, when set.
    reapply_clahe: Option<((usize, usize), f64)>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchGenerator {
    pub fn new(
        samples: Vec<SamplePair>,
        batch_size: usize,
        cfg: AugmentConfig,
        reapply_clahe: Option<((usize, usize), f64)>,
    ) -> Result<Self, AugmentError> {
        if samples.is_empty() {
            return Err(AugmentError::EmptySamples);
        }
        if batch_size == 0 {
            return Err(AugmentError::BadBatchSize);
        }
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            samples,
            batch_size,
            cfg,
            reapply_clahe,
            rng,
            order: Vec::new(),
            pos: 0,
        })
    }

    pub fn len_samples(&self) -> usize {
        self.samples.len()
    }

    /// Steps per epoch-equivalent pass: ceil(n / batch_size).
    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    fn next_index(&mut self) -> usize {
        use rand::seq::SliceRandom;
        if self.pos >= self.order.len() {
            self.order = (0..self.samples.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }

    /// Produces the next `(images, masks, ids)` batch, shapes
    /// `(batch, 1, h, w)`.
    pub fn next_batch(&mut self) -> Result<(Tensor, Tensor, Vec<String>), AugmentError> {
        let mut images = Vec::with_capacity(self.batch_size);
        let mut masks = Vec::with_capacity(self.batch_size);
        let mut ids = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let idx = self.next_index();
            let draw = sample_draw(&self.cfg, &mut self.rng);
            let sample = &self.samples[idx];
            let geo = apply_geometric(sample, &draw.geometric)?;
            let mut image = apply_photometric(&geo.image, &draw.photometric);
            if let Some((tile, clip)) = self.reapply_clahe {
                image = clahe(&image, tile, clip)?;
            }
            images.push(image);
            masks.push(geo.mask);
            ids.push(sample.id.clone());
        }
        Ok((Tensor::stack(&images), Tensor::stack(&masks), ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::Density;
    use crate::morph::dilate_cross;
    use rand::Rng;

    fn blob_sample(h: usize, w: usize, seed: u64) -> SamplePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = Tensor::zeros([1, 1, h, w]);
        // one large centered blob so components stay > 100 px
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let r = (h.min(w) as f64) * 0.3;
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                    mask.set(0, 0, y, x, 1.0);
                }
            }
        }
        let mut image = mask.map(|v| 0.2 + 0.6 * v);
        for v in image.data_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
        SamplePair {
            image,
            mask,
            id: format!("b{seed}"),
            density_tag: Density::Dense,
        }
    }

    #[test]
    fn identity_draw_is_identity() {
        let s = blob_sample(32, 40, 1);
        let out = apply_geometric(&s, &GeometricDraw::default()).unwrap();
        assert_eq!(out.image, s.image);
        assert_eq!(out.mask, s.mask);
        let img = apply_photometric(&s.image, &PhotometricDraw::default());
        assert_eq!(img, s.image);
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let s = blob_sample(24, 30, 2);
        let d = GeometricDraw {
            flip_h: true,
            ..Default::default()
        };
        let once = apply_geometric(&s, &d).unwrap();
        let twice = apply_geometric(&once, &d).unwrap();
        assert_eq!(twice.image, s.image);
        assert_eq!(twice.mask, s.mask);
    }

    #[test]
    fn ninety_degree_rotation_moves_pixel_to_mapped_coordinate() {
        // single pixel at (r, c) in a square canvas
        let n = 15usize;
        let (r, c) = (3usize, 11usize);
        let mut mask = Tensor::zeros([1, 1, n, n]);
        mask.set(0, 0, r, c, 1.0);
        let s = SamplePair {
            image: mask.clone(),
            mask,
            id: "px".into(),
            density_tag: Density::Sparse,
        };
        let d = GeometricDraw {
            rotate_deg: 90.0,
            ..Default::default()
        };
        let out = apply_geometric(&s, &d).unwrap();
        // coordinate-mapping oracle: +90 deg rotates content counter-
        // clockwise on screen, sending (r, c) to
        // (center - (c - center), center + (r - center))
        let cy = (n as f64 - 1.0) / 2.0;
        let er = (cy - (c as f64 - cy)) as usize;
        let ec = (cy + (r as f64 - cy)) as usize;
        assert_eq!(out.mask.sum(), 1.0);
        assert_eq!(out.mask.at(0, 0, er, ec), 1.0, "expected at ({er},{ec})");
    }

    #[test]
    fn all_transform_paths_keep_masks_binary() {
        let s = blob_sample(32, 48, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AugmentConfig::default();
        for _ in 0..25 {
            let d = sample_draw(&cfg, &mut rng);
            let out = apply_geometric(&s, &d.geometric).unwrap();
            assert!(out.mask.is_binary());
        }
    }

    #[test]
    fn foreground_count_drift_is_bounded() {
        let s = blob_sample(48, 64, 4);
        let count = s.mask.sum();
        assert!(count >= 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = AugmentConfig {
            // rotation and crop keep the blob in frame; elastic/grid warp it
            p_flip_h: 0.5,
            p_flip_v: 0.5,
            p_rotate: 1.0,
            rotate_max_deg: 45.0,
            p_crop: 0.0,
            ..AugmentConfig::default()
        };
        for i in 0..20 {
            let d = sample_draw(&cfg, &mut rng);
            let out = apply_geometric(&s, &d.geometric).unwrap();
            let drift = (out.mask.sum() - count).abs() / count;
            assert!(drift <= 0.1, "draw {i}: drift {drift}");
        }
    }

    #[test]
    fn image_mask_alignment_self_consistency() {
        // feed the mask through the image path: thresholded bilinear output
        // may only disagree with the nearest-neighbor mask near its boundary
        let s = blob_sample(40, 40, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = AugmentConfig::default();
        for _ in 0..10 {
            let d = sample_draw(&cfg, &mut rng);
            let mask_as_image = SamplePair {
                image: s.mask.clone(),
                ..s.clone()
            };
            let out = apply_geometric(&mask_as_image, &d.geometric).unwrap();
            let via_image = out.image.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            let band = dilate_cross(&dilate_cross(&out.mask));
            let inner = crate::morph::erode_cross(&crate::morph::erode_cross(&out.mask));
            for i in 0..via_image.len() {
                let mismatch = via_image.data()[i] != out.mask.data()[i];
                if mismatch {
                    let near_boundary = band.data()[i] > 0.5 && inner.data()[i] < 0.5;
                    assert!(near_boundary, "interior/background mismatch at {i}");
                }
            }
        }
    }

    #[test]
    fn brightness_shift_closed_form_and_clipping() {
        let img = Tensor::full([1, 1, 4, 4], 0.5);
        let d = PhotometricDraw {
            brightness: 0.3,
            ..Default::default()
        };
        let out = apply_photometric(&img, &d);
        assert!(out.data().iter().all(|&v| (v - 0.8).abs() < 1e-12));

        let img = Tensor::full([1, 1, 4, 4], 0.9);
        let out = apply_photometric(&img, &d);
        assert!(out.data().iter().all(|&v| v == 1.0), "clipped at 1");
    }

    #[test]
    fn contrast_scales_about_mean() {
        let img = Tensor::from_vec([1, 1, 1, 4], vec![0.2, 0.4, 0.6, 0.8]);
        let d = PhotometricDraw {
            contrast: 1.3,
            ..Default::default()
        };
        let out = apply_photometric(&img, &d);
        assert!((out.mean() - 0.5).abs() < 1e-12, "mean preserved");
        assert!((out.at(0, 0, 0, 0) - (0.5 + 1.3 * (0.2 - 0.5))).abs() < 1e-12);
    }

    #[test]
    fn generator_first_two_batches_partition_all_ids() {
        let samples: Vec<SamplePair> = (0..32).map(|i| blob_sample(16, 16, i)).collect();
        let mut generator =
            BatchGenerator::new(samples, 16, AugmentConfig::disabled(), None).unwrap();
        let (_, _, ids1) = generator.next_batch().unwrap();
        let (_, _, ids2) = generator.next_batch().unwrap();
        let mut all: Vec<String> = ids1.into_iter().chain(ids2).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 32, "two batches must cover a full permutation");
    }

    #[test]
    fn disabled_generator_reproduces_originals() {
        let samples: Vec<SamplePair> = (0..4).map(|i| blob_sample(16, 16, i)).collect();
        let mut generator =
            BatchGenerator::new(samples.clone(), 4, AugmentConfig::disabled(), None).unwrap();
        let (images, masks, ids) = generator.next_batch().unwrap();
        for (k, id) in ids.iter().enumerate() {
            let src = samples.iter().find(|s| &s.id == id).unwrap();
            assert_eq!(images.sample(k), src.image);
            assert_eq!(masks.sample(k), src.mask);
        }
    }

    #[test]
    fn same_seed_generators_agree_exactly() {
        let samples: Vec<SamplePair> = (0..8).map(|i| blob_sample(16, 16, i)).collect();
        let cfg = AugmentConfig {
            seed: 77,
            ..Default::default()
        };
        let mut g1 = BatchGenerator::new(samples.clone(), 4, cfg, None).unwrap();
        let mut g2 = BatchGenerator::new(samples, 4, cfg, None).unwrap();
        let (i1, m1, _) = g1.next_batch().unwrap();
        let (i2, m2, _) = g2.next_batch().unwrap();
        assert_eq!(i1, i2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn degenerate_crop_is_rejected() {
        let s = blob_sample(16, 16, 9);
        let d = GeometricDraw {
            crop: Some(CropDraw {
                fraction: 0.0,
                off_y: 0.0,
                off_x: 0.0,
            }),
            ..Default::default()
        };
        assert!(matches!(
            apply_geometric(&s, &d),
            Err(AugmentError::DegenerateCrop(_))
        ));
    }
}
