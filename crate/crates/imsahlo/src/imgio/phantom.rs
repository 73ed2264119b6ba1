//! Deterministic synthetic phantoms: elliptical cell bodies plus thin
//! curvilinear tubules, rendered as image/mask pairs.
//!
//! Cell geometry statistics are anchored to fluorescence microscopy cell
//! measurements at a 512x768 reference canvas (mean area ~1206 px², minor/
//! major axis ratio ~0.58) and scale proportionally with canvas area.
//! Tubules are a deliberate synthetic extension so that topology-aware
//! losses have elongated structures to act on.

use super::{Density, ImgIoError, SamplePair};
use crate::kernels::gaussian_blur;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

const REFERENCE_CANVAS: (usize, usize) = (512, 768);
const REFERENCE_CELL_AREA: f64 = 1206.43;
const REFERENCE_AXIS_RATIO: f64 = 29.39 / 50.43;
const MAX_REJECTIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// (height, width) in pixels.
    pub canvas: (usize, usize),
    /// Inclusive range for the number of cells.
    pub n_cells: (usize, usize),
    /// Mean/std of cell area in px².
    pub cell_area: (f64, f64),
    /// Mean minor/major axis ratio.
    pub axis_ratio: f64,
    /// Inclusive range for the number of tubules.
    pub tubule_count: (usize, usize),
    /// Tubule stroke width in pixels.
    pub tubule_width: f64,
    /// Foreground intensity range in [0, 1].
    pub foreground_intensity: (f64, f64),
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub density_mode: Density,
    pub seed: u64,
}

impl PhantomConfig {
    /// Defaults for a canvas, scaling the reference cell statistics by
    /// canvas area.
    pub fn for_canvas(height: usize, width: usize, density_mode: Density, seed: u64) -> Self {
        let scale = (height * width) as f64 / (REFERENCE_CANVAS.0 * REFERENCE_CANVAS.1) as f64;
        let area = REFERENCE_CELL_AREA * scale;
        let n_cells = match density_mode {
            Density::Dense => (8, 14),
            Density::Sparse => (3, 6),
        };
        PhantomConfig {
            canvas: (height, width),
            n_cells,
            cell_area: (area, 0.2 * area),
            axis_ratio: REFERENCE_AXIS_RATIO,
            tubule_count: (1, 3),
            tubule_width: (3.0 * scale.sqrt()).max(1.5),
            foreground_intensity: (0.55, 0.95),
            noise_sigma: 0.05,
            blur_sigma: 1.0,
            density_mode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ImgIoError> {
        let bad = |msg: &str| Err(ImgIoError::Phantom(msg.to_string()));
        if self.canvas.0 < 8 || self.canvas.1 < 8 {
            return bad("canvas must be at least 8x8");
        }
        if self.n_cells.0 > self.n_cells.1 || self.tubule_count.0 > self.tubule_count.1 {
            return bad("ranges must be (lo, hi) with lo <= hi");
        }
        if self.cell_area.0 <= 0.0 || self.cell_area.1 < 0.0 {
            return bad("cell area mean must be positive");
        }
        if !(0.0 < self.axis_ratio && self.axis_ratio <= 1.0) {
            return bad("axis ratio must be in (0, 1]");
        }
        let (lo, hi) = self.foreground_intensity;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("foreground intensity range must be inside [0, 1]");
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64, // semi-major
    b: f64, // semi-minor
    theta: f64,
    intensity: f64,
}

fn stamp_ellipse(mask: &mut Tensor, intensity_map: &mut Tensor, e: &Ellipse) {
    let (h, w) = (mask.h() as isize, mask.w() as isize);
    let r = e.a.ceil() as isize + 1;
    let (ct, st) = (e.theta.cos(), e.theta.sin());
    for y in (e.cy as isize - r).max(0)..=(e.cy as isize + r).min(h - 1) {
        for x in (e.cx as isize - r).max(0)..=(e.cx as isize + r).min(w - 1) {
            let dy = y as f64 - e.cy;
            let dx = x as f64 - e.cx;
            let u = (dx * ct + dy * st) / e.a;
            let v = (-dx * st + dy * ct) / e.b;
            if u * u + v * v <= 1.0 {
                let i = (y * w + x) as usize;
                mask.data_mut()[i] = 1.0;
                let cur = intensity_map.data()[i];
                intensity_map.data_mut()[i] = cur.max(e.intensity);
            }
        }
    }
}

fn stamp_disk(mask: &mut Tensor, intensity_map: &mut Tensor, cy: f64, cx: f64, r: f64, val: f64) {
    let (h, w) = (mask.h() as isize, mask.w() as isize);
    let ri = r.ceil() as isize;
    for y in (cy as isize - ri).max(0)..=(cy as isize + ri).min(h - 1) {
        for x in (cx as isize - ri).max(0)..=(cx as isize + ri).min(w - 1) {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r * r {
                let i = (y * w + x) as usize;
                mask.data_mut()[i] = 1.0;
                let cur = intensity_map.data()[i];
                intensity_map.data_mut()[i] = cur.max(val);
            }
        }
    }
}

/// Renders one phantom. Pure function of the config (including its seed):
/// identical configs produce bit-identical samples.
pub fn generate_phantom(config: &PhantomConfig) -> Result<SamplePair, ImgIoError> {
    config.validate()?;
    let (h, w) = config.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mask = Tensor::zeros([1, 1, h, w]);
    let mut intensity = Tensor::zeros([1, 1, h, w]);

    let n_cells = rng.random_range(config.n_cells.0..=config.n_cells.1);
    let mean_semi_major = (config.cell_area.0 / (std::f64::consts::PI * config.axis_ratio)).sqrt();
    let area_dist = Normal::new(config.cell_area.0, config.cell_area.1.max(1e-9))
        .map_err(|e| ImgIoError::Phantom(e.to_string()))?;

    // geometry first: centers, then per-cell shape draws
    let mut cells: Vec<Ellipse> = Vec::with_capacity(n_cells);
    let margin = mean_semi_major.min(h.min(w) as f64 / 2.0 - 1.0).max(1.0);

    // dense mode scatters cells around a few cluster seeds; sparse mode
    // rejection-samples well separated centers
    let mut cluster_seeds: Vec<(f64, f64)> = Vec::new();
    if config.density_mode == Density::Dense && n_cells > 0 {
        let n_clusters = (n_cells / 3).max(1);
        for _ in 0..n_clusters {
            cluster_seeds.push((
                rng.random_range(margin..h as f64 - margin),
                rng.random_range(margin..w as f64 - margin),
            ));
        }
    }

    let mut rejections = 0usize;
    while cells.len() < n_cells {
        let area = area_dist
            .sample(&mut rng)
            .clamp(0.3 * config.cell_area.0, 2.5 * config.cell_area.0)
            .max(4.0);
        let ratio = (config.axis_ratio * rng.random_range(0.85..1.15)).clamp(0.2, 1.0);
        let a = (area / (std::f64::consts::PI * ratio)).sqrt();
        let b = ratio * a;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let intensity_v = rng.random_range(config.foreground_intensity.0..=config.foreground_intensity.1);

        let (cy, cx) = match config.density_mode {
            Density::Dense => {
                let (sy, sx) = cluster_seeds[cells.len() % cluster_seeds.len()];
                let spread = 2.5 * mean_semi_major;
                let dy = Normal::new(0.0, spread).unwrap().sample(&mut rng);
                let dx = Normal::new(0.0, spread).unwrap().sample(&mut rng);
                (
                    (sy + dy).clamp(margin, h as f64 - margin),
                    (sx + dx).clamp(margin, w as f64 - margin),
                )
            }
            Density::Sparse => (
                rng.random_range(a.min(h as f64 / 2.0 - 1.0).max(1.0)
                    ..h as f64 - a.min(h as f64 / 2.0 - 1.0).max(1.0)),
                rng.random_range(a.min(w as f64 / 2.0 - 1.0).max(1.0)
                    ..w as f64 - a.min(w as f64 / 2.0 - 1.0).max(1.0)),
            ),
        };

        if config.density_mode == Density::Sparse {
            // keep components disjoint: at least two mean major axes between
            // centers, and never closer than the two ellipses can reach
            let min_sep = (4.0 * mean_semi_major).max(2.0 * a + 2.0);
            let ok = cells.iter().all(|c| {
                let d = ((c.cy - cy).powi(2) + (c.cx - cx).powi(2)).sqrt();
                d >= min_sep.max(c.a + a + 2.0)
            });
            if !ok {
                rejections += 1;
                if rejections > MAX_REJECTIONS {
                    return Err(ImgIoError::Phantom(format!(
                        "could not place {n_cells} separated cells on a {h}x{w} canvas \
                         after {MAX_REJECTIONS} rejections"
                    )));
                }
                continue;
            }
        }
        cells.push(Ellipse {
            cy,
            cx,
            a,
            b,
            theta,
            intensity: intensity_v,
        });
    }
    for cell in &cells {
        stamp_ellipse(&mut mask, &mut intensity, cell);
    }

    // tubules: jittered-heading random walks dilated to the stroke width
    let n_tubules = rng.random_range(config.tubule_count.0..=config.tubule_count.1);
    let heading_jitter = Normal::new(0.0, 0.25).unwrap();
    for _ in 0..n_tubules {
        let mut y = rng.random_range(1.0..h as f64 - 1.0);
        let mut x = rng.random_range(1.0..w as f64 - 1.0);
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let val = rng.random_range(config.foreground_intensity.0..=config.foreground_intensity.1);
        let steps = (h.min(w) as f64 * 0.6) as usize;
        for _ in 0..steps {
            stamp_disk(&mut mask, &mut intensity, y, x, config.tubule_width / 2.0, val);
            heading += heading_jitter.sample(&mut rng);
            y = (y + heading.sin()).clamp(1.0, h as f64 - 2.0);
            x = (x + heading.cos()).clamp(1.0, w as f64 - 2.0);
        }
    }

    let fg = mask.sum() / mask.len() as f64;
    if fg >= 0.5 {
        return Err(ImgIoError::Phantom(format!(
            "foreground fraction {fg:.3} exceeds the 0.5 limit"
        )));
    }

    // image: gated intensities + noise, then blur, clipped to [0, 1]
    let noise = Normal::new(0.0, config.noise_sigma.max(1e-12)).unwrap();
    let mut image = intensity;
    if config.noise_sigma > 0.0 {
        for v in image.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let mut image = gaussian_blur(&image, config.blur_sigma);
    image.clamp_in_place(0.0, 1.0);

    Ok(SamplePair {
        image,
        mask,
        id: format!("phantom_{:08x}", config.seed),
        density_tag: config.density_mode,
    })
}

/// Sidecar metadata written next to a generated phantom dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSidecar {
    pub config: PhantomConfig,
    pub count: usize,
    pub ids: Vec<String>,
}

/// Generates `count` phantoms (seeds `config.seed + i`) and writes them in
/// the standard dataset layout plus a `phantoms.json` sidecar.
pub fn write_phantom_dataset(
    dir: &Path,
    config: &PhantomConfig,
    count: usize,
) -> Result<Vec<SamplePair>, ImgIoError> {
    let samples = generate_phantom_set(config, count)?;
    super::save_dataset(dir, &samples)?;
    let sidecar = PhantomSidecar {
        config: config.clone(),
        count,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    };
    let path = dir.join("phantoms.json");
    let json = serde_json::to_string_pretty(&sidecar).map_err(|source| ImgIoError::Json {
        path: path.clone(),
        source,
    })?;
    std::fs::write(&path, json).map_err(|source| ImgIoError::Io { path, source })?;
    Ok(samples)
}

/// Generates `count` phantoms with consecutive seeds, ids indexed in order.
pub fn generate_phantom_set(
    config: &PhantomConfig,
    count: usize,
) -> Result<Vec<SamplePair>, ImgIoError> {
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut c = config.clone();
        c.seed = config.seed.wrapping_add(i as u64);
        let mut s = generate_phantom(&c)?;
        s.id = format!("phantom_{i:04}");
        samples.push(s);
    }
    Ok(samples)
}
