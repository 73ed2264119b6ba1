//! Dataset ingestion, on-disk layout, and reproducible stratified splits.
//!
//! Datasets live as `<root>/images/*.png|tif` and `<root>/masks/*.png|tif`
//! with matching file stems. Masks are binarized on load. Synthetic phantom
//! datasets (see [`phantom`]) are written in the same layout plus a JSON
//! sidecar with the generator settings.

mod phantom;

pub use phantom::{generate_phantom, write_phantom_dataset, PhantomConfig, PhantomSidecar};

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgIoError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("missing mask for image '{id}'")]
    MissingMask { id: String },
    #[error("image/mask size mismatch for '{id}'")]
    SizeMismatch { id: String },
    #[error("invalid split fractions: {0}")]
    BadFractions(String),
    #[error("stratum '{tag}' has {count} samples; at least 3 are needed to fill train/val/test")]
    StratumTooSmall { tag: String, count: usize },
    #[error("phantom generation failed: {0}")]
    Phantom(String),
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Density stratum of a sample: crowded cell clusters vs isolated cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    Dense,
    Sparse,
}

impl Density {
    pub fn as_str(&self) -> &'static str {
        match self {
            Density::Dense => "dense",
            Density::Sparse => "sparse",
        }
    }
}

/// One image with its binary ground-truth mask.
#[derive(Clone, Debug)]
pub struct SamplePair {
    /// `(1, 1, h, w)` intensities in [0, 1].
    pub image: Tensor,
    /// `(1, 1, h, w)` values in {0, 1}.
    pub mask: Tensor,
    pub id: String,
    pub density_tag: Density,
}

impl SamplePair {
    pub fn validate(&self) -> Result<(), ImgIoError> {
        if self.image.shape() != self.mask.shape() {
            return Err(ImgIoError::SizeMismatch {
                id: self.id.clone(),
            });
        }
        if !self.mask.is_binary() {
            return Err(ImgIoError::Phantom(format!(
                "mask of '{}' is not binary",
                self.id
            )));
        }
        Ok(())
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}

/// Disjoint, exhaustive id partition produced by [`stratified_split`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn select<'a>(&self, samples: &'a [SamplePair], ids: &[String]) -> Vec<&'a SamplePair> {
        ids.iter()
            .filter_map(|id| samples.iter().find(|s| &s.id == id))
            .collect()
    }
}

const RASTER_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

fn list_rasters(dir: &Path) -> Result<BTreeMap<String, PathBuf>, ImgIoError> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let entries = std::fs::read_dir(dir).map_err(|source| ImgIoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| ImgIoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if let Some(ext) = ext {
            if RASTER_EXTENSIONS.contains(&ext.as_str()) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.insert(stem.to_string(), path.clone());
                }
            }
        }
    }
    Ok(out)
}

/// Reads a single-channel raster into a `(1, 1, h, w)` tensor in [0, 1].
pub fn read_gray(path: &Path) -> Result<Tensor, ImgIoError> {
    let img = image::open(path).map_err(|source| ImgIoError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    let data = gray
        .pixels()
        .map(|p| p.0[0] as f64 / u16::MAX as f64)
        .collect();
    Ok(Tensor::from_image(h as usize, w as usize, data))
}

/// Writes intensities in [0, 1] as a 16-bit grayscale PNG.
pub fn write_gray16(path: &Path, t: &Tensor) -> Result<(), ImgIoError> {
    let (h, w) = (t.h() as u32, t.w() as u32);
    let buf: Vec<u16> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, buf)
        .expect("buffer size matches dimensions");
    img.save(path).map_err(|source| ImgIoError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a binary mask as an 8-bit {0, 255} PNG.
pub fn write_mask8(path: &Path, t: &Tensor) -> Result<(), ImgIoError> {
    let (h, w) = (t.h() as u32, t.w() as u32);
    let buf: Vec<u8> = t.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(w, h, buf).expect("buffer size matches dimensions");
    img.save(path).map_err(|source| ImgIoError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Default mask binarization threshold: 128 on an 8-bit scale.
pub const DEFAULT_MASK_THRESHOLD: f64 = 128.0 / 255.0;

/// Loads image/mask pairs from `<root>/images` and `<root>/masks`.
///
/// Masks binarize as `value >= mask_threshold` (threshold on the [0, 1]
/// intensity scale). Density tags are assigned by a median split on mask
/// foreground fraction: above the median is dense.
pub fn load_fnc(root: &Path, mask_threshold: f64) -> Result<Vec<SamplePair>, ImgIoError> {
    let images = list_rasters(&root.join("images"))?;
    let masks = list_rasters(&root.join("masks"))?;
    let mut pairs = Vec::with_capacity(images.len());
    for (id, image_path) in &images {
        let mask_path = masks
            .get(id)
            .ok_or_else(|| ImgIoError::MissingMask { id: id.clone() })?;
        let image = read_gray(image_path)?;
        let mask = read_gray(mask_path)?.map(|v| if v >= mask_threshold { 1.0 } else { 0.0 });
        if image.shape() != mask.shape() {
            return Err(ImgIoError::SizeMismatch { id: id.clone() });
        }
        pairs.push(SamplePair {
            image,
            mask,
            id: id.clone(),
            density_tag: Density::Sparse,
        });
    }
    assign_density_tags(&mut pairs);
    Ok(pairs)
}

/// Median split on foreground fraction: above the median is dense.
pub fn assign_density_tags(pairs: &mut [SamplePair]) {
    if pairs.is_empty() {
        return;
    }
    let mut fracs: Vec<f64> = pairs.iter().map(|p| p.foreground_fraction()).collect();
    let mut sorted = fracs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    for (pair, frac) in pairs.iter_mut().zip(fracs.drain(..)) {
        pair.density_tag = if frac > median {
            Density::Dense
        } else {
            Density::Sparse
        };
    }
}

/// Writes samples under `dir` in the standard `images/` + `masks/` layout.
pub fn save_dataset(dir: &Path, samples: &[SamplePair]) -> Result<(), ImgIoError> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|source| ImgIoError::Io {
            path: d.clone(),
            source,
        })?;
    }
    for s in samples {
        write_gray16(&images.join(format!("{}.png", s.id)), &s.image)?;
        write_mask8(&masks.join(format!("{}.png", s.id)), &s.mask)?;
    }
    Ok(())
}

/// Splits sample ids into train/val/test, stratified by density tag.
///
/// Within each stratum the counts follow a floor + largest-remainder
/// allocation (remainder ties resolve train, then val, then test), adjusted
/// so every split receives at least one sample per stratum. Deterministic
/// for a given seed.
pub fn stratified_split(
    samples: &[SamplePair],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitSpec, ImgIoError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| f <= 0.0) {
        return Err(ImgIoError::BadFractions(
            "all fractions must be positive".into(),
        ));
    }
    if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(ImgIoError::BadFractions("fractions must sum to 1".into()));
    }

    let mut strata: BTreeMap<Density, Vec<String>> = BTreeMap::new();
    for s in samples {
        strata.entry(s.density_tag).or_default().push(s.id.clone());
    }
    for (tag, ids) in &strata {
        if ids.len() < 3 {
            return Err(ImgIoError::StratumTooSmall {
                tag: tag.as_str().to_string(),
                count: ids.len(),
            });
        }
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut spec = SplitSpec {
        train_ids: Vec::new(),
        val_ids: Vec::new(),
        test_ids: Vec::new(),
        seed,
    };
    for (_, mut ids) in strata {
        ids.shuffle(&mut rng);
        let n = ids.len();
        let mut counts = [0usize; 3];
        let mut rema: Vec<(f64, usize)> = Vec::new();
        for (i, &f) in fr.iter().enumerate() {
            let exact = f * n as f64;
            counts[i] = exact.floor() as usize;
            rema.push((exact - exact.floor(), i));
        }
        let mut leftover = n - counts.iter().sum::<usize>();
        // largest remainder first; ties keep the train > val > test order
        rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, i) in &rema {
            if leftover == 0 {
                break;
            }
            counts[i] += 1;
            leftover -= 1;
        }
        // each split must see at least one sample from this stratum
        while counts.iter().any(|&c| c == 0) {
            let empty = counts.iter().position(|&c| c == 0).unwrap();
            let largest = (0..3).max_by_key(|&i| counts[i]).unwrap();
            counts[largest] -= 1;
            counts[empty] += 1;
        }
        let (a, b) = (counts[0], counts[0] + counts[1]);
        spec.train_ids.extend_from_slice(&ids[..a]);
        spec.val_ids.extend_from_slice(&ids[a..b]);
        spec.test_ids.extend_from_slice(&ids[b..]);
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sample(id: &str, fg: usize, tag: Density) -> SamplePair {
        let mut mask = Tensor::zeros([1, 1, 4, 4]);
        for i in 0..fg {
            mask.data_mut()[i] = 1.0;
        }
        SamplePair {
            image: Tensor::full([1, 1, 4, 4], 0.5),
            mask,
            id: id.to_string(),
            density_tag: tag,
        }
    }

    fn herd(n_dense: usize, n_sparse: usize) -> Vec<SamplePair> {
        let mut v = Vec::new();
        for i in 0..n_dense {
            v.push(tiny_sample(&format!("d{i:03}"), 8, Density::Dense));
        }
        for i in 0..n_sparse {
            v.push(tiny_sample(&format!("s{i:03}"), 2, Density::Sparse));
        }
        v
    }

    #[test]
    fn split_counts_match_counting_oracle() {
        let samples = herd(60, 40);
        let spec = stratified_split(&samples, (0.7, 0.15, 0.15), 42).unwrap();
        assert_eq!(spec.train_ids.len(), 70);
        assert_eq!(spec.val_ids.len(), 15);
        assert_eq!(spec.test_ids.len(), 15);
        let dense = |ids: &[String]| ids.iter().filter(|i| i.starts_with('d')).count();
        assert_eq!(dense(&spec.train_ids), 42);
        assert_eq!(dense(&spec.val_ids), 9);
        assert_eq!(dense(&spec.test_ids), 9);
    }

    #[test]
    fn split_is_deterministic_and_partitioning() {
        let samples = herd(13, 9);
        let a = stratified_split(&samples, (0.6, 0.2, 0.2), 7).unwrap();
        let b = stratified_split(&samples, (0.6, 0.2, 0.2), 7).unwrap();
        assert_eq!(a, b);

        let mut all: Vec<&String> = a
            .train_ids
            .iter()
            .chain(&a.val_ids)
            .chain(&a.test_ids)
            .collect();
        all.sort();
        let mut expect: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        expect.sort();
        assert_eq!(all.len(), expect.len(), "splits must be exhaustive");
        for (x, y) in all.iter().zip(&expect) {
            assert_eq!(*x, y, "splits must be disjoint and exhaustive");
        }
    }

    #[test]
    fn degenerate_fractions_are_rejected() {
        let samples = herd(5, 5);
        assert!(matches!(
            stratified_split(&samples, (1.0, 0.0, 0.0), 1),
            Err(ImgIoError::BadFractions(_))
        ));
        assert!(matches!(
            stratified_split(&samples, (0.5, 0.3, 0.3), 1),
            Err(ImgIoError::BadFractions(_))
        ));
    }

    #[test]
    fn tiny_stratum_is_rejected() {
        let samples = herd(2, 10);
        assert!(matches!(
            stratified_split(&samples, (0.7, 0.15, 0.15), 1),
            Err(ImgIoError::StratumTooSmall { .. })
        ));
    }

    #[test]
    fn three_sample_stratum_populates_all_splits() {
        let samples = herd(3, 20);
        let spec = stratified_split(&samples, (0.7, 0.15, 0.15), 5).unwrap();
        let dense = |ids: &[String]| ids.iter().filter(|i| i.starts_with('d')).count();
        assert_eq!(dense(&spec.train_ids), 1);
        assert_eq!(dense(&spec.val_ids), 1);
        assert_eq!(dense(&spec.test_ids), 1);
    }

    #[test]
    fn density_tags_split_on_median() {
        let mut samples = herd(4, 4);
        assign_density_tags(&mut samples);
        let dense_count = samples
            .iter()
            .filter(|s| s.density_tag == Density::Dense)
            .count();
        assert_eq!(dense_count, 4, "high-foreground half should be dense");
    }
}
