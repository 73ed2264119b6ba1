//! IMSAHLO: multi-scale attention encoder-decoder segmentation with a
//! four-term hybrid loss (Tversky + contour-weighted boundary + focal +
//! centerline Dice), plus the full data pipeline around it: dataset
//! ingestion, synthetic phantoms, CLAHE preprocessing, paired augmentation,
//! training with plateau scheduling and early stopping, morphological
//! postprocessing, test-time augmentation, and a pixel-metrics suite.

pub mod augment;
pub mod graph;
pub mod imgio;
pub mod metrics;
pub mod losses;
pub mod morph;
pub mod network;
pub mod preprocess;
pub mod kernels;
pub mod tensor;
