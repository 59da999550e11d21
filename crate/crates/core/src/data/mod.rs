//! Synthetic referring-segmentation data, the loss, and evaluation metrics.

mod dataset;
pub mod metrics;
mod raster;
pub mod scene;

use image::RgbImage;

use crate::tensor::{Real, Tensor};

pub use dataset::{sample_seed, Dataset, Manifest, SplitSpec};
pub use metrics::{
    bce_loss, bce_loss_with, binarize_prediction, evaluate, iou, EvalReport, LossTarget, Overlap, THRESHOLDS,
};
pub use raster::Mask;
pub use scene::{generate_scene, Expression, GrammarConfig, Sample, SceneDescriptor, Shape, Template};

/// `H×W×3` tensor with channels scaled to `[0, 1]`.
pub fn image_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| T::from_f64(v as f64 / 255.0)).collect();
    Tensor::from_vec(&[h as usize, w as usize, 3], data).expect("rgb buffer")
}
