//! Training loss and segmentation metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Eavl;
use crate::tensor::kernels::upsample2x;
use crate::tensor::{ParamStore, Real, Tensor, Var};

use super::raster::Mask;
use super::scene::Sample;
use super::image_tensor;

/// IoU thresholds for precision-at-X.
pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// How the full-resolution mask becomes a target at the logit resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossTarget {
    /// Binary, sampling the top-left pixel of each block.
    Nearest,
    /// Soft, the foreground fraction of each block. Unlike a binary target
    /// this keeps sub-cell boundary positions, so an upsampled prediction
    /// can reproduce small shapes.
    #[default]
    Coverage,
}

impl LossTarget {
    pub fn target<T: Real>(self, gt: &Mask, h: usize, w: usize) -> Result<Tensor<T>> {
        match self {
            LossTarget::Nearest => Ok(gt.downsample(h, w)?.to_tensor()),
            LossTarget::Coverage => gt.coverage(h, w),
        }
    }
}

impl fmt::Display for LossTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossTarget::Nearest => "nearest",
            LossTarget::Coverage => "coverage",
        })
    }
}

impl FromStr for LossTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nearest" => Ok(LossTarget::Nearest),
            "coverage" => Ok(LossTarget::Coverage),
            other => Err(Error::Config(format!("unknown loss target {other:?}"))),
        }
    }
}

/// Mean binary cross-entropy between `y` logits and `gt`, with `gt`
/// nearest-downsampled to the logit resolution.
pub fn bce_loss<'t, T: Real>(y: Var<'t, T>, gt: &Mask) -> Result<Var<'t, T>> {
    bce_loss_with(y, gt, LossTarget::Nearest)
}

/// [`bce_loss`] against the chosen kind of target.
pub fn bce_loss_with<'t, T: Real>(y: Var<'t, T>, gt: &Mask, target: LossTarget) -> Result<Var<'t, T>> {
    let [h, w] = y.shape()[..] else {
        return Err(Error::Data(format!("prediction must be 2-d, got {:?}", y.shape())));
    };
    Ok(y.bce_with_logits(&target.target(gt, h, w)?)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: usize,
    pub union: usize,
}

impl Overlap {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Data(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let mut o = Self::default();
        for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
            o.intersection += (p && g) as usize;
            o.union += (p || g) as usize;
        }
        Ok(o)
    }

    /// One when both masks are empty.
    pub fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Overlap::of(pred, gt)?.iou())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Σ intersections / Σ unions.
    pub overall_iou: f64,
    /// Mean of per-image IoU.
    pub mean_iou: f64,
    /// `precision_at[i]` is the fraction of images with IoU strictly above
    /// `THRESHOLDS[i]`.
    pub precision_at: [f64; 5],
    pub sample_count: usize,
}

impl EvalReport {
    pub fn from_overlaps(overlaps: &[Overlap]) -> Result<Self> {
        if overlaps.is_empty() {
            return Err(Error::Data("cannot evaluate an empty dataset".into()));
        }
        let n = overlaps.len() as f64;
        let (inter, union) = overlaps
            .iter()
            .fold((0usize, 0usize), |(i, u), o| (i + o.intersection, u + o.union));
        let ious: Vec<f64> = overlaps.iter().map(|o| o.iou()).collect();
        let precision_at = THRESHOLDS.map(|x| ious.iter().filter(|&&v| v > x).count() as f64 / n);
        Ok(Self {
            overall_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
            mean_iou: ious.iter().sum::<f64>() / n,
            precision_at,
            sample_count: overlaps.len(),
        })
    }

    pub fn precision(&self, threshold: f64) -> Option<f64> {
        THRESHOLDS
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.precision_at[i])
    }
}

/// Bilinearly upsamples `h×w` logits by repeated doubling to `height×width`
/// and thresholds at zero.
pub fn binarize_prediction<T: Real>(y: &Tensor<T>, height: usize, width: usize) -> Result<Mask> {
    let [mut h, mut w] = y.shape()[..] else {
        return Err(Error::Data(format!("prediction must be 2-d, got {:?}", y.shape())));
    };
    let mut map = y.reshape(&[h, w, 1])?;
    while h < height && w < width {
        map = upsample2x(&map)?;
        (h, w) = (2 * h, 2 * w);
    }
    if (h, w) != (height, width) {
        return Err(Error::Data(format!(
            "prediction {:?} does not upsample to {height}x{width}",
            y.shape()
        )));
    }
    Mask::from_logits(&map.reshape(&[h, w])?)
}

/// Per-sample overlaps of the model's thresholded predictions.
pub fn overlaps<T: Real>(model: &Eavl, ps: &ParamStore<T>, samples: &[Sample]) -> Result<Vec<Overlap>> {
    samples
        .iter()
        .map(|s| {
            let tokens = model.tokenize(&s.expression)?;
            let out = model.predict(ps, &image_tensor(&s.image), &tokens)?;
            let pred = binarize_prediction(&out.y, s.mask.height(), s.mask.width())?;
            Overlap::of(&pred, &s.mask)
        })
        .collect()
}

pub fn evaluate<T: Real>(model: &Eavl, ps: &ParamStore<T>, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    EvalReport::from_overlaps(&overlaps(model, ps, samples)?)
}
