//! Feature-Fréchet distance between image sets and mask quality against
//! ground truth.
//!
//! The Fréchet distance here uses the bundled extractor, not Inception, so
//! its absolute values are not comparable to published FID numbers. Only
//! relative comparisons (before/after training, ablations) are meaningful.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_extractor::FeatureExtractor;
use crate::tensor::{Shape, Tensor};

pub const SHRINKAGE: f64 = 1e-6;
pub const FRECHET_CAVEAT: &str = "feature-Fréchet distance on the bundled extractor; \
not comparable to Inception-based FID, use for relative comparisons only";

/// Mean and covariance of a set of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub samples: usize,
}

impl FeatureGaussian {
    /// Builds a Gaussian from given moments; the covariance is symmetrized.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, samples: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::dim(
                "feature_gaussian",
                "covariance",
                d * d,
                cov.len(),
            ));
        }
        let cov = DMatrix::from_row_slice(d, d, &cov);
        Ok(FeatureGaussian {
            mean: DVector::from_vec(mean),
            cov: (&cov + cov.transpose()) * 0.5,
            samples,
        })
    }

    /// Sample mean and unbiased covariance (divisor max(n−1, 1)) plus
    /// [`SHRINKAGE`]·I.
    pub fn fit(vectors: &[Vec<f64>]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Parameter("cannot fit a Gaussian to zero samples".into()))?;
        let d = first.len();
        let n = vectors.len();
        let mut mean = DVector::zeros(d);
        for v in vectors {
            if v.len() != d {
                return Err(Error::dim("fit_gaussian", "feature", d, v.len()));
            }
            mean += DVector::from_column_slice(v);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for v in vectors {
            let c = DVector::from_column_slice(v) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n.max(2) - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        for i in 0..d {
            cov[(i, i)] += SHRINKAGE;
        }
        Ok(FeatureGaussian {
            mean,
            cov,
            samples: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Spatially averaged `stage` activations of each image.
pub fn pooled_features(
    images: &[Tensor],
    extractor: &FeatureExtractor,
    stage: &str,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let pyr = extractor.extract(img)?;
        let f = pyr
            .get(stage)
            .ok_or_else(|| Error::Config(format!("pyramid has no stage {stage:?}")))?;
        let s = f.shape();
        for b in 0..s.n() {
            out.push(
                (0..s.c())
                    .map(|c| {
                        f.plane(b, c).iter().map(|&v| v as f64).sum::<f64>() / s.plane() as f64
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

pub fn fit_gaussian(
    images: &[Tensor],
    extractor: &FeatureExtractor,
    stage: &str,
) -> Result<FeatureGaussian> {
    if images.is_empty() {
        return Err(Error::Parameter(
            "cannot fit a Gaussian to zero images".into(),
        ));
    }
    FeatureGaussian::fit(&pooled_features(images, extractor, stage)?)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// ‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½), with the inner root taken by
/// a symmetric eigendecomposition and negative eigenvalues clamped to 0.
pub fn frechet_distance(a: &FeatureGaussian, b: &FeatureGaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("frechet_distance", "feature", a.dim(), b.dim()));
    }
    let dm = (&a.mean - &b.mean).norm_squared();
    let s1 = psd_sqrt(&a.cov);
    let inner = &s1 * &b.cov * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    Ok((dm + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Mask agreement with a ground-truth foreground mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    /// IoU of the predicted foreground (1 − M > t) with the true foreground.
    pub iou: f64,
    /// mean(M on true background) − mean(M on true foreground); 0 when either
    /// region is empty.
    pub separation: f64,
}

/// Nearest-neighbour resize of a (B,1,H,W) mask to `h`×`w`.
pub fn resize_nearest(mask: &Tensor, h: usize, w: usize) -> Tensor {
    let s = mask.shape();
    Tensor::from_fn(Shape::new(s.n(), s.c(), h, w), |[b, c, y, x]| {
        mask.get([b, c, y * s.h() / h, x * s.w() / w])
    })
}

/// `pred` is a soft background mask M; `truth` marks the foreground with 1 and
/// is resized (nearest) to the mask resolution.
pub fn mask_metrics(pred: &Tensor, truth: &Tensor, threshold: f32) -> Result<MaskMetrics> {
    let (ps, ts) = (pred.shape(), truth.shape());
    if ps.c() != 1 || ts.c() != 1 {
        return Err(Error::dim("mask_metrics", "channel", 1, ps.c().max(ts.c())));
    }
    if ps.n() != ts.n() {
        return Err(Error::dim("mask_metrics", "batch", ps.n(), ts.n()));
    }
    let truth = resize_nearest(truth, ps.h(), ps.w());
    let (mut inter, mut union) = (0usize, 0usize);
    let (mut bg_sum, mut bg_n, mut fg_sum, mut fg_n) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&m, &t) in pred.data().iter().zip(truth.data()) {
        let fg_pred = 1.0 - m > threshold;
        let fg_true = t > 0.5;
        inter += (fg_pred && fg_true) as usize;
        union += (fg_pred || fg_true) as usize;
        if fg_true {
            fg_sum += m as f64;
            fg_n += 1;
        } else {
            bg_sum += m as f64;
            bg_n += 1;
        }
    }
    let iou = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    let separation = if fg_n == 0 || bg_n == 0 {
        0.0
    } else {
        bg_sum / bg_n as f64 - fg_sum / fg_n as f64
    };
    Ok(MaskMetrics { iou, separation })
}

/// Report written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frechet_before: f64,
    pub frechet_after: f64,
    pub mask_iou_per_stage: BTreeMap<String, f64>,
    pub separation_per_stage: BTreeMap<String, f64>,
    /// Mean |x − reference| over true-background pixels of the translated
    /// frames, and of the night frames themselves.
    #[serde(default)]
    pub background_l1_translated: Option<f64>,
    #[serde(default)]
    pub background_l1_night: Option<f64>,
    pub caveat: String,
}
