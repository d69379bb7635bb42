//! Comparison scoring rules sharing the detector and data model.
//!
//! Every baseline maps a scored test image to one real number with the same
//! convention as the GP scorer: higher output means more irregular. The
//! Gaussian-based baselines are fitted by maximum likelihood on train-split
//! statistics (ratios of positive proposals, or maximum detection scores).

use crate::dataset::{DatasetManifest, ImageRecord, Status};
use crate::detector::{top_n_proposals, Detector};
use crate::error::{Error, Result};

const VARIANCE_FLOOR: f64 = 1e-12;

/// Gaussian fitted by maximum likelihood, variance floored at 1e-12.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnivariateGaussian {
    pub mean: f64,
    pub variance: f64,
}

impl UnivariateGaussian {
    pub fn mle(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySet);
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let variance = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Ok(UnivariateGaussian {
            mean,
            variance: variance.max(VARIANCE_FLOOR),
        })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = x - self.mean;
        (-0.5 * z * z / self.variance).exp() / (2.0 * std::f64::consts::PI * self.variance).sqrt()
    }
}

/// Smoothed ratio of positively to negatively scored proposals,
/// `(#pos + 1) / (#neg + 1)`, counting `score > 0` as positive.
pub fn positive_negative_ratio(image: &ImageRecord) -> Result<f64> {
    let mut pos = 0usize;
    let mut neg = 0usize;
    for p in &image.proposals {
        let s = p.score.ok_or_else(|| Error::Missing {
            id: image.id.clone(),
            what: "proposal score",
        })?;
        if s > 0.0 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    Ok((pos as f64 + 1.0) / (neg as f64 + 1.0))
}

/// Fits the two ratio Gaussians on the train split (regular, other).
pub fn fit_ratio_models(
    manifest: &DatasetManifest,
) -> Result<(UnivariateGaussian, UnivariateGaussian)> {
    let mut regular = Vec::new();
    let mut other = Vec::new();
    for record in manifest.train() {
        let r = positive_negative_ratio(record)?;
        match record.status {
            Status::Regular => regular.push(r),
            _ => other.push(r),
        }
    }
    if regular.is_empty() {
        return Err(Error::EmptyTrainSide { side: "regular" });
    }
    if other.is_empty() {
        return Err(Error::EmptyTrainSide { side: "other" });
    }
    Ok((
        UnivariateGaussian::mle(&regular)?,
        UnivariateGaussian::mle(&other)?,
    ))
}

/// Fits the two max-score Gaussians on the train split (regular, other).
pub fn fit_max_score_models(
    manifest: &DatasetManifest,
) -> Result<(UnivariateGaussian, UnivariateGaussian)> {
    let mut regular = Vec::new();
    let mut other = Vec::new();
    for record in manifest.train() {
        let m = record.max_score().ok_or_else(|| Error::Missing {
            id: record.id.clone(),
            what: "proposal score",
        })?;
        match record.status {
            Status::Regular => regular.push(m),
            _ => other.push(m),
        }
    }
    if regular.is_empty() {
        return Err(Error::EmptyTrainSide { side: "regular" });
    }
    if other.is_empty() {
        return Err(Error::EmptyTrainSide { side: "other" });
    }
    Ok((
        UnivariateGaussian::mle(&regular)?,
        UnivariateGaussian::mle(&other)?,
    ))
}

/// Ratio baseline: negated best fit of the image's proposal ratio under the
/// two train-split Gaussians.
pub fn pn_ratio_score(
    model_regular: &UnivariateGaussian,
    model_other: &UnivariateGaussian,
    image: &ImageRecord,
) -> Result<f64> {
    let r = positive_negative_ratio(image)?;
    Ok(-model_regular.pdf(r).max(model_other.pdf(r)))
}

/// Global classifier baseline: `-|f(I)|` over the image-level feature. Scores
/// near the decision boundary (the assumed irregular mean) rank highest.
pub fn global_linear_score(classifier: &Detector, image: &ImageRecord) -> Result<f64> {
    let feature = image.global_feature.as_deref().ok_or_else(|| Error::Missing {
        id: image.id.clone(),
        what: "global feature",
    })?;
    let f: f64 = classifier
        .weights
        .iter()
        .zip(feature)
        .map(|(w, x)| w * f64::from(*x))
        .sum::<f64>()
        + classifier.bias;
    Ok(-f.abs())
}

/// `-|max proposal score|`.
pub fn mil_max_score(image: &ImageRecord) -> Result<f64> {
    let m = image.max_score().ok_or_else(|| Error::Missing {
        id: image.id.clone(),
        what: "proposal score",
    })?;
    Ok(-m.abs())
}

/// Negated best fit of the image's max score under the two max-score
/// Gaussians.
pub fn mil_max_gaussian_score(
    model_regular: &UnivariateGaussian,
    model_other: &UnivariateGaussian,
    image: &ImageRecord,
) -> Result<f64> {
    let m = image.max_score().ok_or_else(|| Error::Missing {
        id: image.id.clone(),
        what: "proposal score",
    })?;
    Ok(-model_regular.pdf(m).max(model_other.pdf(m)))
}

/// `-|mean of the top min(k, count) proposal scores|`.
pub fn mil_topk_score(image: &ImageRecord, k: usize) -> Result<f64> {
    let top = top_n_proposals(image, k);
    if top.is_empty() {
        return Err(Error::Missing {
            id: image.id.clone(),
            what: "proposal score",
        });
    }
    let mean = top
        .iter()
        .map(|p| p.score.expect("top_n keeps scored proposals"))
        .sum::<f64>()
        / top.len() as f64;
    Ok(-mean.abs())
}

/// Trains the image-level classifier for the global baseline: each image is
/// a single-instance bag holding its global feature, so the max-pooled
/// objective reduces to plain logistic regression.
pub fn train_global_classifier(
    manifest: &DatasetManifest,
    cfg: &crate::detector::TrainConfig,
) -> Result<Detector> {
    let bags: Vec<ImageRecord> = manifest
        .train()
        .map(|r| {
            let feature = r.global_feature.clone().ok_or_else(|| Error::Missing {
                id: r.id.clone(),
                what: "global feature",
            })?;
            Ok(ImageRecord {
                proposals: vec![crate::dataset::Proposal {
                    bbox: crate::dataset::BoundingBox {
                        x1: 0.0,
                        y1: 0.0,
                        x2: r.width,
                        y2: r.height,
                    },
                    feature: Some(feature),
                    score: None,
                }],
                global_feature: None,
                ..r.clone()
            })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&ImageRecord> = bags.iter().collect();
    crate::detector::train_detector_on_bags(&refs, cfg)
}
