//! Weakly supervised region-level detector.
//!
//! Images are bags of proposals with an image-level label only. The detector
//! is linear over proposal features and is trained with a max-pooled logistic
//! loss: the image score is the maximum proposal score and must agree with
//! the bag label. The subgradient is routed through the argmax proposal, with
//! ties broken stably by ingestion order.

use crate::dataset::{DatasetManifest, ImageRecord, Proposal, Status};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Linear detector over proposal features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Detector {
    pub fn zeros(dim: usize) -> Self {
        Detector {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn score(&self, feature: &[f32]) -> f64 {
        let dot: f64 = self
            .weights
            .iter()
            .zip(feature)
            .map(|(w, x)| w * f64::from(*x))
            .sum();
        dot + self.bias
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            weight_decay: 1e-4,
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// log(1 + exp(t)) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t
    } else {
        t.exp().ln_1p()
    }
}

/// Max detection score and the (stable) argmax proposal index.
fn max_score_argmax(detector: &Detector, image: &ImageRecord) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (j, p) in image.proposals.iter().enumerate() {
        let feature = p.feature.as_deref().ok_or_else(|| Error::Missing {
            id: image.id.clone(),
            what: "proposal feature",
        })?;
        let z = detector.score(feature);
        if best.map_or(true, |(zb, _)| z > zb) {
            best = Some((z, j));
        }
    }
    best.ok_or(Error::EmptySet)
}

/// Maximum proposal score of an image under the detector.
pub fn max_detection_score(detector: &Detector, image: &ImageRecord) -> Result<f64> {
    max_score_argmax(detector, image).map(|(z, _)| z)
}

/// Max-pooled logistic loss of one bag: `log(1 + exp(-y * max_j score_j))`.
pub fn bag_loss(detector: &Detector, image: &ImageRecord, y: f64) -> Result<f64> {
    let (z, _) = max_score_argmax(detector, image)?;
    Ok(softplus(-y * z))
}

/// Subgradient of [`bag_loss`] through the argmax proposal.
pub fn bag_loss_gradient(
    detector: &Detector,
    image: &ImageRecord,
    y: f64,
) -> Result<(Vec<f64>, f64)> {
    let (z, j) = max_score_argmax(detector, image)?;
    let g = -y * logistic(-y * z);
    let x = image.proposals[j]
        .feature
        .as_deref()
        .expect("argmax proposal has a feature");
    let grad_w = x.iter().map(|xi| g * f64::from(*xi)).collect();
    Ok((grad_w, g))
}

fn bag_label(status: Status) -> f64 {
    match status {
        Status::Regular => 1.0,
        _ => -1.0,
    }
}

/// Trains the detector by shuffled mini-batch SGD with L2 weight decay.
///
/// Deterministic given the seed: the shuffle order and every update are
/// reproduced bitwise across runs.
pub fn train_detector(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Detector> {
    let bags: Vec<&ImageRecord> = manifest.train().collect();
    train_detector_on_bags(&bags, cfg)
}

/// [`train_detector`] over an explicit bag list (regular = +1, other = -1).
pub fn train_detector_on_bags(bags: &[&ImageRecord], cfg: &TrainConfig) -> Result<Detector> {
    if !bags.iter().any(|b| b.status == Status::Regular) {
        return Err(Error::EmptyTrainSide { side: "regular" });
    }
    if !bags.iter().any(|b| b.status != Status::Regular) {
        return Err(Error::EmptyTrainSide { side: "other" });
    }
    let dim = bags
        .iter()
        .flat_map(|b| b.proposals.iter())
        .find_map(|p| p.feature.as_ref().map(Vec::len))
        .ok_or_else(|| Error::Missing {
            id: bags[0].id.clone(),
            what: "proposal features",
        })?;

    let mut detector = Detector::zeros(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut grad_w = vec![0.0; dim];
            let mut grad_b = 0.0;
            for &i in chunk {
                let bag = bags[i];
                let y = bag_label(bag.status);
                epoch_loss += bag_loss(&detector, bag, y)?;
                let (gw, gb) = bag_loss_gradient(&detector, bag, y)?;
                for (a, g) in grad_w.iter_mut().zip(&gw) {
                    *a += g;
                }
                grad_b += gb;
            }
            let scale = cfg.learning_rate / chunk.len() as f64;
            for (w, g) in detector.weights.iter_mut().zip(&grad_w) {
                *w -= scale * g + cfg.learning_rate * cfg.weight_decay * *w;
            }
            detector.bias -= scale * grad_b;
        }
        log::debug!(
            "epoch {}: mean bag loss {:.6}",
            epoch + 1,
            epoch_loss / bags.len() as f64
        );
    }
    Ok(detector)
}

/// Returns the image with every proposal score set to the detector output.
pub fn score_proposals(detector: &Detector, image: &ImageRecord) -> Result<ImageRecord> {
    let mut out = image.clone();
    for p in &mut out.proposals {
        let feature = p.feature.as_deref().ok_or_else(|| Error::Missing {
            id: image.id.clone(),
            what: "proposal feature",
        })?;
        p.score = Some(detector.score(feature));
    }
    Ok(out)
}

/// The top `n` scored proposals, highest first; ties keep ingestion order.
pub fn top_n_proposals(image: &ImageRecord, n: usize) -> Vec<&Proposal> {
    let mut scored: Vec<&Proposal> = image
        .proposals
        .iter()
        .filter(|p| p.score.is_some())
        .collect();
    scored.sort_by(|a, b| b.score.unwrap().total_cmp(&a.score.unwrap()));
    scored.truncate(n);
    scored
}

#[derive(Serialize, Deserialize)]
struct DetectorFile {
    format_version: u32,
    dim: usize,
    bias: f64,
    weights: Vec<f64>,
}

pub fn save_detector(detector: &Detector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = DetectorFile {
        format_version: 1,
        dim: detector.dim(),
        bias: detector.bias,
        weights: detector.weights.clone(),
    };
    let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer(BufWriter::new(f), &file)
        .map_err(|e| Error::ModelFormat(e.to_string()))
}

pub fn load_detector(path: impl AsRef<Path>) -> Result<Detector> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: DetectorFile =
        serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::ModelFormat(e.to_string()))?;
    if file.format_version != 1 {
        return Err(Error::ModelFormat(format!(
            "unsupported detector format version {}",
            file.format_version
        )));
    }
    if file.weights.len() != file.dim {
        return Err(Error::ModelFormat("weight length != dim".into()));
    }
    Ok(Detector {
        weights: file.weights,
        bias: file.bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BoundingBox, Split};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn image_from_features(id: &str, status: Status, feats: &[Vec<f32>]) -> ImageRecord {
        let proposals = feats
            .iter()
            .enumerate()
            .map(|(i, f)| Proposal {
                bbox: BoundingBox {
                    x1: i as f64,
                    y1: 0.0,
                    x2: i as f64 + 1.0,
                    y2: 1.0,
                },
                feature: Some(f.clone()),
                score: None,
            })
            .collect();
        ImageRecord {
            id: id.into(),
            class: "synthetic".into(),
            status,
            split: Split::Train,
            width: 100.0,
            height: 100.0,
            global_feature: None,
            proposals,
        }
    }

    fn e1(dim: usize, scale: f32) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[0] = scale;
        v
    }

    #[test]
    fn loss_at_zero_margin_is_log_two() {
        let det = Detector::zeros(2);
        let img = image_from_features("a", Status::Regular, &[vec![1.0, 0.0]]);
        assert_relative_eq!(
            bag_loss(&det, &img, 1.0).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn loss_saturates_on_correct_side() {
        let det = Detector {
            weights: vec![50.0, 0.0],
            bias: 0.0,
        };
        let img = image_from_features("a", Status::Regular, &[vec![1.0, 0.0]]);
        assert!(bag_loss(&det, &img, 1.0).unwrap() < 1e-20);
    }

    #[test]
    fn loss_symmetric_in_label_and_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b = rng.gen_range(-1.0..1.0);
            let x: Vec<f32> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let neg_x: Vec<f32> = x.iter().map(|v| -v).collect();
            let det = Detector {
                weights: w,
                bias: b,
            };
            let neg_det = Detector {
                weights: det.weights.clone(),
                bias: -det.bias,
            };
            let img = image_from_features("a", Status::Regular, &[x]);
            let img_neg = image_from_features("a", Status::Regular, &[neg_x]);
            let pos = bag_loss(&det, &img, 1.0).unwrap();
            let neg = bag_loss(&neg_det, &img_neg, -1.0).unwrap();
            assert_relative_eq!(pos, neg, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_at_zero_margin() {
        let det = Detector::zeros(3);
        let img = image_from_features("a", Status::Regular, &[vec![1.0, 0.0, 0.0]]);
        let (gw, gb) = bag_loss_gradient(&det, &img, 1.0).unwrap();
        assert_relative_eq!(gw[0], -0.5, epsilon = 1e-12);
        assert_eq!(&gw[1..], &[0.0, 0.0]);
        assert_relative_eq!(gb, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 4;
        let h = 1e-5;
        let mut checked = 0;
        while checked < 20 {
            let feats: Vec<Vec<f32>> = (0..3)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let img = image_from_features("a", Status::Regular, &feats);
            let det = Detector {
                weights: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                bias: rng.gen_range(-0.5..0.5),
            };
            let y = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };

            // skip near-ties of the argmax; the subgradient jumps there
            let mut scores: Vec<f64> = img
                .proposals
                .iter()
                .map(|p| det.score(p.feature.as_deref().unwrap()))
                .collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            if scores[0] - scores[1] < 1e-2 {
                continue;
            }

            let (gw, gb) = bag_loss_gradient(&det, &img, y).unwrap();
            for i in 0..=dim {
                let mut plus = det.clone();
                let mut minus = det.clone();
                if i < dim {
                    plus.weights[i] += h;
                    minus.weights[i] -= h;
                } else {
                    plus.bias += h;
                    minus.bias -= h;
                }
                let fd = (bag_loss(&plus, &img, y).unwrap()
                    - bag_loss(&minus, &img, y).unwrap())
                    / (2.0 * h);
                let g = if i < dim { gw[i] } else { gb };
                let denom = fd.abs().max(g.abs()).max(1e-8);
                assert!(
                    ((fd - g) / denom).abs() < 1e-4,
                    "coordinate {i}: analytic {g} vs fd {fd}"
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn loss_and_gradient_permutation_invariant() {
        let feats = vec![
            vec![0.3f32, -0.4],
            vec![0.9, 0.1],
            vec![-0.2, 0.8],
        ];
        let mut rev = feats.clone();
        rev.reverse();
        let det = Detector {
            weights: vec![1.0, -0.5],
            bias: 0.2,
        };
        let a = image_from_features("a", Status::Regular, &feats);
        let b = image_from_features("a", Status::Regular, &rev);
        assert_eq!(
            bag_loss(&det, &a, 1.0).unwrap(),
            bag_loss(&det, &b, 1.0).unwrap()
        );
        assert_eq!(
            bag_loss_gradient(&det, &a, 1.0).unwrap(),
            bag_loss_gradient(&det, &b, 1.0).unwrap()
        );
    }

    fn separable_bags(rng: &mut ChaCha8Rng, n_per_side: usize, dim: usize) -> Vec<ImageRecord> {
        let mut bags = Vec::new();
        for i in 0..n_per_side {
            // positives carry one signal proposal among distractors
            let mut feats: Vec<Vec<f32>> = (0..4)
                .map(|_| (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect())
                .collect();
            feats[rng.gen_range(0..4)] = e1(dim, 1.0);
            bags.push(image_from_features(
                &format!("pos{i}"),
                Status::Regular,
                &feats,
            ));

            let feats: Vec<Vec<f32>> = (0..4).map(|_| e1(dim, -1.0)).collect();
            bags.push(image_from_features(
                &format!("neg{i}"),
                Status::Other,
                &feats,
            ));
        }
        bags
    }

    #[test]
    fn learns_separable_bags() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bags = separable_bags(&mut rng, 40, 6);
        let refs: Vec<&ImageRecord> = bags.iter().collect();
        let cfg = TrainConfig::default();
        let init = Detector::zeros(6);

        let det = train_detector_on_bags(&refs, &cfg).unwrap();
        let mut correct = 0;
        let mut loss_init = 0.0;
        let mut loss_final = 0.0;
        for bag in &bags {
            let y = bag_label(bag.status);
            let z = max_detection_score(&det, bag).unwrap();
            if z * y > 0.0 {
                correct += 1;
            }
            loss_init += bag_loss(&init, bag, y).unwrap();
            loss_final += bag_loss(&det, bag, y).unwrap();
        }
        let accuracy = correct as f64 / bags.len() as f64;
        assert!(accuracy >= 0.95, "bag accuracy {accuracy}");
        assert!(loss_final < loss_init);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bags = separable_bags(&mut rng, 4, 3);
        let refs: Vec<&ImageRecord> = bags.iter().collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let det = train_detector_on_bags(&refs, &cfg).unwrap();
        assert_eq!(det, Detector::zeros(3));
    }

    #[test]
    fn fixed_seed_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bags = separable_bags(&mut rng, 10, 4);
        let refs: Vec<&ImageRecord> = bags.iter().collect();
        let cfg = TrainConfig {
            seed: 42,
            ..TrainConfig::default()
        };
        let d1 = train_detector_on_bags(&refs, &cfg).unwrap();
        let d2 = train_detector_on_bags(&refs, &cfg).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn missing_side_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bags = separable_bags(&mut rng, 4, 3);
        let only_pos: Vec<&ImageRecord> = bags
            .iter()
            .filter(|b| b.status == Status::Regular)
            .collect();
        assert!(matches!(
            train_detector_on_bags(&only_pos, &TrainConfig::default()).unwrap_err(),
            Error::EmptyTrainSide { side: "other" }
        ));
    }

    #[test]
    fn scoring_fills_scores() {
        let img = image_from_features("a", Status::Regular, &[vec![2.0, 0.5], vec![0.0, 1.0]]);
        let zero = score_proposals(&Detector::zeros(2), &img).unwrap();
        assert!(zero.proposals.iter().all(|p| p.score == Some(0.0)));

        let det = Detector {
            weights: vec![1.0, 0.0],
            bias: 1.0,
        };
        let scored = score_proposals(&det, &img).unwrap();
        assert_eq!(scored.proposals[0].score, Some(3.0));
        assert_eq!(scored.proposals[1].score, Some(1.0));
        // otherwise unchanged
        assert_eq!(scored.id, img.id);
        assert_eq!(scored.proposals[0].bbox, img.proposals[0].bbox);
    }

    #[test]
    fn top_n_sorts_and_truncates() {
        let mut img = image_from_features(
            "a",
            Status::Regular,
            &[vec![1.0f32, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]],
        );
        for (p, s) in img.proposals.iter_mut().zip([3.0, 1.0, 2.0]) {
            p.score = Some(s);
        }
        let all = top_n_proposals(&img, 10);
        assert_eq!(
            all.iter().map(|p| p.score.unwrap()).collect::<Vec<_>>(),
            vec![3.0, 2.0, 1.0]
        );
        let top1 = top_n_proposals(&img, 1);
        assert_eq!(top1[0].score, Some(3.0));
        let top2 = top_n_proposals(&img, 2);
        assert_eq!(
            top2.iter().map(|p| p.score.unwrap()).collect::<Vec<_>>(),
            vec![3.0, 2.0]
        );
    }

    #[test]
    fn detector_file_round_trip() {
        let det = Detector {
            weights: vec![0.25, -1.5, 3.0],
            bias: 0.125,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        save_detector(&det, f.path()).unwrap();
        assert_eq!(load_detector(f.path()).unwrap(), det);
    }
}
