//! Seeded synthetic benchmark generator.
//!
//! Regular images plant one object box; proposals are jittered full-object
//! copies, sub-boxes of the object ("parts") and background boxes, and each
//! proposal's latent score grows with its overlap with the object
//! (`3*iou - 1` plus noise), so positive scores cluster densely on the
//! object. The noise is a smooth per-image field over box position and size
//! rather than independent per proposal: overlapping boxes score alike, the
//! way detector outputs behave, which is the regularity the covariance model
//! keys on. Other-class images have no object and latent scores near -3.
//!
//! Irregular images (test split only) start as regular images, then a
//! contiguous sub-region of the object flips the sign of the top-scored
//! fraction of the proposals overlapping it: the image-level maximum drops to
//! an intermediate level and heavily overlapping proposal pairs with opposite
//! signs appear. One mid-strength pair is planted explicitly per irregular
//! image so the signature survives top-n selection.
//!
//! Features are built from the final scores (signal in the first coordinate
//! plus noise), so a detector trained on the generated features
//! approximately recovers the planted scores: acceptance checks can run the
//! fast path on planted scores or the full path through detector training.

use crate::dataset::{
    BoundingBox, DatasetManifest, ImageRecord, Proposal, Split, Status,
};
use crate::geometry::iou;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Noise on the signal feature coordinate.
const SIGNAL_FEATURE_NOISE: f64 = 0.1;
/// Noise on the distractor feature coordinates.
const FEATURE_NOISE: f64 = 0.3;
/// Noise on the global image feature; keeps the image-level classifier
/// informative but imperfect.
const GLOBAL_NOISE: f64 = 0.75;
/// Per-image fraction ranges for object copies and object parts. Together
/// they stay well under the evaluation's top-n (20 of 40) so negatively
/// scored boxes on the object surface in the top-n too.
const COPY_FRACTION: (f64, f64) = (0.18, 0.26);
const PART_FRACTION: (f64, f64) = (0.10, 0.18);
/// Share of `score_noise` that is independent per proposal (the rest is the
/// smooth field).
const IID_NOISE_SHARE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Images per status: train gets this many regular and other images,
    /// test gets this many regular, irregular and other images.
    pub images_per_status: usize,
    pub image_size: (f64, f64),
    pub proposals_per_image: usize,
    pub feature_dim: usize,
    pub score_noise: f64,
    /// Fraction of the proposals overlapping the damaged sub-region whose
    /// scores flip sign in an irregular image.
    pub irregular_flip_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            images_per_status: 40,
            image_size: (256.0, 256.0),
            proposals_per_image: 40,
            feature_dim: 32,
            score_noise: 0.35,
            irregular_flip_fraction: 0.5,
        }
    }
}

fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    rng.sample::<f64, _>(StandardNormal) * std
}

fn clamp_box(mut b: BoundingBox, width: f64, height: f64) -> BoundingBox {
    b.x1 = b.x1.clamp(0.0, width);
    b.x2 = b.x2.clamp(0.0, width);
    b.y1 = b.y1.clamp(0.0, height);
    b.y2 = b.y2.clamp(0.0, height);
    b
}

fn random_object(rng: &mut ChaCha8Rng, width: f64, height: f64) -> BoundingBox {
    let w = rng.gen_range(0.3..0.55) * width;
    let h = rng.gen_range(0.3..0.55) * height;
    let x1 = rng.gen_range(0.02 * width..width - w - 0.02 * width);
    let y1 = rng.gen_range(0.02 * height..height - h - 0.02 * height);
    BoundingBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

fn jittered_copy(rng: &mut ChaCha8Rng, object: &BoundingBox, width: f64, height: f64) -> BoundingBox {
    let sw = 0.06 * (object.x2 - object.x1);
    let sh = 0.06 * (object.y2 - object.y1);
    for _ in 0..10 {
        let b = clamp_box(
            BoundingBox {
                x1: object.x1 + normal(rng, sw),
                y1: object.y1 + normal(rng, sh),
                x2: object.x2 + normal(rng, sw),
                y2: object.y2 + normal(rng, sh),
            },
            width,
            height,
        );
        if b.x2 > b.x1 && b.y2 > b.y1 {
            return b;
        }
    }
    *object
}

fn background_box(rng: &mut ChaCha8Rng, width: f64, height: f64) -> BoundingBox {
    let w = rng.gen_range(0.08..0.5) * width;
    let h = rng.gen_range(0.08..0.5) * height;
    let x1 = rng.gen_range(0.0..width - w);
    let y1 = rng.gen_range(0.0..height - h);
    BoundingBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// Background box mostly away from the object.
fn background_box_off_object(
    rng: &mut ChaCha8Rng,
    object: &BoundingBox,
    width: f64,
    height: f64,
) -> BoundingBox {
    let mut b = background_box(rng, width, height);
    for _ in 0..10 {
        if iou(&b, object) <= 0.1 {
            break;
        }
        b = background_box(rng, width, height);
    }
    b
}

/// Sub-box of the object covering half to most of it per axis.
fn part_box(rng: &mut ChaCha8Rng, object: &BoundingBox) -> BoundingBox {
    let w = object.x2 - object.x1;
    let h = object.y2 - object.y1;
    let fx = rng.gen_range(0.5..0.9);
    let fy = rng.gen_range(0.5..0.9);
    let x1 = object.x1 + rng.gen_range(0.0..(1.0 - fx)) * w;
    let y1 = object.y1 + rng.gen_range(0.0..(1.0 - fy)) * h;
    BoundingBox {
        x1,
        y1,
        x2: x1 + fx * w,
        y2: y1 + fy * h,
    }
}

/// Smooth per-image score noise: a random linear field over normalized box
/// center and size plus a per-image offset, with a small independent
/// component. Overlapping boxes receive nearly identical noise.
struct NoiseField {
    cx: f64,
    cy: f64,
    size: f64,
    offset: f64,
    amplitude: f64,
    iid: f64,
}

impl NoiseField {
    fn new(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        NoiseField {
            cx: rng.sample::<f64, _>(StandardNormal),
            cy: rng.sample::<f64, _>(StandardNormal),
            size: rng.sample::<f64, _>(StandardNormal),
            offset: rng.sample::<f64, _>(StandardNormal),
            amplitude,
            iid: amplitude * IID_NOISE_SHARE,
        }
    }

    fn at(&self, b: &BoundingBox, width: f64, height: f64, rng: &mut ChaCha8Rng) -> f64 {
        let (cx, cy) = b.center();
        let x = 2.0 * (cx / width - 0.5);
        let y = 2.0 * (cy / height - 0.5);
        let s = 2.0 * ((b.x2 - b.x1) * (b.y2 - b.y1) / (width * height) - 0.5);
        let field = (self.cx * x + self.cy * y + self.size * s) / 3.0_f64.sqrt()
            + 0.5 * self.offset;
        self.amplitude * field + self.iid * rng.sample::<f64, _>(StandardNormal)
    }
}

/// A randomly chosen half of the object box, the damaged part.
fn damaged_sub_region(rng: &mut ChaCha8Rng, object: &BoundingBox) -> BoundingBox {
    let frac = rng.gen_range(0.45..0.6);
    let w = object.x2 - object.x1;
    let h = object.y2 - object.y1;
    match rng.gen_range(0..4) {
        0 => BoundingBox {
            x2: object.x1 + frac * w,
            ..*object
        },
        1 => BoundingBox {
            x1: object.x2 - frac * w,
            ..*object
        },
        2 => BoundingBox {
            y2: object.y1 + frac * h,
            ..*object
        },
        _ => BoundingBox {
            y1: object.y2 - frac * h,
            ..*object
        },
    }
}

fn features_from_score(rng: &mut ChaCha8Rng, score: f64, dim: usize) -> Vec<f32> {
    let mut f = Vec::with_capacity(dim);
    f.push((score + normal(rng, SIGNAL_FEATURE_NOISE)) as f32);
    for _ in 1..dim {
        f.push(normal(rng, FEATURE_NOISE) as f32);
    }
    f
}

fn build_image(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    id: String,
    status: Status,
    split: Split,
) -> ImageRecord {
    let (width, height) = cfg.image_size;
    let n = cfg.proposals_per_image;
    let field = NoiseField::new(rng, cfg.score_noise);

    let mut boxes = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    match status {
        Status::Other => {
            for _ in 0..n {
                let b = background_box(rng, width, height);
                let noise = field.at(&b, width, height, rng);
                boxes.push(b);
                scores.push(-3.0 + noise);
            }
        }
        _ => {
            let object = random_object(rng, width, height);
            let copies = ((n as f64 * rng.gen_range(COPY_FRACTION.0..COPY_FRACTION.1)).round()
                as usize)
                .clamp(1, n);
            let parts = ((n as f64 * rng.gen_range(PART_FRACTION.0..PART_FRACTION.1)).round()
                as usize)
                .min(n - copies);
            for _ in 0..copies {
                boxes.push(jittered_copy(rng, &object, width, height));
            }
            for _ in 0..parts {
                boxes.push(part_box(rng, &object));
            }
            for _ in (copies + parts)..n {
                boxes.push(background_box_off_object(rng, &object, width, height));
            }
            for b in &boxes {
                let noise = field.at(b, width, height, rng);
                scores.push(3.0 * iou(b, &object) - 1.0 + noise);
            }

            if status == Status::Irregular {
                let sub = damaged_sub_region(rng, &object);
                // substantial overlap only; boxes merely touching the
                // damaged part keep their scores
                let mut overlapping: Vec<usize> = (0..n)
                    .filter(|&i| iou(&boxes[i], &sub) > 0.25)
                    .collect();
                overlapping.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
                // damage severity varies per image up to the configured
                // fraction; mildly damaged images stay close to regular in
                // score values and are telling apart only by the local
                // disagreement pattern
                let severity = cfg.irregular_flip_fraction * rng.gen_range(0.3..1.0);
                let flips = ((overlapping.len() as f64 * severity).round() as usize)
                    .max(1)
                    .min(overlapping.len());
                for &i in &overlapping[..flips] {
                    scores[i] = -scores[i];
                }

                // plant one guaranteed opposite-sign heavily overlapping
                // pair at a magnitude that survives top-n selection: clone a
                // mid-strength proposal on the damaged part and negate the
                // clone's score, replacing the lowest-scored proposal
                let partner = (0..n)
                    .filter(|&i| {
                        scores[i] > 0.3 && scores[i] < 0.65 && iou(&boxes[i], &sub) > 0.1
                    })
                    .min_by(|&i, &j| {
                        (scores[i] - 0.45).abs().total_cmp(&(scores[j] - 0.45).abs())
                    })
                    .or_else(|| {
                        (0..n)
                            .filter(|&i| scores[i] > 0.3)
                            .min_by(|&i, &j| {
                                (scores[i] - 0.45).abs().total_cmp(&(scores[j] - 0.45).abs())
                            })
                    })
                    .unwrap_or_else(|| {
                        (0..n)
                            .max_by(|&i, &j| scores[i].total_cmp(&scores[j]))
                            .expect("nonempty")
                    });
                let argmin = (0..n)
                    .min_by(|&i, &j| scores[i].total_cmp(&scores[j]))
                    .expect("nonempty");
                let m = boxes[partner];
                let jx = 0.005 * (m.x2 - m.x1);
                let jy = 0.005 * (m.y2 - m.y1);
                let clone = clamp_box(
                    BoundingBox {
                        x1: m.x1 + rng.gen_range(-jx..jx),
                        y1: m.y1 + rng.gen_range(-jy..jy),
                        x2: m.x2 + rng.gen_range(-jx..jx),
                        y2: m.y2 + rng.gen_range(-jy..jy),
                    },
                    width,
                    height,
                );
                boxes[argmin] = clone;
                scores[argmin] = -scores[partner];
            }
        }
    }

    let proposals: Vec<Proposal> = boxes
        .iter()
        .zip(&scores)
        .map(|(b, s)| Proposal {
            bbox: *b,
            feature: Some(features_from_score(rng, *s, cfg.feature_dim)),
            score: Some(*s),
        })
        .collect();

    // image-level feature from the mean of the top-20 latent scores
    let mut top = scores.clone();
    top.sort_by(|x, y| y.total_cmp(x));
    top.truncate(20);
    let image_level = top.iter().sum::<f64>() / top.len() as f64;
    let mut global = Vec::with_capacity(cfg.feature_dim);
    global.push((image_level + normal(rng, GLOBAL_NOISE)) as f32);
    for _ in 1..cfg.feature_dim {
        global.push(normal(rng, GLOBAL_NOISE) as f32);
    }

    ImageRecord {
        id,
        class: "synthetic".into(),
        status,
        split,
        width,
        height,
        global_feature: Some(global),
        proposals,
    }
}

/// Generates a train+test dataset; deterministic given the seed. The train
/// split holds regular and other images only.
pub fn generate(cfg: &SynthConfig) -> DatasetManifest {
    let mut records = Vec::new();
    let mut counter = 0u64;
    let mut push = |records: &mut Vec<ImageRecord>, prefix: &str, status, split, count| {
        for i in 0..count {
            let mut rng = image_rng(cfg.seed, counter);
            counter += 1;
            records.push(build_image(
                cfg,
                &mut rng,
                format!("{prefix}-{i:04}"),
                status,
                split,
            ));
        }
    };

    let m = cfg.images_per_status;
    push(&mut records, "train-regular", Status::Regular, Split::Train, m);
    push(&mut records, "train-other", Status::Other, Split::Train, m);
    push(&mut records, "test-regular", Status::Regular, Split::Test, m);
    push(&mut records, "test-irregular", Status::Irregular, Split::Test, m);
    push(&mut records, "test-other", Status::Other, Split::Test, m);

    DatasetManifest {
        class_name: "synthetic".into(),
        feature_dim: Some(cfg.feature_dim),
        records,
    }
}

/// Ranking ground truth: irregular images are the positive class.
pub fn oracle_labels(manifest: &DatasetManifest) -> BTreeMap<String, i32> {
    manifest
        .records
        .iter()
        .map(|r| {
            (
                r.id.clone(),
                if r.status == Status::Irregular { 1 } else { -1 },
            )
        })
        .collect()
}
