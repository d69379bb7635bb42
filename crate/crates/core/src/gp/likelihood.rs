//! Marginal likelihood of training scores and conditional likelihood of a
//! test image's scores.
//!
//! With `K` the jittered Gram of the training proposals, `r = f - mu*1` and
//! `alpha = K^-1 r`, the log marginal likelihood is
//! `-r^T alpha / 2 - log det K / 2 - n log(2 pi) / 2`; its gradient in a
//! kernel parameter `p` is `(alpha^T dK/dp alpha - tr(K^-1 dK/dp)) / 2`.
//! Conditioning on the training scores gives the usual Gaussian posterior
//! over a test image's scores, whose cross-covariance carries the inter-image
//! term only (training and test proposals never share an image) while the
//! test-test block keeps the inner-image term.

use super::kernel::{factorize_fixed, k_inter, GramBasis};
use super::{GpHyperParams, GpModel, TrainingProposalSet};
use crate::dataset::BoundingBox;
use crate::error::{Error, Result};
use crate::geometry::{chi2_overlap, ProposalRepr};
use nalgebra::{DMatrix, DVector};

const LN_2PI: f64 = 1.8378770664093453;

/// Gradient of the log marginal likelihood in the optimized
/// parameterization: raw `mu`, log space for the positive parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmlGradient {
    pub mu: f64,
    pub log_gamma: [f64; 2],
    pub log_a: f64,
    pub log_b: f64,
}

impl LmlGradient {
    pub fn norm(&self) -> f64 {
        (self.mu * self.mu
            + self.log_gamma[0] * self.log_gamma[0]
            + self.log_gamma[1] * self.log_gamma[1]
            + self.log_a * self.log_a
            + self.log_b * self.log_b)
            .sqrt()
    }
}

/// Log marginal likelihood of the set's scores and its analytic gradient.
/// The jitter in `hyper` is applied as-is and is not part of the gradient.
pub fn log_marginal_likelihood(
    set: &TrainingProposalSet,
    hyper: &GpHyperParams,
) -> Result<(f64, LmlGradient)> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let basis = GramBasis::new(set);
    lml_with_basis(&basis, &set.scores(), hyper).ok_or(Error::Cholesky {
        jitter: hyper.jitter,
    })
}

/// Value-only path used inside line searches; `None` when the Gram does not
/// factorize at the fixed jitter.
pub(crate) fn lml_value_with_basis(
    basis: &GramBasis,
    scores: &DVector<f64>,
    hyper: &GpHyperParams,
) -> Option<f64> {
    let gram = factorize_fixed(basis, hyper)?;
    let residual = scores.map(|s| s - hyper.mu);
    let alpha = gram.solve(&residual);
    let n = basis.len() as f64;
    Some(-0.5 * residual.dot(&alpha) - gram.half_log_det() - 0.5 * n * LN_2PI)
}

pub(crate) fn lml_with_basis(
    basis: &GramBasis,
    scores: &DVector<f64>,
    hyper: &GpHyperParams,
) -> Option<(f64, LmlGradient)> {
    let n = basis.len();
    let gram = factorize_fixed(basis, hyper)?;
    let residual = scores.map(|s| s - hyper.mu);
    let alpha = gram.solve(&residual);
    let value = -0.5 * residual.dot(&alpha) - gram.half_log_det() - 0.5 * n as f64 * LN_2PI;

    // K^-1 through the factor
    let identity = DMatrix::identity(n, n);
    let fwd = gram
        .lower()
        .solve_lower_triangular(&identity)
        .expect("factor has positive diagonal");
    let kinv = gram
        .lower()
        .tr_solve_lower_triangular(&fwd)
        .expect("factor has positive diagonal");

    let inter = basis.inter_matrix(&hyper.gamma);
    let inner = basis.inner();

    // fused accumulation of alpha^T M alpha and tr(K^-1 M) for each dK/dp
    let mut quad_a = 0.0;
    let mut tr_a = 0.0;
    let mut quad_b = 0.0;
    let mut tr_b = 0.0;
    let mut quad_g = [0.0; 2];
    let mut tr_g = [0.0; 2];
    for i in 0..n {
        let ai = alpha[i];
        for j in 0..n {
            let w = ai * alpha[j];
            let kv = kinv[(i, j)];
            let c = inner[(i, j)];
            let e = inter[(i, j)];
            quad_a += w * c;
            tr_a += kv * c;
            quad_b += w * e;
            tr_b += kv * e;
            for d in 0..2 {
                let m = -0.5 * basis.dsq(d)[(i, j)] * e;
                quad_g[d] += w * m;
                tr_g[d] += kv * m;
            }
        }
    }

    let grad = LmlGradient {
        mu: alpha.sum(),
        log_a: hyper.a * 0.5 * (quad_a - tr_a),
        log_b: hyper.b * 0.5 * (quad_b - tr_b),
        log_gamma: [
            hyper.gamma[0] * hyper.b * 0.5 * (quad_g[0] - tr_g[0]),
            hyper.gamma[1] * hyper.b * 0.5 * (quad_g[1] - tr_g[1]),
        ],
    };
    Some((value, grad))
}

/// Per-proposal log likelihood of one test image's scores conditioned on the
/// model's training scores. All test proposals must come from a single image;
/// the total log density is divided by the number of test proposals so images
/// with fewer proposals stay comparable.
pub fn conditional_log_likelihood(
    model: &GpModel,
    test: &[(ProposalRepr, BoundingBox, f64)],
) -> Result<f64> {
    let nt = test.len();
    if nt == 0 {
        return Err(Error::EmptySet);
    }
    let hyper = &model.hyper;
    let props = model.train.proposals();
    let n = props.len();

    // cross-covariance is inter-image only: test proposals never share an
    // image with training proposals
    let kstar = DMatrix::from_fn(n, nt, |i, j| {
        hyper.b * k_inter(&props[i].repr, &test[j].0, &hyper.gamma)
    });
    let mean = DVector::from_fn(nt, |j, _| hyper.mu + kstar.column(j).dot(model.alpha()));

    let w = model.solve_matrix(&kstar);
    let mut sigma = DMatrix::from_fn(nt, nt, |i, j| {
        hyper.a * chi2_overlap(&test[i].1, &test[j].1)
            + hyper.b * k_inter(&test[i].0, &test[j].0, &hyper.gamma)
    });
    sigma -= kstar.transpose() * w;
    for i in 0..nt {
        sigma[(i, i)] += hyper.jitter;
    }

    let chol = sigma.cholesky().ok_or(Error::PredictiveCovariance)?;
    let lower = chol.l();
    let half_log_det: f64 = (0..nt).map(|i| lower[(i, i)].ln()).sum();
    let z = DVector::from_fn(nt, |j, _| test[j].2) - mean;
    let quad = z.dot(&chol.solve(&z));
    let total = -0.5 * quad - half_log_det - 0.5 * nt as f64 * LN_2PI;
    Ok(total / nt as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::test_support::random_set;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_hyper() -> GpHyperParams {
        GpHyperParams {
            mu: 2.0,
            gamma: [1.0, 1.0],
            a: 0.5,
            b: 0.5,
            jitter: 0.0,
        }
    }

    #[test]
    fn univariate_at_mean_unit_variance() {
        // a + b + jitter = 1, score equal to the mean
        let mut set = TrainingProposalSet::new();
        let b = BoundingBox {
            x1: 0.0,
            y1: 0.0,
            x2: 4.0,
            y2: 4.0,
        };
        set.push_image("a", 10.0, 10.0, &[(b, 2.0)]);
        let (value, _) = log_marginal_likelihood(&set, &unit_hyper()).unwrap();
        assert_relative_eq!(value, -0.9189385332046727, epsilon = 1e-12);
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let set = random_set(&mut rng, 3, 4);
        let hyper = GpHyperParams::regular_init(5);
        let (v1, _) = log_marginal_likelihood(&set, &hyper).unwrap();

        let mut permuted = set.clone();
        permuted.proposals.reverse();
        let (v2, _) = log_marginal_likelihood(&permuted, &hyper).unwrap();
        assert_relative_eq!(v1, v2, epsilon = 1e-10);
    }

    fn perturbed(hyper: &GpHyperParams, coord: usize, h: f64) -> GpHyperParams {
        let mut out = *hyper;
        match coord {
            0 => out.mu += h,
            1 => out.gamma[0] = (hyper.gamma[0].ln() + h).exp(),
            2 => out.gamma[1] = (hyper.gamma[1].ln() + h).exp(),
            3 => out.a = (hyper.a.ln() + h).exp(),
            4 => out.b = (hyper.b.ln() + h).exp(),
            _ => unreachable!(),
        }
        out
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let h = 1e-5;
        for case in 0..10 {
            let images = rng.gen_range(2..5);
            let per_image = rng.gen_range(1..=15 / images).max(1);
            let set = random_set(&mut rng, images, per_image);
            let hyper = GpHyperParams {
                mu: rng.gen_range(-2.0..2.0),
                gamma: [rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0)],
                a: rng.gen_range(0.2..1.5),
                b: rng.gen_range(0.2..1.5),
                jitter: 1e-8,
            };
            let (_, grad) = log_marginal_likelihood(&set, &hyper).unwrap();
            let analytic = [
                grad.mu,
                grad.log_gamma[0],
                grad.log_gamma[1],
                grad.log_a,
                grad.log_b,
            ];
            for coord in 0..5 {
                let plus = log_marginal_likelihood(&set, &perturbed(&hyper, coord, h))
                    .unwrap()
                    .0;
                let minus = log_marginal_likelihood(&set, &perturbed(&hyper, coord, -h))
                    .unwrap()
                    .0;
                let fd = (plus - minus) / (2.0 * h);
                let denom = fd.abs().max(analytic[coord].abs()).max(1e-8);
                assert!(
                    ((fd - analytic[coord]) / denom).abs() < 1e-4,
                    "case {case} coordinate {coord}: analytic {} vs fd {fd}",
                    analytic[coord]
                );
            }
        }
    }

    #[test]
    fn conditional_reduces_to_unconditional_when_b_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let set = random_set(&mut rng, 3, 4);
        let hyper = GpHyperParams {
            mu: 0.5,
            gamma: [1.0, 1.0],
            a: 0.7,
            b: 1e-14,
            jitter: 1e-8,
        };
        let model = GpModel::from_hyper(set, &hyper).unwrap();

        let b1 = BoundingBox {
            x1: 10.0,
            y1: 10.0,
            x2: 30.0,
            y2: 30.0,
        };
        let b2 = BoundingBox {
            x1: 15.0,
            y1: 10.0,
            x2: 35.0,
            y2: 30.0,
        };
        let r1 = ProposalRepr {
            iou_to_max: 1.0,
            center_dist: 0.0,
        };
        let r2 = ProposalRepr {
            iou_to_max: 0.6,
            center_dist: 0.05,
        };
        let test = vec![(r1, b1, 0.9), (r2, b2, 0.4)];
        let ll = conditional_log_likelihood(&model, &test).unwrap();

        // independent reference: N(mu*1, a*chi2 + jitter*I) over the pair,
        // written out as the explicit bivariate normal density
        let v = hyper.a + hyper.jitter;
        let c = hyper.a * chi2_overlap(&b1, &b2);
        let det = v * v - c * c;
        let z1 = 0.9 - hyper.mu;
        let z2 = 0.4 - hyper.mu;
        let quad = (v * z1 * z1 - 2.0 * c * z1 * z2 + v * z2 * z2) / det;
        let expected = (-0.5 * quad - 0.5 * det.ln() - LN_2PI) / 2.0;
        assert_relative_eq!(ll, expected, epsilon = 1e-9);
    }

    #[test]
    fn conditional_matches_bivariate_closed_form() {
        // one training proposal, one test proposal, everything scalar
        let mut set = TrainingProposalSet::new();
        let train_box = BoundingBox {
            x1: 5.0,
            y1: 5.0,
            x2: 25.0,
            y2: 25.0,
        };
        let f_r = 1.3;
        set.push_image("train", 100.0, 100.0, &[(train_box, f_r)]);
        let hyper = GpHyperParams {
            mu: 0.8,
            gamma: [0.9, 1.7],
            a: 0.4,
            b: 0.6,
            jitter: 1e-7,
        };
        let model = GpModel::from_hyper(set, &hyper).unwrap();

        let test_box = BoundingBox {
            x1: 40.0,
            y1: 40.0,
            x2: 70.0,
            y2: 80.0,
        };
        let test_repr = ProposalRepr {
            iou_to_max: 0.35,
            center_dist: 0.2,
        };
        let f_t = 0.2;
        let ll = conditional_log_likelihood(&model, &[(test_repr, test_box, f_t)]).unwrap();

        // closed form: the train repr is (1, 0) by construction
        let train_repr = ProposalRepr {
            iou_to_max: 1.0,
            center_dist: 0.0,
        };
        let k_rr = hyper.a + hyper.b + hyper.jitter;
        let cross = hyper.b * k_inter(&train_repr, &test_repr, &hyper.gamma);
        let k_tt = hyper.a + hyper.b + hyper.jitter;
        let mean = hyper.mu + cross / k_rr * (f_r - hyper.mu);
        let var = k_tt - cross * cross / k_rr;
        let z = f_t - mean;
        let expected = -0.5 * z * z / var - 0.5 * var.ln() - 0.5 * LN_2PI;
        assert_relative_eq!(ll, expected, epsilon = 1e-10);
    }

    // Gaussian factorization: conditional (un-normalized) plus the training
    // marginal equals the joint likelihood of the concatenated set.
    #[test]
    fn conditional_consistent_with_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let images = rng.gen_range(2..5);
            let per_image = rng.gen_range(2..6);
            let train = random_set(&mut rng, images, per_image);
            let hyper = GpHyperParams {
                mu: rng.gen_range(-1.0..1.0),
                gamma: [rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0)],
                a: rng.gen_range(0.2..1.0),
                b: rng.gen_range(0.2..1.0),
                jitter: 1e-6,
            };
            let model = GpModel::from_hyper(train.clone(), &hyper).unwrap();
            assert_eq!(model.hyper.jitter, hyper.jitter);

            // one extra image as the test set
            let nt = rng.gen_range(2..5);
            let mut test_boxes: Vec<(BoundingBox, f64)> = Vec::new();
            for _ in 0..nt {
                let x = rng.gen_range(0.0..70.0);
                let y = rng.gen_range(0.0..70.0);
                let bbox = BoundingBox {
                    x1: x,
                    y1: y,
                    x2: x + rng.gen_range(5.0..25.0),
                    y2: y + rng.gen_range(5.0..25.0),
                };
                test_boxes.push((bbox, rng.gen_range(-1.0..1.0)));
            }
            let anchor = test_boxes
                .iter()
                .max_by(|p, q| p.1.total_cmp(&q.1))
                .unwrap()
                .0;
            let test: Vec<(ProposalRepr, BoundingBox, f64)> = test_boxes
                .iter()
                .map(|(b, s)| {
                    (
                        crate::geometry::proposal_repr(b, &anchor, 100.0, 100.0),
                        *b,
                        *s,
                    )
                })
                .collect();

            let conditional_total =
                conditional_log_likelihood(&model, &test).unwrap() * nt as f64;
            let marginal = log_marginal_likelihood(&train, &hyper).unwrap().0;

            let mut joint_set = train.clone();
            joint_set.push_image("test-image", 100.0, 100.0, &test_boxes);
            let joint = log_marginal_likelihood(&joint_set, &hyper).unwrap().0;

            assert_relative_eq!(conditional_total + marginal, joint, epsilon = 1e-8);
        }
    }

    // Opposite-sign scores on a heavily overlapping pair must fit the model
    // strictly worse than agreeing scores, all else equal.
    #[test]
    fn overlapping_disagreement_lowers_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let train = random_set(&mut rng, 4, 5);
        let hyper = GpHyperParams {
            mu: 1.0,
            gamma: [0.8, 0.8],
            a: 0.5,
            b: 0.5,
            jitter: 1e-6,
        };
        let model = GpModel::from_hyper(train, &hyper).unwrap();

        let pair_a = BoundingBox {
            x1: 20.0,
            y1: 20.0,
            x2: 60.0,
            y2: 60.0,
        };
        let pair_b = BoundingBox {
            x1: 21.0,
            y1: 20.0,
            x2: 61.0,
            y2: 60.0,
        };
        assert!(chi2_overlap(&pair_a, &pair_b) > 0.8);
        let far = BoundingBox {
            x1: 70.0,
            y1: 70.0,
            x2: 90.0,
            y2: 95.0,
        };

        // the far proposal scores highest so the representation anchor is
        // identical in both sets; only the pair's second score differs
        let build = |s2: f64| {
            let boxes = vec![(far, 1.7), (pair_a, 1.5), (pair_b, s2)];
            let anchor = boxes
                .iter()
                .max_by(|p, q| p.1.total_cmp(&q.1))
                .unwrap()
                .0;
            boxes
                .iter()
                .map(|(b, s)| {
                    (
                        crate::geometry::proposal_repr(b, &anchor, 100.0, 100.0),
                        *b,
                        *s,
                    )
                })
                .collect::<Vec<_>>()
        };

        let agreeing = build(1.5);
        let opposing = build(-1.5);
        let ll_agree = conditional_log_likelihood(&model, &agreeing).unwrap();
        let ll_oppose = conditional_log_likelihood(&model, &opposing).unwrap();
        assert!(
            ll_agree > ll_oppose,
            "agree {ll_agree} vs oppose {ll_oppose}"
        );
    }
}
