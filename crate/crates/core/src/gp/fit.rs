//! Hyperparameter estimation by minimizing the negative log marginal
//! likelihood.
//!
//! The search runs L-BFGS with Armijo backtracking over
//! `[mu, ln gamma_1, ln gamma_2, ln a, ln b]`; the log-space coordinates keep
//! the positive parameters positive. The jitter is pinned before the search
//! (escalating only if the initial Gram needs it) so the objective is a fixed
//! function of the five parameters. The best iterate seen is returned, which
//! makes the fit monotone: it never ends worse than its initialization.

use super::kernel::{factorize, GramBasis};
use super::likelihood::{lml_value_with_basis, lml_with_basis};
use super::{GpHyperParams, TrainingProposalSet};
use crate::error::{Error, Result};
use nalgebra::DVector;
use std::collections::VecDeque;

const GRAD_TOL: f64 = 1e-6;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const HISTORY: usize = 8;

fn pack(h: &GpHyperParams) -> DVector<f64> {
    DVector::from_vec(vec![
        h.mu,
        h.gamma[0].ln(),
        h.gamma[1].ln(),
        h.a.ln(),
        h.b.ln(),
    ])
}

fn unpack(th: &DVector<f64>, jitter: f64) -> GpHyperParams {
    GpHyperParams {
        mu: th[0],
        gamma: [th[1].exp(), th[2].exp()],
        a: th[3].exp(),
        b: th[4].exp(),
        jitter,
    }
}

/// Fits `(mu, gamma, a, b)` from `init`, holding the jitter fixed.
///
/// Deterministic given the set and the initialization. A failed line search
/// is not an error; the best iterate found so far is returned.
pub fn fit_hyperparameters(
    set: &TrainingProposalSet,
    init: &GpHyperParams,
    max_iters: usize,
) -> Result<GpHyperParams> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let basis = GramBasis::new(set);
    let scores = set.scores();
    let jitter = factorize(&basis, init)?.jitter;

    let value = |th: &DVector<f64>| -> Option<f64> {
        lml_value_with_basis(&basis, &scores, &unpack(th, jitter)).map(|v| -v)
    };
    let value_grad = |th: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        lml_with_basis(&basis, &scores, &unpack(th, jitter)).map(|(v, g)| {
            (
                -v,
                DVector::from_vec(vec![
                    -g.mu,
                    -g.log_gamma[0],
                    -g.log_gamma[1],
                    -g.log_a,
                    -g.log_b,
                ]),
            )
        })
    };

    let mut th = pack(init);
    let (mut f, mut grad) = value_grad(&th).ok_or(Error::Cholesky { jitter })?;
    let mut best = (f, th.clone());
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();

    for _ in 0..max_iters {
        if grad.norm() < GRAD_TOL {
            break;
        }
        let mut dir = two_loop_direction(&grad, &history);
        let mut slope = dir.dot(&grad);
        if !(slope < 0.0) {
            // not a descent direction; restart from steepest descent
            dir = -&grad;
            slope = dir.dot(&grad);
            history.clear();
        }

        let mut step = if history.is_empty() {
            1.0 / grad.norm().max(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = &th + &dir * step;
            if let Some(f_new) = value(&candidate) {
                if f_new.is_finite() && f_new <= f + ARMIJO_C1 * step * slope {
                    accepted = Some(candidate);
                    break;
                }
            }
            step *= 0.5;
        }
        let Some(th_new) = accepted else {
            break; // line search failed; keep the best iterate
        };
        let Some((f_new, grad_new)) = value_grad(&th_new) else {
            break;
        };

        let s = &th_new - &th;
        let y = &grad_new - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            if history.len() == HISTORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        th = th_new;
        f = f_new;
        grad = grad_new;
        if f < best.0 {
            best = (f, th.clone());
        }
    }

    Ok(unpack(&best.1, jitter))
}

/// `-H * g` via the standard two-loop recursion over the curvature history.
fn two_loop_direction(
    grad: &DVector<f64>,
    history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
) -> DVector<f64> {
    let mut q = grad.clone();
    let mut coeffs = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        coeffs.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(coeffs.iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}
