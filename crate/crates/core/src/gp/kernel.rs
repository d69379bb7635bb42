//! The composite covariance function and Gram assembly.
//!
//! For a proposal pair the covariance is `a * k_inner + b * k_inter`:
//! `k_inner` is the chi-squared box-overlap kernel, zero for proposals from
//! different images; `k_inter` is a squared-exponential over the 2-D
//! spatial-relation representation with a learned diagonal weighting. Both
//! components are positive semidefinite, so their weighted sum is too; a
//! small diagonal jitter keeps the factorization robust.

use super::{GpHyperParams, TrainingProposalSet};
use crate::dataset::BoundingBox;
use crate::error::{Error, Result};
use crate::geometry::{chi2_overlap, ProposalRepr};
use nalgebra::{DMatrix, DVector};

/// Inter-image covariance: `exp(-1/2 (r1-r2)^T diag(gamma) (r1-r2))`.
pub fn k_inter(r1: &ProposalRepr, r2: &ProposalRepr, gamma: &[f64; 2]) -> f64 {
    let d0 = r1.iou_to_max - r2.iou_to_max;
    let d1 = r1.center_dist - r2.center_dist;
    (-0.5 * (gamma[0] * d0 * d0 + gamma[1] * d1 * d1)).exp()
}

/// Full covariance of a proposal pair; the inner-image term applies only
/// when both proposals come from the same image.
pub fn k_full(
    p1: (usize, &ProposalRepr, &BoundingBox),
    p2: (usize, &ProposalRepr, &BoundingBox),
    hyper: &GpHyperParams,
) -> f64 {
    let inner = if p1.0 == p2.0 {
        chi2_overlap(p1.2, p2.2)
    } else {
        0.0
    };
    hyper.a * inner + hyper.b * k_inter(p1.1, p2.1, &hyper.gamma)
}

/// Hyperparameter-independent structure of a proposal set's Gram matrix:
/// the inner-image overlaps and the squared representation differences.
/// Assembling the Gram for new hyperparameters is then O(n^2) exp calls.
#[derive(Debug, Clone)]
pub struct GramBasis {
    inner: DMatrix<f64>,
    dsq: [DMatrix<f64>; 2],
    n: usize,
}

impl GramBasis {
    pub fn new(set: &TrainingProposalSet) -> Self {
        let props = set.proposals();
        let n = props.len();
        let mut inner = DMatrix::zeros(n, n);
        let mut d0 = DMatrix::zeros(n, n);
        let mut d1 = DMatrix::zeros(n, n);
        for i in 0..n {
            inner[(i, i)] = 1.0;
            for j in (i + 1)..n {
                if props[i].image == props[j].image {
                    let c = chi2_overlap(&props[i].bbox, &props[j].bbox);
                    inner[(i, j)] = c;
                    inner[(j, i)] = c;
                }
                let a = props[i].repr.iou_to_max - props[j].repr.iou_to_max;
                let b = props[i].repr.center_dist - props[j].repr.center_dist;
                d0[(i, j)] = a * a;
                d0[(j, i)] = a * a;
                d1[(i, j)] = b * b;
                d1[(j, i)] = b * b;
            }
        }
        GramBasis {
            inner,
            dsq: [d0, d1],
            n,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub(crate) fn inner(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub(crate) fn dsq(&self, dim: usize) -> &DMatrix<f64> {
        &self.dsq[dim]
    }

    /// The inter-image kernel matrix at the given weights.
    pub(crate) fn inter_matrix(&self, gamma: &[f64; 2]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            m[(i, i)] = 1.0;
            for j in (i + 1)..self.n {
                let v = (-0.5
                    * (gamma[0] * self.dsq[0][(i, j)] + gamma[1] * self.dsq[1][(i, j)]))
                    .exp();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// `a * inner + b * inter`, without jitter.
    pub fn gram(&self, hyper: &GpHyperParams) -> DMatrix<f64> {
        let mut k = self.inter_matrix(&hyper.gamma);
        k *= hyper.b;
        k.zip_apply(&self.inner, |k, c| *k += hyper.a * c);
        k
    }
}

/// A factorized Gram matrix: `K + jitter*I = L L^T`.
#[derive(Debug, Clone)]
pub struct Gram {
    matrix: DMatrix<f64>,
    lower: DMatrix<f64>,
    /// Jitter actually applied, after any escalation.
    pub jitter: f64,
}

impl Gram {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn into_lower(self) -> DMatrix<f64> {
        self.lower
    }

    pub fn half_log_det(&self) -> f64 {
        (0..self.lower.nrows())
            .map(|i| self.lower[(i, i)].ln())
            .sum()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let fwd = self
            .lower
            .solve_lower_triangular(rhs)
            .expect("factor has positive diagonal");
        self.lower
            .tr_solve_lower_triangular(&fwd)
            .expect("factor has positive diagonal")
    }
}

/// Assembles and factorizes the Gram matrix of a training set.
///
/// Starts from `hyper.jitter` (or `1e-6 * mean(diag K)` when zero) and
/// escalates tenfold up to `1e-2 * mean(diag K)` if the factorization fails;
/// failing even then is an error reporting the final jitter tried.
pub fn assemble_gram(set: &TrainingProposalSet, hyper: &GpHyperParams) -> Result<Gram> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let basis = GramBasis::new(set);
    factorize(&basis, hyper)
}

pub(crate) fn factorize(basis: &GramBasis, hyper: &GpHyperParams) -> Result<Gram> {
    let base = basis.gram(hyper);
    let mean_diag = base.diagonal().mean();
    let cap = 1e-2 * mean_diag;
    let mut jitter = if hyper.jitter > 0.0 {
        hyper.jitter
    } else {
        1e-6 * mean_diag
    };
    loop {
        let mut k = base.clone();
        for i in 0..basis.len() {
            k[(i, i)] += jitter;
        }
        if let Some(chol) = k.clone().cholesky() {
            return Ok(Gram {
                matrix: k,
                lower: chol.unpack(),
                jitter,
            });
        }
        if jitter >= cap {
            return Err(Error::Cholesky { jitter });
        }
        jitter = (jitter * 10.0).min(cap);
    }
}

/// Cholesky at exactly `hyper.jitter`, no escalation; used where the
/// objective must stay a fixed function of the hyperparameters.
pub(crate) fn factorize_fixed(basis: &GramBasis, hyper: &GpHyperParams) -> Option<Gram> {
    let mut k = basis.gram(hyper);
    for i in 0..basis.len() {
        k[(i, i)] += hyper.jitter;
    }
    k.clone().cholesky().map(|chol| Gram {
        matrix: k,
        lower: chol.unpack(),
        jitter: hyper.jitter,
    })
}
