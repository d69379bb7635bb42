//! Gaussian-process generative models over region detection scores.
//!
//! Two models are fitted per class, one on regular training images and one on
//! other-class images. Each treats the detection scores of the retained
//! training proposals as a draw from a GP with a constant mean and a composite
//! covariance: an inner-image overlap kernel that ties scores of overlapping
//! proposals within one image, plus an inter-image squared-exponential kernel
//! over the spatial-relation representation that regresses scores across
//! images. A test image is scored by the conditional likelihood of its
//! proposal scores under each model; images fitting neither model well are
//! flagged as irregular.

mod fit;
mod kernel;
mod likelihood;

pub use fit::fit_hyperparameters;
pub use kernel::{assemble_gram, k_full, k_inter, Gram, GramBasis};
pub use likelihood::{conditional_log_likelihood, log_marginal_likelihood, LmlGradient};

use crate::dataset::{BoundingBox, DatasetManifest, ImageRecord, Status};
use crate::detector::top_n_proposals;
use crate::error::{Error, Result};
use crate::geometry::{proposal_repr, ProposalRepr};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Hyperparameters of one GP model.
///
/// `gamma` weights the two coordinates of the proposal representation inside
/// the inter-image kernel; `a` and `b` weight the inner- and inter-image
/// kernels. All three are kept strictly positive by optimizing in log space.
/// `jitter` is the diagonal augmentation that keeps the Gram factorizable; it
/// is held fixed during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperParams {
    pub mu: f64,
    pub gamma: [f64; 2],
    pub a: f64,
    pub b: f64,
    pub jitter: f64,
}

impl GpHyperParams {
    /// Initialization for the regular-image model: mean 3, kernel weights
    /// 0.5, gamma sampled uniformly from [0.1, 1].
    pub fn regular_init(seed: u64) -> Self {
        Self::init(3.0, seed)
    }

    /// Initialization for the other-class model: mean -3.
    pub fn other_init(seed: u64) -> Self {
        Self::init(-3.0, seed)
    }

    fn init(mu: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GpHyperParams {
            mu,
            gamma: [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)],
            a: 0.5,
            b: 0.5,
            jitter: 1e-6,
        }
    }
}

/// One retained training proposal: which image it came from, its spatial
/// relation to that image's maximum-scored proposal, its box and its score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetProposal {
    pub image: usize,
    pub repr: ProposalRepr,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

/// The training proposals of one model, grouped by source image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingProposalSet {
    image_ids: Vec<String>,
    proposals: Vec<SetProposal>,
}

impl TrainingProposalSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one image's proposals; the highest-scored box is the anchor
    /// for the spatial representation.
    pub fn push_image(
        &mut self,
        id: impl Into<String>,
        width: f64,
        height: f64,
        proposals: &[(BoundingBox, f64)],
    ) {
        if proposals.is_empty() {
            return;
        }
        let image = self.image_ids.len();
        self.image_ids.push(id.into());
        let anchor = proposals
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty")
            .0;
        for (bbox, score) in proposals {
            self.proposals.push(SetProposal {
                image,
                repr: proposal_repr(bbox, &anchor, width, height),
                bbox: *bbox,
                score: *score,
            });
        }
    }

    /// Collects the top-`top_n` scored proposals of the train-split images
    /// with the given status. At most `max_images` images are retained,
    /// subsampled uniformly with the given seed.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        status: Status,
        top_n: usize,
        max_images: usize,
        seed: u64,
    ) -> Result<Self> {
        let images: Vec<&ImageRecord> = manifest.train().filter(|r| r.status == status).collect();
        if images.is_empty() {
            return Err(Error::EmptyTrainSide {
                side: match status {
                    Status::Regular => "regular",
                    _ => "other",
                },
            });
        }
        let mut picked: Vec<usize> = (0..images.len()).collect();
        if images.len() > max_images {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            picked.shuffle(&mut rng);
            picked.truncate(max_images);
            picked.sort_unstable();
        }

        let mut set = TrainingProposalSet::new();
        for &i in &picked {
            let image = images[i];
            let top = top_n_proposals(image, top_n);
            if top.is_empty() {
                return Err(Error::Missing {
                    id: image.id.clone(),
                    what: "proposal scores",
                });
            }
            let boxes: Vec<(BoundingBox, f64)> = top
                .iter()
                .map(|p| (p.bbox, p.score.expect("top_n keeps scored proposals")))
                .collect();
            set.push_image(&image.id, image.width, image.height, &boxes);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn proposals(&self) -> &[SetProposal] {
        &self.proposals
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn scores(&self) -> DVector<f64> {
        DVector::from_iterator(self.proposals.len(), self.proposals.iter().map(|p| p.score))
    }
}

/// A fitted generative model: hyperparameters, retained training proposals
/// and the factored covariance of their scores.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: GpHyperParams,
    pub train: TrainingProposalSet,
    /// Lower Cholesky factor of `K + jitter*I`.
    chol_l: DMatrix<f64>,
    /// `K^-1 (f - mu*1)`.
    alpha: DVector<f64>,
    /// `sum(ln diag(L))`, half the log determinant.
    half_log_det: f64,
}

impl GpModel {
    /// Fits hyperparameters from `init` and factors the resulting Gram.
    pub fn fit(set: TrainingProposalSet, init: &GpHyperParams, max_iters: usize) -> Result<Self> {
        let hyper = fit_hyperparameters(&set, init, max_iters)?;
        Self::from_hyper(set, &hyper)
    }

    /// Builds the model at fixed hyperparameters.
    pub fn from_hyper(set: TrainingProposalSet, hyper: &GpHyperParams) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::EmptySet);
        }
        let gram = assemble_gram(&set, hyper)?;
        let hyper = GpHyperParams {
            jitter: gram.jitter,
            ..*hyper
        };
        let scores = set.scores();
        let residual = scores.map(|s| s - hyper.mu);
        let alpha = gram.solve(&residual);
        let half_log_det = gram.half_log_det();
        Ok(GpModel {
            hyper,
            train: set,
            chol_l: gram.into_lower(),
            alpha,
            half_log_det,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub(crate) fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Solves `(K + jitter*I) x = rhs` columnwise via the stored factor.
    pub(crate) fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let fwd = self
            .chol_l
            .solve_lower_triangular(rhs)
            .expect("factor has positive diagonal");
        self.chol_l
            .tr_solve_lower_triangular(&fwd)
            .expect("factor has positive diagonal")
    }

    /// Log marginal likelihood of the training scores under this model.
    pub fn train_log_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        let residual = self.train.scores().map(|s| s - self.hyper.mu);
        -0.5 * residual.dot(&self.alpha)
            - self.half_log_det
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let n = self.len();
        let mut chol_lower = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                chol_lower.push(self.chol_l[(i, j)]);
            }
        }
        let file = GpModelFile {
            format_version: 1,
            hyper: self.hyper,
            train: self.train.clone(),
            chol_lower,
            alpha: self.alpha.iter().copied().collect(),
        };
        let f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::to_writer(BufWriter::new(f), &file)
            .map_err(|e| Error::ModelFormat(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: GpModelFile = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        if file.format_version != 1 {
            return Err(Error::ModelFormat(format!(
                "unsupported model format version {}",
                file.format_version
            )));
        }
        let n = file.train.len();
        if file.alpha.len() != n || file.chol_lower.len() != n * (n + 1) / 2 {
            return Err(Error::ModelFormat("inconsistent model dimensions".into()));
        }
        if file
            .train
            .proposals()
            .iter()
            .any(|p| p.image >= file.train.image_ids().len())
        {
            return Err(Error::ModelFormat("proposal references unknown image".into()));
        }
        let mut chol_l = DMatrix::zeros(n, n);
        let mut it = file.chol_lower.iter();
        for i in 0..n {
            for j in 0..=i {
                chol_l[(i, j)] = *it.next().expect("length checked");
            }
        }
        let half_log_det = (0..n).map(|i| chol_l[(i, i)].ln()).sum();
        Ok(GpModel {
            hyper: file.hyper,
            train: file.train,
            chol_l,
            alpha: DVector::from_vec(file.alpha),
            half_log_det,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct GpModelFile {
    format_version: u32,
    hyper: GpHyperParams,
    train: TrainingProposalSet,
    chol_lower: Vec<f64>,
    alpha: Vec<f64>,
}

/// Irregularity score of a scored test image: the negated best conditional
/// log-likelihood under the two models, so that higher means more irregular.
pub fn irregularity_score(
    model_regular: &GpModel,
    model_other: &GpModel,
    image: &ImageRecord,
    n: usize,
) -> Result<f64> {
    let test = test_proposals(image, n)?;
    let ll_regular = conditional_log_likelihood(model_regular, &test)?;
    let ll_other = conditional_log_likelihood(model_other, &test)?;
    Ok(-ll_regular.max(ll_other))
}

/// The top-`n` proposals of a scored image as conditional-likelihood inputs,
/// with the representation anchored at the image's own maximum-scored box.
pub fn test_proposals(
    image: &ImageRecord,
    n: usize,
) -> Result<Vec<(ProposalRepr, BoundingBox, f64)>> {
    let top = top_n_proposals(image, n);
    if top.is_empty() {
        return Err(Error::Missing {
            id: image.id.clone(),
            what: "proposal scores",
        });
    }
    let anchor = top[0].bbox;
    Ok(top
        .iter()
        .map(|p| {
            (
                proposal_repr(&p.bbox, &anchor, image.width, image.height),
                p.bbox,
                p.score.expect("top_n keeps scored proposals"),
            )
        })
        .collect())
}
