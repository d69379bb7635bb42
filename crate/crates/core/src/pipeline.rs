//! File-to-file pipeline stages and their orchestration.
//!
//! Every stage consumes and produces files only, so any stage can be rerun in
//! isolation. Outputs are written to a `.partial` path and renamed into place
//! on success; a failed stage leaves the `.partial` file behind for
//! inspection. Reruns with identical seeds reproduce all outputs bitwise.

use crate::baselines;
use crate::dataset::{
    load_dataset, load_scores, save_dataset, save_scores, DatasetManifest, ImageRecord, Status,
};
use crate::detector::{
    load_detector, save_detector, score_proposals, train_detector, TrainConfig,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_table, EvalReport};
use crate::gp::{irregularity_score, GpHyperParams, GpModel, TrainingProposalSet};
use crate::synth::SynthConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gp,
    PnRatio,
    Global,
    MilMax,
    MilMaxGauss,
    MilTopK,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Gp,
        Method::PnRatio,
        Method::Global,
        Method::MilMax,
        Method::MilMaxGauss,
        Method::MilTopK,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Gp => "gp",
            Method::PnRatio => "pnratio",
            Method::Global => "global",
            Method::MilMax => "milmax",
            Method::MilMaxGauss => "milmaxgauss",
            Method::MilTopK => "miltopk",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gp" => Ok(Method::Gp),
            "pnratio" => Ok(Method::PnRatio),
            "global" => Ok(Method::Global),
            "milmax" => Ok(Method::MilMax),
            "milmaxgauss" => Ok(Method::MilMaxGauss),
            "miltopk" => Ok(Method::MilTopK),
            other => Err(format!(
                "unknown method `{other}` (expected gp|pnratio|global|milmax|milmaxgauss|miltopk)"
            )),
        }
    }
}

/// Options for fitting the two GP models from a scored dataset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GpFitOptions {
    pub top_n: usize,
    pub max_train_images: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        GpFitOptions {
            top_n: 20,
            max_train_images: 100,
            max_iters: 100,
            seed: 0,
        }
    }
}

/// End-to-end configuration; every field has a default so a config file only
/// needs the keys it overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Existing dataset to use; when absent the synth stage generates one.
    pub dataset: Option<PathBuf>,
    pub method: Method,
    pub top_n: usize,
    pub max_train_images: usize,
    pub gp_max_iters: usize,
    pub seed: u64,
    /// Worker threads for image-level parallelism; 0 picks the default.
    pub jobs: usize,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("out"),
            dataset: None,
            method: Method::Gp,
            top_n: 20,
            max_train_images: 100,
            gp_max_iters: 100,
            seed: 0,
            jobs: 0,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.jsonl"))
    }

    pub fn scored_path(&self) -> PathBuf {
        self.out_dir.join("scored.jsonl")
    }

    pub fn detector_path(&self) -> PathBuf {
        self.out_dir.join("detector.json")
    }

    pub fn model_regular_path(&self) -> PathBuf {
        self.out_dir.join("model_regular.json")
    }

    pub fn model_other_path(&self) -> PathBuf {
        self.out_dir.join("model_other.json")
    }

    pub fn scores_path(&self, method: Method) -> PathBuf {
        self.out_dir.join(format!("scores_{}.csv", method.name()))
    }

    pub fn report_path(&self) -> PathBuf {
        self.out_dir.join("report.json")
    }

    pub fn table_path(&self) -> PathBuf {
        self.out_dir.join("report.txt")
    }

    fn gp_fit_options(&self) -> GpFitOptions {
        GpFitOptions {
            top_n: self.top_n,
            max_train_images: self.max_train_images,
            max_iters: self.gp_max_iters,
            seed: self.seed,
        }
    }
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".partial");
    PathBuf::from(name)
}

/// Runs `produce` against a `.partial` path and renames into place on
/// success; a failure keeps the partial file.
fn stage_output<T>(path: &Path, produce: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let partial = partial_path(path);
    let value = produce(&partial)?;
    std::fs::rename(&partial, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(value)
}

/// Generates a synthetic dataset file.
pub fn synth_stage(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    let manifest = crate::synth::generate(cfg);
    stage_output(out, |p| save_dataset(&manifest, p))?;
    Ok(manifest)
}

/// Trains the MIL detector on the train split and saves it.
pub fn detect_train_stage(dataset: &Path, cfg: &TrainConfig, out: &Path) -> Result<()> {
    let (manifest, _) = load_dataset(dataset)?;
    let detector = train_detector(&manifest, cfg)?;
    stage_output(out, |p| save_detector(&detector, p))
}

/// Rescores every proposal of every record with the saved detector.
pub fn score_proposals_stage(dataset: &Path, detector: &Path, out: &Path) -> Result<()> {
    let (manifest, _) = load_dataset(dataset)?;
    let detector = load_detector(detector)?;
    let records: Vec<ImageRecord> = manifest
        .records
        .par_iter()
        .map(|r| score_proposals(&detector, r))
        .collect::<Result<_>>()?;
    let scored = DatasetManifest { records, ..manifest };
    stage_output(out, |p| save_dataset(&scored, p))
}

/// Fits the regular and other-class GP models from a scored dataset.
pub fn gp_fit_stage(
    dataset: &Path,
    opts: &GpFitOptions,
    out_regular: &Path,
    out_other: &Path,
) -> Result<()> {
    let (manifest, _) = load_dataset(dataset)?;
    let set_regular = TrainingProposalSet::from_manifest(
        &manifest,
        Status::Regular,
        opts.top_n,
        opts.max_train_images,
        opts.seed,
    )?;
    let set_other = TrainingProposalSet::from_manifest(
        &manifest,
        Status::Other,
        opts.top_n,
        opts.max_train_images,
        opts.seed,
    )?;
    let model_regular = GpModel::fit(
        set_regular,
        &GpHyperParams::regular_init(opts.seed),
        opts.max_iters,
    )?;
    let model_other = GpModel::fit(
        set_other,
        &GpHyperParams::other_init(opts.seed),
        opts.max_iters,
    )?;
    stage_output(out_regular, |p| model_regular.save(p))?;
    stage_output(out_other, |p| model_other.save(p))
}

/// What the score stage needs beyond the dataset.
#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub method: Method,
    pub top_n: usize,
    /// Fitted GP model files; required for the gp method.
    pub model_regular: Option<PathBuf>,
    pub model_other: Option<PathBuf>,
    /// Training configuration for the global baseline's classifier.
    pub train: TrainConfig,
}

fn scores_for_test<F>(manifest: &DatasetManifest, scorer: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&ImageRecord) -> Result<f64> + Sync,
{
    let test: Vec<&ImageRecord> = manifest.test().collect();
    test.par_iter()
        .map(|r| scorer(r).map(|s| (r.id.clone(), s)))
        .collect()
}

/// Scores every test image with the selected method and writes the CSV.
pub fn score_stage(dataset: &Path, opts: &ScoreOptions, out: &Path) -> Result<Vec<(String, f64)>> {
    let (manifest, _) = load_dataset(dataset)?;
    let scores = match opts.method {
        Method::Gp => {
            let regular_path = opts.model_regular.as_deref().ok_or_else(|| {
                Error::ModelFormat("gp scoring needs --model-regular".into())
            })?;
            let other_path = opts
                .model_other
                .as_deref()
                .ok_or_else(|| Error::ModelFormat("gp scoring needs --model-other".into()))?;
            let model_regular = GpModel::load(regular_path)?;
            let model_other = GpModel::load(other_path)?;
            scores_for_test(&manifest, |r| {
                irregularity_score(&model_regular, &model_other, r, opts.top_n)
            })?
        }
        Method::PnRatio => {
            let (g_regular, g_other) = baselines::fit_ratio_models(&manifest)?;
            scores_for_test(&manifest, |r| {
                baselines::pn_ratio_score(&g_regular, &g_other, r)
            })?
        }
        Method::Global => {
            let classifier = baselines::train_global_classifier(&manifest, &opts.train)?;
            scores_for_test(&manifest, |r| {
                baselines::global_linear_score(&classifier, r)
            })?
        }
        Method::MilMax => scores_for_test(&manifest, baselines::mil_max_score)?,
        Method::MilMaxGauss => {
            let (g_regular, g_other) = baselines::fit_max_score_models(&manifest)?;
            scores_for_test(&manifest, |r| {
                baselines::mil_max_gaussian_score(&g_regular, &g_other, r)
            })?
        }
        Method::MilTopK => {
            scores_for_test(&manifest, |r| baselines::mil_topk_score(r, opts.top_n))?
        }
    };
    stage_output(out, |p| save_scores(&scores, p))?;
    Ok(scores)
}

/// Evaluates one or more score files against the dataset's test labels and
/// writes the JSON report, the plain-text table, and optional per-class ROC
/// CSVs for plotting.
pub fn eval_stage(
    dataset: &Path,
    score_files: &[(String, PathBuf)],
    classes: &[String],
    report_out: &Path,
    table_out: Option<&Path>,
    roc_dir: Option<&Path>,
) -> Result<BTreeMap<String, EvalReport>> {
    let (manifest, _) = load_dataset(dataset)?;
    let mut reports = BTreeMap::new();
    for (name, path) in score_files {
        let scores: BTreeMap<String, f64> = load_scores(path)?.into_iter().collect();
        let report = evaluate(&manifest, &scores, classes)?;
        reports.insert(name.clone(), report);
    }

    stage_output(report_out, |p| write_json(p, &reports))?;
    if let Some(table_out) = table_out {
        let table = render_table(&reports);
        stage_output(table_out, |p| {
            std::fs::write(p, &table).map_err(|e| Error::io(p.display().to_string(), e))
        })?;
    }
    if let Some(dir) = roc_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for (name, report) in &reports {
            for (class, class_eval) in &report.per_class {
                let path = dir.join(format!("roc_{name}_{class}.csv"));
                stage_output(&path, |p| {
                    let f = std::fs::File::create(p)
                        .map_err(|e| Error::io(p.display().to_string(), e))?;
                    let mut w = std::io::BufWriter::new(f);
                    writeln!(w, "fpr,tpr").map_err(|e| Error::io(p.display().to_string(), e))?;
                    for (fpr, tpr) in &class_eval.roc {
                        writeln!(w, "{fpr:.8e},{tpr:.8e}")
                            .map_err(|e| Error::io(p.display().to_string(), e))?;
                    }
                    Ok(())
                })?;
            }
        }
    }
    Ok(reports)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::ModelFormat(e.to_string()))?;
    writeln!(w).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn stage<T>(name: &'static str, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Runs the configured stages end to end and returns the selected method's
/// report. All artifacts land under `config.out_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<EvalReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::ModelFormat(format!("thread pool: {e}")))?;
    pool.install(|| run_pipeline_inner(config))
}

fn run_pipeline_inner(config: &PipelineConfig) -> Result<EvalReport> {
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(config.out_dir.display().to_string(), e))?;

    let dataset = config.dataset_path();
    if config.dataset.is_none() {
        stage("synth", synth_stage(&config.synth, &dataset))?;
    }

    stage(
        "detect-train",
        detect_train_stage(&dataset, &config.train, &config.detector_path()),
    )?;
    stage(
        "score-proposals",
        score_proposals_stage(&dataset, &config.detector_path(), &config.scored_path()),
    )?;

    if config.method == Method::Gp {
        stage(
            "gp-fit",
            gp_fit_stage(
                &config.scored_path(),
                &config.gp_fit_options(),
                &config.model_regular_path(),
                &config.model_other_path(),
            ),
        )?;
    }

    let score_opts = ScoreOptions {
        method: config.method,
        top_n: config.top_n,
        model_regular: Some(config.model_regular_path()),
        model_other: Some(config.model_other_path()),
        train: config.train.clone(),
    };
    stage(
        "score",
        score_stage(
            &config.scored_path(),
            &score_opts,
            &config.scores_path(config.method),
        ),
    )?;

    let reports = stage(
        "eval",
        eval_stage(
            &config.scored_path(),
            &[(
                config.method.name().to_string(),
                config.scores_path(config.method),
            )],
            &[],
            &config.report_path(),
            Some(&config.table_path()),
            None,
        ),
    )?;
    Ok(reports
        .into_iter()
        .next()
        .map(|(_, r)| r)
        .expect("one method evaluated"))
}
