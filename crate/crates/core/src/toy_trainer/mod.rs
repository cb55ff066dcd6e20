//! Desk-scale two-stage multi-branch training.
//!
//! A fixed feature bank ([`features`]) feeds per-pixel linear heads: three
//! segmentation branches and one three-channel score head. All gradients are
//! closed-form, so every stage can be checked against finite differences.
//!
//! Stage one minimises `L_seg = l_sa + l1 + l2 + l3` over the branch heads.
//! Stage two freezes them and fits the score head with the cross entropy
//! between the one-hot lowest-loss branch and the mask-averaged scores.

pub mod features;
pub mod synthetic;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{self, DatasetManifest, ManifestError, Split};
use crate::grid::{Grid, MaskGrid};
use crate::losses_metrics::{bce_pixel, dice_coefficient, sigmoid, PROB_EPS};
use crate::pseudo_mask::{MaskOp, SigmaSpec};
use crate::scoring::{gt_score, gt_score_size_match, infer_branch, softmax, GtScoreMode, ScoreMap, ScoreVector, SCORE_EPS};
use crate::size_branching::{
    calibrate_thresholds, coefficient_alpha, relative_size, select_branch, BranchThresholds, SizeError, N_BRANCHES,
};

pub use features::{extract_features, FeatureStack, N_FEATURES};
pub use synthetic::{generate_corpus, ShapeFamily, SyntheticSample, SyntheticSpec};

/// Probability above which a pixel is predicted foreground.
pub const PREDICTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("feature stack has {found} channels, model expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("{stage} diverged at epoch {epoch} (loss {loss}); parameters: {state}")]
    DivergenceDetected {
        stage: &'static str,
        epoch: usize,
        loss: f64,
        state: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Size(#[from] SizeError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("invalid config: {0}")]
    Config(String),
}

/// `w · f + b` evaluated per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearHead {
    fn zeros(k: usize) -> Self {
        Self {
            weights: vec![0.0; k],
            bias: 0.0,
        }
    }

    #[inline]
    fn eval(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub k: usize,
    pub branch_heads: Vec<LinearHead>,
    pub score_head: Vec<LinearHead>,
}

/// Flat checkpoint: header plus all parameters, branch heads first, each head
/// as `K` weights followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(rename = "K")]
    pub k: usize,
    pub n_branches: usize,
    pub params: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(k: usize, n_branches: usize) -> Self {
        Self {
            k,
            branch_heads: vec![LinearHead::zeros(k); n_branches],
            score_head: vec![LinearHead::zeros(k); n_branches],
        }
    }

    /// Small uniform initial weights drawn from `seed`.
    pub fn init(k: usize, n_branches: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(k, n_branches);
        for head in m.branch_heads.iter_mut().chain(m.score_head.iter_mut()) {
            for w in head.weights.iter_mut() {
                *w = rng.random_range(-0.01..0.01);
            }
        }
        m
    }

    pub fn n_branches(&self) -> usize {
        self.branch_heads.len()
    }

    fn flatten(heads: &[LinearHead]) -> Vec<f64> {
        heads
            .iter()
            .flat_map(|h| h.weights.iter().copied().chain(std::iter::once(h.bias)))
            .collect()
    }

    fn unflatten(heads: &mut [LinearHead], flat: &[f64]) {
        let k = heads[0].weights.len();
        for (h, chunk) in heads.iter_mut().zip(flat.chunks_exact(k + 1)) {
            h.weights.copy_from_slice(&chunk[..k]);
            h.bias = chunk[k];
        }
    }

    pub fn branch_params(&self) -> Vec<f64> {
        Self::flatten(&self.branch_heads)
    }

    pub fn set_branch_params(&mut self, flat: &[f64]) {
        Self::unflatten(&mut self.branch_heads, flat);
    }

    pub fn score_params(&self) -> Vec<f64> {
        Self::flatten(&self.score_head)
    }

    pub fn set_score_params(&mut self, flat: &[f64]) {
        Self::unflatten(&mut self.score_head, flat);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = self.branch_params();
        params.extend(self.score_params());
        Checkpoint {
            k: self.k,
            n_branches: self.n_branches(),
            params,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, TrainError> {
        let per = c.n_branches * (c.k + 1);
        if c.params.len() != 2 * per || c.k == 0 || c.n_branches == 0 {
            return Err(TrainError::Checkpoint(format!(
                "expected {} parameters for K={} and {} branches, found {}",
                2 * per,
                c.k,
                c.n_branches,
                c.params.len()
            )));
        }
        let mut m = Self::zeros(c.k, c.n_branches);
        m.set_branch_params(&c.params[..per]);
        m.set_score_params(&c.params[per..]);
        Ok(m)
    }

    fn dump(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }
}

pub struct ForwardOutput {
    /// One probability grid per branch.
    pub probs: Vec<Grid<f64>>,
    pub raw_scores: ScoreMap,
}

pub fn forward(model: &ToyModel, features: &FeatureStack) -> Result<ForwardOutput, TrainError> {
    if features.k() != model.k {
        return Err(TrainError::ShapeMismatch {
            expected: model.k,
            found: features.k(),
        });
    }
    let (w, h) = features.dims();
    let n = w * h;
    let nb = model.n_branches();
    let mut probs = vec![vec![0.0; n]; nb];
    let mut scores = vec![0.0; nb * n];
    let mut f = vec![0.0; model.k];
    for px in 0..n {
        features.pixel_into(px, &mut f);
        for b in 0..nb {
            probs[b][px] = sigmoid(model.branch_heads[b].eval(&f));
            scores[b * n + px] = model.score_head[b].eval(&f);
        }
    }
    Ok(ForwardOutput {
        probs: probs
            .into_iter()
            .map(|p| Grid::from_vec(w, h, p).expect("sized"))
            .collect(),
        raw_scores: ScoreMap::from_raw(nb, w, h, scores).expect("sized"),
    })
}

/// One training image with everything the losses need precomputed.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub features: FeatureStack,
    /// Pixel-major copy of `features`.
    feat_pm: Vec<f64>,
    pub pseudo: MaskGrid,
    pub gt: Option<MaskGrid>,
    pub relative_size: f64,
    /// 1-based branch picked by the size thresholds.
    pub branch: usize,
    pub alpha: f64,
}

impl TrainSample {
    pub fn new(
        id: impl Into<String>,
        image: &Grid<f64>,
        pseudo: MaskGrid,
        gt: Option<MaskGrid>,
        thresholds: &BranchThresholds,
        coe: f64,
    ) -> Self {
        let features = extract_features(image);
        let r = relative_size(&pseudo);
        if r == 0.0 {
            log::warn!("empty pseudo mask; coefficient clamps to coe");
        }
        Self {
            id: id.into(),
            feat_pm: features.pixel_major(),
            features,
            pseudo,
            gt,
            relative_size: r,
            branch: select_branch(r, thresholds),
            alpha: coefficient_alpha(r, coe),
        }
    }

    fn n(&self) -> usize {
        self.pseudo.len()
    }

    fn f(&self, px: usize) -> &[f64] {
        let k = self.features.k();
        &self.feat_pm[px * k..(px + 1) * k]
    }
}

/// Per-image segmentation-stage terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegTerms {
    pub l_sa: f64,
    pub branch: [f64; N_BRANCHES],
}

impl SegTerms {
    pub fn total(&self) -> f64 {
        self.l_sa + self.branch.iter().sum::<f64>()
    }
}

fn seg_terms_and_grad(model: &ToyModel, s: &TrainSample, size_aware: bool, grad: Option<&mut [f64]>) -> SegTerms {
    let n = s.n();
    let k = model.k;
    let boost = if size_aware { s.alpha - 1.0 } else { 0.0 };
    let mut terms = SegTerms {
        l_sa: 0.0,
        branch: [0.0; N_BRANCHES],
    };
    let mut grad = grad;
    let m = s.pseudo.as_slice();
    for px in 0..n {
        let f = s.f(px);
        let t = m[px];
        let coeff = if t > 0.0 { boost } else { 0.0 };
        for b in 0..N_BRANCHES {
            let z = model.branch_heads[b].eval(f);
            let p = sigmoid(z);
            let l = bce_pixel(p, t);
            terms.branch[b] += l;
            let mut g = p - t;
            if b + 1 == s.branch && size_aware {
                terms.l_sa += l * coeff;
                g *= 1.0 + coeff;
            }
            if let Some(gr) = grad.as_deref_mut() {
                let g = g / n as f64;
                let off = b * (k + 1);
                for (j, x) in f.iter().enumerate() {
                    gr[off + j] += g * x;
                }
                gr[off + k] += g;
            }
        }
    }
    terms.l_sa /= n as f64;
    for l in terms.branch.iter_mut() {
        *l /= n as f64;
    }
    terms
}

/// Mean `L_seg` over `samples` and, if requested, its gradient with respect to
/// the flattened branch parameters.
pub fn segmentation_loss(model: &ToyModel, samples: &[TrainSample], size_aware: bool) -> f64 {
    samples
        .iter()
        .map(|s| seg_terms_and_grad(model, s, size_aware, None).total())
        .sum::<f64>()
        / samples.len() as f64
}

pub fn segmentation_loss_grad(model: &ToyModel, samples: &[TrainSample], size_aware: bool) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; N_BRANCHES * (model.k + 1)];
    let mut total = 0.0;
    for s in samples {
        total += seg_terms_and_grad(model, s, size_aware, Some(&mut grad)).total();
    }
    let inv = 1.0 / samples.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (total * inv, grad)
}

/// Per-branch mean BCE against the pseudo mask (`l1, l2, l3`).
pub fn branch_losses(model: &ToyModel, s: &TrainSample) -> [f64; N_BRANCHES] {
    seg_terms_and_grad(model, s, false, None).branch
}

/// Score-stage target for one sample.
pub fn score_target(model: &ToyModel, s: &TrainSample, mode: GtScoreMode) -> usize {
    match mode {
        GtScoreMode::LowestLoss => gt_score(&branch_losses(model, s)).expect("finite losses").target(),
        GtScoreMode::SizeMatch => gt_score_size_match(s.branch, N_BRANCHES).target(),
    }
}

/// CWA score vector of one sample over `weights` (the pseudo mask in
/// training).
fn cwa_scores(model: &ToyModel, s: &TrainSample, weights: &[f64]) -> ScoreVector {
    let mut acc = [0.0; N_BRANCHES];
    let mut n_p = 0usize;
    for (px, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        n_p += 1;
        let f = s.f(px);
        let z: Vec<f64> = model.score_head.iter().map(|h| h.eval(f)).collect();
        for (a, p) in acc.iter_mut().zip(softmax(&z)) {
            *a += p * w;
        }
    }
    ScoreVector(acc.iter().map(|a| a / n_p.max(1) as f64).collect())
}

fn score_loss_and_grad_one(model: &ToyModel, s: &TrainSample, target: usize, grad: Option<&mut [f64]>) -> f64 {
    let weights = s.pseudo.as_slice();
    let n_p = s.pseudo.count_positive();
    if n_p == 0 {
        return 0.0;
    }
    let sv = cwa_scores(model, s, weights);
    let s_t = sv.0[target];
    let loss = -s_t.max(SCORE_EPS).ln();
    if let Some(gr) = grad {
        if s_t > SCORE_EPS {
            let k = model.k;
            let scale = -1.0 / (n_p as f64 * s_t);
            for (px, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                let f = s.f(px);
                let z: Vec<f64> = model.score_head.iter().map(|h| h.eval(f)).collect();
                let p = softmax(&z);
                for j in 0..N_BRANCHES {
                    let delta = if j == target { 1.0 } else { 0.0 };
                    let g = scale * w * p[target] * (delta - p[j]);
                    let off = j * (k + 1);
                    for (i, x) in f.iter().enumerate() {
                        gr[off + i] += g * x;
                    }
                    gr[off + k] += g;
                }
            }
        }
    }
    loss
}

/// Mean score loss for fixed per-sample targets (0-based).
pub fn score_stage_loss(model: &ToyModel, samples: &[TrainSample], targets: &[usize]) -> f64 {
    samples
        .iter()
        .zip(targets)
        .map(|(s, &t)| score_loss_and_grad_one(model, s, t, None))
        .sum::<f64>()
        / samples.len() as f64
}

pub fn score_stage_loss_grad(model: &ToyModel, samples: &[TrainSample], targets: &[usize]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; N_BRANCHES * (model.k + 1)];
    let mut total = 0.0;
    for (s, &t) in samples.iter().zip(targets) {
        total += score_loss_and_grad_one(model, s, t, Some(&mut grad));
    }
    let inv = 1.0 / samples.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (total * inv, grad)
}

/// Gradient-descent settings for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
}

fn descend(
    params: &mut [f64],
    cfg: &StageConfig,
    stage: &'static str,
    mut loss_grad: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    dump: impl Fn(&[f64]) -> String,
) -> Result<Vec<f64>, TrainError> {
    let mut velocity = vec![0.0; params.len()];
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, grad) = loss_grad(params);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::DivergenceDetected {
                stage,
                epoch,
                loss,
                state: dump(params),
            });
        }
        history.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v - cfg.lr * g;
            *p += *v;
        }
    }
    Ok(history)
}

/// Stage one: fits the branch heads. The history holds `L_seg` before the
/// first update and after every epoch.
pub fn train_segmentation_stage(
    model: &mut ToyModel,
    samples: &[TrainSample],
    cfg: &StageConfig,
    size_aware: bool,
) -> Result<Vec<f64>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = model.branch_params();
    let mut scratch = model.clone();
    let history = descend(
        &mut params,
        cfg,
        "segmentation stage",
        |p| {
            scratch.set_branch_params(p);
            segmentation_loss_grad(&scratch, samples, size_aware)
        },
        |p| {
            let mut m = model.clone();
            m.set_branch_params(p);
            m.dump()
        },
    )?;
    model.set_branch_params(&params);
    Ok(history)
}

/// Stage two: fits only the score head; branch heads are left untouched.
pub fn train_score_stage(
    model: &mut ToyModel,
    samples: &[TrainSample],
    cfg: &StageConfig,
    mode: GtScoreMode,
) -> Result<Vec<f64>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let targets: Vec<usize> = samples.iter().map(|s| score_target(model, s, mode)).collect();
    let mut params = model.score_params();
    let mut scratch = model.clone();
    let history = descend(
        &mut params,
        cfg,
        "score stage",
        |p| {
            scratch.set_score_params(p);
            score_stage_loss_grad(&scratch, samples, &targets)
        },
        |p| {
            let mut m = model.clone();
            m.set_score_params(p);
            m.dump()
        },
    )?;
    model.set_score_params(&params);
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: MaskGrid,
    /// 1-based branch chosen by the score head.
    pub branch: usize,
    pub scores: ScoreVector,
}

/// Scores are averaged over the pixels the branches jointly predict as
/// foreground (mean probability above the threshold), or over the whole image
/// when that set is empty; the highest-scoring branch's thresholded output is
/// the prediction.
pub fn predict(model: &ToyModel, features: &FeatureStack) -> Result<Prediction, TrainError> {
    let out = forward(model, features)?;
    let n = features.n_pixels();
    let nb = model.n_branches();
    let mut support: Vec<f64> = (0..n)
        .map(|px| {
            let mean = out.probs.iter().map(|p| p.as_slice()[px]).sum::<f64>() / nb as f64;
            if mean > PREDICTION_THRESHOLD {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if support.iter().all(|&v| v == 0.0) {
        support.iter_mut().for_each(|v| *v = 1.0);
    }
    let mut acc = vec![0.0; nb];
    let mut logits = vec![0.0; nb];
    let mut n_p = 0usize;
    for px in 0..n {
        if support[px] == 0.0 {
            continue;
        }
        n_p += 1;
        for (b, l) in logits.iter_mut().enumerate() {
            *l = out.raw_scores.value(b, px);
        }
        for (a, p) in acc.iter_mut().zip(softmax(&logits)) {
            *a += p;
        }
    }
    let scores = ScoreVector(acc.iter().map(|a| a / n_p as f64).collect());
    let branch = infer_branch(&scores);
    let mask = out.probs[branch - 1].map(|&p| if p > PREDICTION_THRESHOLD { 1.0 } else { 0.0 });
    Ok(Prediction { mask, branch, scores })
}

// ── End-to-end runs ──────────────────────────────────────────────────────────

/// A loaded image with its pseudo mask and optional ground truth.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub image: Grid<f64>,
    pub pseudo: MaskGrid,
    pub gt: Option<MaskGrid>,
    pub split: Split,
}

fn union_mask(masks: Vec<(crate::multi_category::CategoryId, MaskGrid)>, w: usize, h: usize) -> MaskGrid {
    let mut out = Grid::filled(w, h, 0.0f64);
    for (_, m) in masks {
        for (a, v) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *a = a.max(*v);
        }
    }
    out
}

/// Builds labelled images from a synthetic corpus; the first `n_train` are
/// the training split.
pub fn synthetic_dataset(spec: &SyntheticSpec, n_train: usize, sigma: SigmaSpec, op: MaskOp) -> Vec<LabeledImage> {
    generate_corpus(spec)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let masks = s.doc.category_masks(sigma, op, 0.0).expect("synthetic annotations are valid");
            LabeledImage {
                pseudo: union_mask(masks, spec.width, spec.height),
                id: s.id,
                image: s.image,
                gt: Some(s.gt),
                split: if i < n_train { Split::Train } else { Split::Test },
            }
        })
        .collect()
}

/// Loads every manifest item; all categories are merged into one foreground.
pub fn load_manifest_dataset(manifest_path: &Path, sigma: SigmaSpec, op: MaskOp) -> Result<Vec<LabeledImage>, TrainError> {
    let (manifest, base) = DatasetManifest::load(manifest_path)?;
    let mut out = Vec::new();
    for item in &manifest.items {
        let wrap = |source| ManifestError::Annotation {
            image_ref: item.image_ref.clone(),
            source,
        };
        let doc = dataset_io::load_annotation(&base.join(&item.annotation_ref)).map_err(wrap)?;
        let image = dataset_io::read_image(&base.join(&item.image_ref)).map_err(ManifestError::from)?;
        if image.dims() != (doc.width as usize, doc.height as usize) {
            return Err(TrainError::Config(format!(
                "{}: image is {}×{}, annotation says {}×{}",
                item.image_ref,
                image.width(),
                image.height(),
                doc.width,
                doc.height
            )));
        }
        let masks = doc.category_masks(sigma, op, 0.0).map_err(wrap)?;
        let gt = item
            .gt_mask_ref
            .as_ref()
            .map(|g| dataset_io::read_mask(&base.join(g)))
            .transpose()
            .map_err(ManifestError::from)?;
        out.push(LabeledImage {
            id: item.image_ref.clone(),
            pseudo: union_mask(masks, image.width(), image.height()),
            image,
            gt,
            split: item.split,
        });
    }
    Ok(out)
}

/// Full two-stage run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    pub segmentation: StageConfig,
    pub score: StageConfig,
    #[serde(default = "default_coe")]
    pub coe: f64,
    /// When false the size-aware term is dropped (plain three-branch BCE).
    #[serde(default = "default_true")]
    pub size_aware: bool,
    #[serde(default)]
    pub gt_mode: GtScoreMode,
    /// Fixed thresholds; calibrated on the training split when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<BranchThresholds>,
    #[serde(default = "default_sigma")]
    pub sigma_ratio: SigmaSpec,
    #[serde(default = "default_op")]
    pub op: MaskOp,
}

fn default_coe() -> f64 {
    crate::size_branching::DEFAULT_COE
}
fn default_true() -> bool {
    true
}
fn default_sigma() -> SigmaSpec {
    SigmaSpec::INFINITE
}
fn default_op() -> MaskOp {
    MaskOp::Multiply
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            segmentation: StageConfig {
                lr: 2.0,
                momentum: 0.9,
                epochs: 300,
            },
            score: StageConfig {
                lr: 2.0,
                momentum: 0.9,
                epochs: 300,
            },
            coe: default_coe(),
            size_aware: true,
            gt_mode: GtScoreMode::LowestLoss,
            thresholds: None,
            sigma_ratio: SigmaSpec::INFINITE,
            op: MaskOp::Multiply,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestImageReport {
    pub id: String,
    pub chosen_branch: usize,
    /// Branch with the lowest BCE against the pseudo mask.
    pub best_branch: usize,
    pub scores: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub thresholds: BranchThresholds,
    pub train_count: usize,
    pub test_count: usize,
    pub train_branch_counts: [usize; N_BRANCHES],
    pub segmentation_history: Vec<f64>,
    pub score_history: Vec<f64>,
    /// Test-split mean Dice against ground truth, when every test image has it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_mdice: Option<f64>,
    pub test_branch_counts: [usize; N_BRANCHES],
    /// Fraction of test images where the chosen branch is the lowest-loss one.
    pub branch_agreement: f64,
    pub per_image: Vec<TestImageReport>,
}

fn to_samples(images: &[&LabeledImage], thr: &BranchThresholds, coe: f64) -> Vec<TrainSample> {
    images
        .iter()
        .map(|im| TrainSample::new(im.id.clone(), &im.image, im.pseudo.clone(), im.gt.clone(), thr, coe))
        .collect()
}

/// Calibrates (if needed), runs both stages and evaluates on the test split.
pub fn run_two_stage(config: &TrainConfig, data: &[LabeledImage]) -> Result<(ToyModel, TrainReport), TrainError> {
    if !(config.coe >= 1.0) {
        return Err(TrainError::Config(format!("coe must be ≥ 1 (got {})", config.coe)));
    }
    let train: Vec<&LabeledImage> = data.iter().filter(|d| d.split == Split::Train).collect();
    let test: Vec<&LabeledImage> = data.iter().filter(|d| d.split != Split::Train).collect();
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let thresholds = match config.thresholds {
        Some(t) => t,
        None => {
            let sizes: Vec<f64> = train.iter().map(|d| relative_size(&d.pseudo)).collect();
            calibrate_thresholds(&sizes)?
        }
    };
    let train_samples = to_samples(&train, &thresholds, config.coe);
    let test_samples = to_samples(&test, &thresholds, config.coe);
    let mut train_branch_counts = [0; N_BRANCHES];
    for s in &train_samples {
        train_branch_counts[s.branch - 1] += 1;
    }

    let mut model = ToyModel::init(N_FEATURES, N_BRANCHES, config.seed);
    let segmentation_history =
        train_segmentation_stage(&mut model, &train_samples, &config.segmentation, config.size_aware)?;
    let score_history = train_score_stage(&mut model, &train_samples, &config.score, config.gt_mode)?;

    let mut per_image = Vec::with_capacity(test_samples.len());
    let mut test_branch_counts = [0; N_BRANCHES];
    let mut agree = 0usize;
    for s in &test_samples {
        let pred = predict(&model, &s.features)?;
        let best = gt_score(&branch_losses(&model, s)).expect("finite").target() + 1;
        test_branch_counts[pred.branch - 1] += 1;
        agree += (pred.branch == best) as usize;
        let dice = s
            .gt
            .as_ref()
            .map(|g| dice_coefficient(&pred.mask, g).expect("same dims"));
        per_image.push(TestImageReport {
            id: s.id.clone(),
            chosen_branch: pred.branch,
            best_branch: best,
            scores: pred.scores.0,
            dice,
        });
    }
    let test_mdice = (!per_image.is_empty() && per_image.iter().all(|r| r.dice.is_some()))
        .then(|| per_image.iter().map(|r| r.dice.unwrap()).sum::<f64>() / per_image.len() as f64);
    let report = TrainReport {
        thresholds,
        train_count: train_samples.len(),
        test_count: test_samples.len(),
        train_branch_counts,
        segmentation_history,
        score_history,
        test_mdice,
        test_branch_counts,
        branch_agreement: if per_image.is_empty() {
            0.0
        } else {
            agree as f64 / per_image.len() as f64
        },
        per_image,
    };
    Ok((model, report))
}

/// Probability clamp shared with the losses, re-exported for gradient checks.
pub const PROBABILITY_CLAMP: f64 = PROB_EPS;
