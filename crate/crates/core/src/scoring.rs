//! Score-stage machinery: per-pixel score normalisation, the channel-wise
//! weighted average (CWA), ground-truth score generation, the score loss and
//! the inference-time branch choice.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DimensionMismatch, MaskGrid};
use crate::multi_category::LabelMap;

/// Clamp applied to the target component before taking its log.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    #[error("score map contains a non-finite value")]
    NonFiniteInput,
    #[error("pseudo mask has no positive pixels")]
    EmptyPseudoMask,
    #[error("non-finite branch loss")]
    NonFiniteLoss,
    #[error("expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("score vector is empty")]
    EmptyVector,
    #[error(transparent)]
    DimensionMismatch(#[from] DimensionMismatch),
}

/// `channels × height × width` scores, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl ScoreMap {
    /// Raw (unnormalised) scores. `data` is channel-major.
    pub fn from_raw(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == channels * width * height).then_some(Self {
            channels,
            width,
            height,
            data,
            normalized: false,
        })
    }

    pub fn from_channels(width: usize, height: usize, channels: Vec<Vec<f64>>) -> Option<Self> {
        let n = channels.len();
        if channels.iter().any(|c| c.len() != width * height) {
            return None;
        }
        Self::from_raw(n, width, height, channels.concat())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn value(&self, c: usize, px: usize) -> f64 {
        self.data[c * self.width * self.height + px]
    }

    fn check_mask<T>(&self, mask: &crate::grid::Grid<T>) -> Result<(), DimensionMismatch> {
        if mask.dims() == self.dims() {
            Ok(())
        } else {
            Err(DimensionMismatch {
                expected: self.dims(),
                found: mask.dims(),
            })
        }
    }
}

/// Numerically stable softmax of one vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over the channels at every pixel.
pub fn normalize_scores(raw: &ScoreMap) -> Result<ScoreMap, ScoringError> {
    normalize_score_blocks(raw, raw.channels)
}

/// Softmax within consecutive blocks of `block` channels at every pixel
/// (one block per category in the multi-category layout).
pub fn normalize_score_blocks(raw: &ScoreMap, block: usize) -> Result<ScoreMap, ScoringError> {
    if block == 0 || raw.channels % block != 0 {
        return Err(ScoringError::ChannelMismatch {
            expected: block,
            found: raw.channels,
        });
    }
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(ScoringError::NonFiniteInput);
    }
    let n = raw.width * raw.height;
    let mut data = vec![0.0; raw.data.len()];
    let mut logits = vec![0.0; block];
    for start in (0..raw.channels).step_by(block) {
        for px in 0..n {
            for (k, l) in logits.iter_mut().enumerate() {
                *l = raw.data[(start + k) * n + px];
            }
            for (k, p) in softmax(&logits).into_iter().enumerate() {
                data[(start + k) * n + px] = p;
            }
        }
    }
    Ok(ScoreMap {
        data,
        normalized: true,
        ..*raw
    })
}

/// Per-branch confidence vector `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(pub Vec<f64>);

/// One-hot target `s^g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GtScore(Vec<f64>);

impl GtScore {
    pub fn one_hot(index0: usize, n: usize) -> Self {
        let mut v = vec![0.0; n];
        v[index0] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// 0-based index of the hot component.
    pub fn target(&self) -> usize {
        self.0.iter().position(|&v| v == 1.0).expect("one-hot")
    }
}

/// `s_i = Σ S′_i · M / N_p` over the pseudo mask.
pub fn channel_weighted_average(scores: &ScoreMap, pseudo: &MaskGrid) -> Result<ScoreVector, ScoringError> {
    scores.check_mask(pseudo)?;
    let n_p = pseudo.count_positive();
    if n_p == 0 {
        return Err(ScoringError::EmptyPseudoMask);
    }
    let m = pseudo.as_slice();
    let s = (0..scores.channels)
        .map(|c| {
            let total: f64 = scores
                .channel(c)
                .iter()
                .zip(m)
                .filter(|(_, &w)| w > 0.0)
                .map(|(s, w)| s * w)
                .sum();
            total / n_p as f64
        })
        .collect();
    Ok(ScoreVector(s))
}

/// How the score-stage target is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtScoreMode {
    /// The branch with the lowest segmentation loss.
    #[default]
    LowestLoss,
    /// The branch the size thresholds assign to the image.
    SizeMatch,
}

/// One-hot on the branch with the lowest loss; ties go to the lowest index.
pub fn gt_score(losses: &[f64]) -> Result<GtScore, ScoringError> {
    if losses.is_empty() {
        return Err(ScoringError::EmptyVector);
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(ScoringError::NonFiniteLoss);
    }
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(GtScore::one_hot(best, losses.len()))
}

/// Target for [`GtScoreMode::SizeMatch`]: the 1-based selected branch.
pub fn gt_score_size_match(selected_branch: usize, n_branches: usize) -> GtScore {
    GtScore::one_hot(selected_branch - 1, n_branches)
}

/// Cross entropy `−Σ s^g_i · ln s_i`, with `s_i` clamped to at least
/// [`SCORE_EPS`].
pub fn score_loss(s_g: &GtScore, s: &ScoreVector) -> f64 {
    s_g.0
        .iter()
        .zip(&s.0)
        .filter(|(&g, _)| g != 0.0)
        .map(|(g, &v)| -g * v.max(SCORE_EPS).ln())
        .sum()
}

/// 1-based index of the highest score; ties go to the lowest index.
pub fn infer_branch(s: &ScoreVector) -> usize {
    let mut best = 0;
    for (i, &v) in s.0.iter().enumerate() {
        if v > s.0[best] {
            best = i;
        }
    }
    best + 1
}

/// Branch × foreground-category score matrix. Column `k` belongs to category
/// `k + 1`; `None` marks a category absent from the label map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub n_branches: usize,
    pub columns: Vec<Option<Vec<f64>>>,
}

/// CWA per foreground category using that category's block of `n_branches`
/// channels (`channel = category · n_branches + branch`). The background block
/// is ignored.
pub fn multiclass_score_matrix(
    scores: &ScoreMap,
    combined: &LabelMap,
    n_branches: usize,
    n_categories: usize,
) -> Result<ScoreMatrix, ScoringError> {
    if scores.channels != n_branches * n_categories {
        return Err(ScoringError::ChannelMismatch {
            expected: n_branches * n_categories,
            found: scores.channels,
        });
    }
    scores.check_mask(combined)?;
    let labels = combined.as_slice();
    let columns = (1..n_categories)
        .map(|cat| {
            let support: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l as usize == cat)
                .map(|(px, _)| px)
                .collect();
            if support.is_empty() {
                return None;
            }
            let col = (0..n_branches)
                .map(|b| {
                    let ch = cat * n_branches + b;
                    support.iter().map(|&px| scores.value(ch, px)).sum::<f64>() / support.len() as f64
                })
                .collect();
            Some(col)
        })
        .collect();
    Ok(ScoreMatrix { n_branches, columns })
}

/// Per-image score summary written by the training tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub image_id: String,
    pub s: Vec<f64>,
    pub chosen_branch: usize,
    pub s_g: Vec<f64>,
    pub score_loss: f64,
}
