//! Per-pixel losses and evaluation metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DimensionMismatch, Grid, MaskGrid};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` inside logs.
pub const PROB_EPS: f64 = 1e-7;
/// Smoothing term of the Dice loss.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    DimensionMismatch(#[from] DimensionMismatch),
    #[error("no labelled pixels")]
    NoLabels,
    #[error("labelled pixel ({0}, {1}) lies outside the grid")]
    LabelOutOfBounds(usize, usize),
    #[error("empty list of prediction/ground-truth pairs")]
    EmptyList,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    None,
    Mean,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy of one pixel.
pub fn bce_pixel(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Unreduced binary cross entropy (`L′`). Soft targets are allowed.
pub fn bce(pred: &MaskGrid, target: &MaskGrid) -> Result<Grid<f64>, LossError> {
    pred.check_same_dims(target)?;
    let data = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &t)| bce_pixel(p, t))
        .collect();
    Ok(Grid::from_vec(pred.width(), pred.height(), data).expect("same length"))
}

pub fn bce_mean(pred: &MaskGrid, target: &MaskGrid) -> Result<f64, LossError> {
    Ok(mean(&bce(pred, target)?))
}

pub fn bce_reduced(pred: &MaskGrid, target: &MaskGrid, reduction: Reduction) -> Result<BceOutput, LossError> {
    let grid = bce(pred, target)?;
    Ok(match reduction {
        Reduction::None => BceOutput::Grid(grid),
        Reduction::Mean => BceOutput::Scalar(mean(&grid)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum BceOutput {
    Grid(Grid<f64>),
    Scalar(f64),
}

fn mean(grid: &Grid<f64>) -> f64 {
    if grid.is_empty() {
        0.0
    } else {
        grid.as_slice().iter().sum::<f64>() / grid.len() as f64
    }
}

/// d BCE(σ(z), t) / dz = σ(z) − t, per pixel.
pub fn bce_grad_logit(logits: &Grid<f64>, target: &MaskGrid) -> Result<Grid<f64>, LossError> {
    logits.check_same_dims(target)?;
    let data = logits
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&z, &t)| sigmoid(z) - t)
        .collect();
    Ok(Grid::from_vec(logits.width(), logits.height(), data).expect("same length"))
}

/// A sparse scribble label: pixel `(x, y)` and its binary target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelLabel {
    pub x: usize,
    pub y: usize,
    pub target: f64,
}

/// Mean BCE over the labelled pixels only.
pub fn partial_ce(pred: &MaskGrid, labels: &[PixelLabel]) -> Result<f64, LossError> {
    if labels.is_empty() {
        return Err(LossError::NoLabels);
    }
    let mut total = 0.0;
    for l in labels {
        let p = pred.get(l.x, l.y).ok_or(LossError::LabelOutOfBounds(l.x, l.y))?;
        total += bce_pixel(*p, l.target);
    }
    Ok(total / labels.len() as f64)
}

/// `1 − (2 Σ p·t + ε) / (Σ p + Σ t + ε)`.
pub fn dice_loss(pred: &MaskGrid, target: &MaskGrid) -> Result<f64, LossError> {
    pred.check_same_dims(target)?;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.as_slice().iter().zip(target.as_slice()) {
        inter += p * t;
        sp += p;
        st += t;
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS))
}

/// Dice overlap of two binary masks (`> 0` is foreground). Two empty masks
/// score 1.
pub fn dice_coefficient(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64, LossError> {
    pred.check_same_dims(gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        let (p, g) = (p > 0.0, g > 0.0);
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    Ok(if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    })
}

/// Mean Dice over image pairs.
pub fn mdice(pairs: &[(&MaskGrid, &MaskGrid)]) -> Result<f64, LossError> {
    if pairs.is_empty() {
        return Err(LossError::EmptyList);
    }
    let mut total = 0.0;
    for (p, g) in pairs {
        total += dice_coefficient(p, g)?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDice {
    pub id: String,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageDice>,
    pub mdice: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn from_named_pairs<'a>(
        pairs: impl IntoIterator<Item = (String, &'a MaskGrid, &'a MaskGrid)>,
    ) -> Result<Self, LossError> {
        let mut per_image = Vec::new();
        for (id, p, g) in pairs {
            per_image.push(ImageDice {
                id,
                dice: dice_coefficient(p, g)?,
            });
        }
        if per_image.is_empty() {
            return Err(LossError::EmptyList);
        }
        let mdice = per_image.iter().map(|d| d.dice).sum::<f64>() / per_image.len() as f64;
        Ok(Self {
            count: per_image.len(),
            per_image,
            mdice,
        })
    }
}
