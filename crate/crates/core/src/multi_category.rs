//! Merging per-category pseudo masks into one non-overlapping label map.
//!
//! Overlaps are resolved pairwise: a category whose positive set lies entirely
//! inside another's keeps the shared pixels (ring case); otherwise the larger
//! category wins, and equal sizes go to the lower id. Pixels claimed by three
//! or more categories are settled by folding the pairwise rule over the
//! claimants in descending area order.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DimensionMismatch, Grid, MaskGrid};

/// Per-pixel category index; 0 is background.
pub type LabelMap = Grid<u8>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CombineError {
    #[error(transparent)]
    DimensionMismatch(#[from] DimensionMismatch),
    #[error("category {0} appears more than once")]
    DuplicateCategory(CategoryId),
    #[error("category id must be at least 1 (0 is background)")]
    InvalidCategory,
}

/// Foreground category id (≥ 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct CategoryId(u8);

impl CategoryId {
    pub fn new(id: u8) -> Result<Self, CombineError> {
        if id == 0 {
            Err(CombineError::InvalidCategory)
        } else {
            Ok(Self(id))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for CategoryId {
    type Error = CombineError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        CategoryId::new(v)
    }
}

impl From<CategoryId> for u8 {
    fn from(c: CategoryId) -> u8 {
        c.0
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// True iff every positive pixel of `inner` is also positive in `outer`.
pub fn containment(inner: &MaskGrid, outer: &MaskGrid) -> Result<bool, CombineError> {
    inner.check_same_dims(outer)?;
    Ok(inner
        .as_slice()
        .iter()
        .zip(outer.as_slice())
        .all(|(&i, &o)| i <= 0.0 || o > 0.0))
}

struct Candidate<'a> {
    id: CategoryId,
    mask: &'a MaskGrid,
    area: usize,
}

pub fn combine_pseudo_masks(masks: &[(CategoryId, MaskGrid)]) -> Result<LabelMap, CombineError> {
    let Some((_, first)) = masks.first() else {
        return Ok(Grid::filled(0, 0, 0));
    };
    let mut seen = BTreeSet::new();
    for (id, mask) in masks {
        first.check_same_dims(mask)?;
        if !seen.insert(*id) {
            return Err(CombineError::DuplicateCategory(*id));
        }
    }

    let mut cands: Vec<Candidate> = masks
        .iter()
        .map(|(id, mask)| Candidate {
            id: *id,
            mask,
            area: mask.count_positive(),
        })
        .collect();
    cands.sort_by(|a, b| b.area.cmp(&a.area).then(a.id.cmp(&b.id)));

    // beats[i][j]: candidate i takes a pixel shared with candidate j.
    let n = cands.len();
    let mut inside = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                inside[i][j] = containment(cands[i].mask, cands[j].mask)?;
            }
        }
    }
    let beats = |i: usize, j: usize| -> bool {
        match (inside[i][j], inside[j][i]) {
            (true, false) => true,
            (false, true) => false,
            _ => (cands[i].area, std::cmp::Reverse(cands[i].id)) > (cands[j].area, std::cmp::Reverse(cands[j].id)),
        }
    };

    let (width, height) = first.dims();
    let mut labels = Grid::filled(width, height, 0u8);
    for (px, label) in labels.as_mut_slice().iter_mut().enumerate() {
        let mut winner: Option<usize> = None;
        for (k, cand) in cands.iter().enumerate() {
            if cand.mask.as_slice()[px] <= 0.0 {
                continue;
            }
            winner = match winner {
                Some(w) if !beats(k, w) => Some(w),
                _ => Some(k),
            };
        }
        if let Some(w) = winner {
            *label = cands[w].id.get();
        }
    }
    Ok(labels)
}
