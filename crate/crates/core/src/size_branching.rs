//! Relative target size, branch thresholds and the size-aware loss.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DimensionMismatch, Grid, MaskGrid};
use crate::multi_category::CategoryId;

/// Upper limit on the coefficient value used by default.
pub const DEFAULT_COE: f64 = 10.0;
/// Number of size-specialised branches.
pub const N_BRANCHES: usize = 3;

#[derive(Debug, Error)]
pub enum SizeError {
    #[error("thresholds must satisfy 0 < thr1 < thr2 < 1 (got {thr1}, {thr2})")]
    InvalidThresholds { thr1: f64, thr2: f64 },
    #[error("need at least 3 distinct non-zero sizes to calibrate (got {distinct})")]
    InsufficientData { distinct: usize },
    #[error("coe must be ≥ 1 (got {0})")]
    InvalidCoe(f64),
    #[error("non-finite or negative loss value {0}")]
    NonFiniteLoss(f64),
    #[error(transparent)]
    DimensionMismatch(#[from] DimensionMismatch),
    #[error("threshold file: {0}")]
    Io(#[from] std::io::Error),
    #[error("threshold file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Size boundaries between the small/medium/large branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds")]
pub struct BranchThresholds {
    thr1: f64,
    thr2: f64,
}

#[derive(Deserialize)]
struct RawThresholds {
    thr1: f64,
    thr2: f64,
}

impl TryFrom<RawThresholds> for BranchThresholds {
    type Error = SizeError;
    fn try_from(r: RawThresholds) -> Result<Self, Self::Error> {
        BranchThresholds::new(r.thr1, r.thr2)
    }
}

impl BranchThresholds {
    /// Thresholds reported for the combined polyp training set.
    pub const POLYP: BranchThresholds = BranchThresholds { thr1: 0.078, thr2: 0.177 };

    pub fn new(thr1: f64, thr2: f64) -> Result<Self, SizeError> {
        if 0.0 < thr1 && thr1 < thr2 && thr2 < 1.0 {
            Ok(Self { thr1, thr2 })
        } else {
            Err(SizeError::InvalidThresholds { thr1, thr2 })
        }
    }

    pub fn thr1(&self) -> f64 {
        self.thr1
    }

    pub fn thr2(&self) -> f64 {
        self.thr2
    }
}

/// Knobs of the size-aware loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeAwareConfig {
    pub coe: f64,
    pub n_branches: usize,
}

impl Default for SizeAwareConfig {
    fn default() -> Self {
        Self {
            coe: DEFAULT_COE,
            n_branches: N_BRANCHES,
        }
    }
}

impl SizeAwareConfig {
    pub fn validate(&self) -> Result<(), SizeError> {
        if !(self.coe >= 1.0) || !self.coe.is_finite() {
            return Err(SizeError::InvalidCoe(self.coe));
        }
        Ok(())
    }
}

/// Fraction of strictly positive pixels, `N_p / N`.
pub fn relative_size(mask: &MaskGrid) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.count_positive() as f64 / mask.len() as f64
}

/// 1-based branch index: 1 for `r ≤ thr1`, 2 for `thr1 < r ≤ thr2`, else 3.
pub fn select_branch(r_z: f64, thr: &BranchThresholds) -> usize {
    if r_z <= thr.thr1 {
        1
    } else if r_z <= thr.thr2 {
        2
    } else {
        3
    }
}

/// Picks thresholds that split the non-zero sizes into three equally
/// populated groups. With `m` sorted values, the boundaries are the values at
/// 1-based ranks `⌊m/3⌋` and `⌊2m/3⌋`.
pub fn calibrate_thresholds(sizes: &[f64]) -> Result<BranchThresholds, SizeError> {
    let mut nonzero: Vec<f64> = sizes.iter().copied().filter(|&s| s > 0.0).collect();
    nonzero.sort_by(f64::total_cmp);
    let mut distinct = nonzero.clone();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(SizeError::InsufficientData { distinct: distinct.len() });
    }
    let m = nonzero.len();
    let thr1 = nonzero[m / 3 - 1];
    let thr2 = nonzero[2 * m / 3 - 1];
    BranchThresholds::new(thr1, thr2).map_err(|_| SizeError::InsufficientData { distinct: distinct.len() })
}

/// `α = min(1 / r_z, coe)`; an empty mask clamps to `coe`.
pub fn coefficient_alpha(r_z: f64, coe: f64) -> f64 {
    if r_z <= 0.0 {
        coe
    } else {
        (1.0 / r_z).min(coe)
    }
}

/// `α − 1` on the pseudo-mask support, 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMask(Grid<f64>);

impl CoefficientMask {
    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn scaled(&self, k: f64) -> CoefficientMask {
        CoefficientMask(self.0.map(|&v| v * k))
    }
}

pub fn coefficient_mask(pseudo: &MaskGrid, alpha: f64) -> CoefficientMask {
    let boost = alpha - 1.0;
    CoefficientMask(pseudo.map(|&w| if w > 0.0 { boost } else { 0.0 }))
}

/// `Σ L′ · Mᶜ / N`.
pub fn size_aware_loss(loss_grid: &Grid<f64>, coeff: &CoefficientMask) -> Result<f64, SizeError> {
    loss_grid.check_same_dims(&coeff.0)?;
    if loss_grid.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = loss_grid
        .as_slice()
        .iter()
        .zip(coeff.0.as_slice())
        .map(|(l, c)| l * c)
        .sum();
    Ok(total / loss_grid.len() as f64)
}

/// `l_sa + Σ l_b` over the branch losses.
pub fn segmentation_total_loss(l_sa: f64, branch_losses: &[f64]) -> Result<f64, SizeError> {
    let mut total = l_sa;
    for &l in std::iter::once(&l_sa).chain(branch_losses) {
        if !l.is_finite() || l < 0.0 {
            return Err(SizeError::NonFiniteLoss(l));
        }
    }
    for &l in branch_losses {
        total += l;
    }
    Ok(total)
}

/// Per-category thresholds, persisted as `{"<category>": {"thr1": .., "thr2": ..}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThresholdTable(pub BTreeMap<CategoryId, BranchThresholds>);

impl ThresholdTable {
    pub fn get(&self, category: CategoryId) -> Option<&BranchThresholds> {
        self.0.get(&category)
    }

    pub fn load(path: &Path) -> Result<Self, SizeError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("threshold table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent tertile split: sort, then count how many values each
    /// candidate threshold pair sends to every branch.
    fn populations(sizes: &[f64], thr: &BranchThresholds) -> [usize; 3] {
        let mut counts = [0; 3];
        for &s in sizes.iter().filter(|&&s| s > 0.0) {
            let b = if s <= thr.thr1() {
                0
            } else if s <= thr.thr2() {
                1
            } else {
                2
            };
            counts[b] += 1;
        }
        counts
    }

    #[test]
    fn relative_size_counts_positive() {
        let mut m = Grid::filled(10, 10, 0.0);
        for i in 0..5 {
            m[(i, 3)] = 0.2;
        }
        assert_eq!(relative_size(&m), 0.05);
        assert_eq!(relative_size(&Grid::filled(4, 4, 1.0)), 1.0);
        assert_eq!(relative_size(&Grid::filled(4, 4, 0.0)), 0.0);
    }

    #[test]
    fn branch_selection_with_polyp_thresholds() {
        let thr = BranchThresholds::POLYP;
        assert_eq!(select_branch(0.05, &thr), 1);
        assert_eq!(select_branch(0.1, &thr), 2);
        assert_eq!(select_branch(0.2, &thr), 3);
        assert_eq!(select_branch(0.078, &thr), 1);
        assert_eq!(select_branch(0.177, &thr), 2);
    }

    #[test]
    fn threshold_validation() {
        assert!(BranchThresholds::new(0.2, 0.1).is_err());
        assert!(BranchThresholds::new(0.0, 0.1).is_err());
        assert!(BranchThresholds::new(0.1, 1.0).is_err());
        assert!(serde_json::from_str::<BranchThresholds>(r#"{"thr1":0.5,"thr2":0.4}"#).is_err());
    }

    #[test]
    fn calibration_on_deciles() {
        let sizes: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let thr = calibrate_thresholds(&sizes).unwrap();
        assert_eq!((thr.thr1(), thr.thr2()), (0.3, 0.6));
        let mut with_zeros = vec![0.0, 0.0];
        with_zeros.extend(&sizes);
        assert_eq!(calibrate_thresholds(&with_zeros).unwrap(), thr);
    }

    #[test]
    fn calibration_reproduces_polyp_thresholds() {
        let sizes = [0.01, 0.05, 0.078, 0.09, 0.12, 0.177, 0.2, 0.35, 0.6];
        assert_eq!(calibrate_thresholds(&sizes).unwrap(), BranchThresholds::POLYP);
    }

    #[test]
    fn calibration_balances_populations() {
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let sizes: Vec<f64> = (0..999).map(|_| rng.random_range(0.001..0.999)).collect();
        let thr = calibrate_thresholds(&sizes).unwrap();
        assert_eq!(populations(&sizes, &thr), [333, 333, 333]);
    }

    #[test]
    fn calibration_needs_distinct_sizes() {
        assert!(matches!(
            calibrate_thresholds(&[0.2; 12]),
            Err(SizeError::InsufficientData { distinct: 1 })
        ));
        assert!(matches!(
            calibrate_thresholds(&[0.0, 0.1, 0.2]),
            Err(SizeError::InsufficientData { .. })
        ));
        // three distinct values but heavily tied: the tertile ranks collide
        assert!(matches!(
            calibrate_thresholds(&[0.1, 0.2, 0.2, 0.2, 0.2, 0.2, 0.3]),
            Err(SizeError::InsufficientData { .. })
        ));
    }

    #[test]
    fn alpha_clamps() {
        assert_eq!(coefficient_alpha(0.05, 10.0), 10.0);
        assert_eq!(coefficient_alpha(0.5, 10.0), 2.0);
        assert_eq!(coefficient_alpha(0.0, 10.0), 10.0);
        for r in [0.01, 0.3, 1.0] {
            assert_eq!(coefficient_alpha(r, 1.0), 1.0);
        }
    }

    #[test]
    fn coefficient_mask_support() {
        let mut m = Grid::filled(5, 5, 0.0);
        for i in 0..5 {
            m[(i, i)] = 0.3 + 0.1 * i as f64;
        }
        let c = coefficient_mask(&m, 10.0);
        assert_eq!(c.grid().as_slice().iter().filter(|&&v| v == 9.0).count(), 5);
        assert_eq!(c.grid().count_positive(), m.count_positive());
        assert!(coefficient_mask(&m, 1.0).grid().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn size_aware_loss_arithmetic() {
        let loss = Grid::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let coeff = CoefficientMask(Grid::from_vec(2, 2, vec![9.0, 0.0, 0.0, 9.0]).unwrap());
        assert_eq!(size_aware_loss(&loss, &coeff).unwrap(), 11.25);
        assert_eq!(size_aware_loss(&loss, &coeff.scaled(3.0)).unwrap(), 33.75);
        let zero = CoefficientMask(Grid::filled(2, 2, 0.0));
        assert_eq!(size_aware_loss(&loss, &zero).unwrap(), 0.0);
        let wrong = CoefficientMask(Grid::filled(3, 2, 0.0));
        assert!(matches!(size_aware_loss(&loss, &wrong), Err(SizeError::DimensionMismatch(_))));
    }

    #[test]
    fn total_loss() {
        assert_eq!(segmentation_total_loss(0.0, &[0.5, 0.25, 0.125]).unwrap(), 0.875);
        assert_eq!(segmentation_total_loss(0.0, &[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(segmentation_total_loss(f64::NAN, &[0.0, 0.0, 0.0]).is_err());
        assert!(segmentation_total_loss(0.0, &[0.0, f64::INFINITY, 0.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..5.0)).collect();
            let expected = ((v[0] + v[1]) + v[2]) + v[3];
            assert_eq!(segmentation_total_loss(v[0], &v[1..]).unwrap(), expected);
        }
    }

    #[test]
    fn threshold_table_json_layout() {
        let mut t = ThresholdTable::default();
        t.0.insert(CategoryId::new(1).unwrap(), BranchThresholds::new(0.3, 0.6).unwrap());
        t.0.insert(CategoryId::new(3).unwrap(), BranchThresholds::POLYP);
        let json = t.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["1"]["thr1"], 0.3);
        assert_eq!(v["3"]["thr2"], 0.177);
        let back: ThresholdTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn select_branch_monotone(a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let thr = BranchThresholds::POLYP;
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(select_branch(lo, &thr) <= select_branch(hi, &thr));
        }

        #[test]
        fn calibration_permutation_invariant(mut sizes in prop::collection::vec(0.0..1.0f64, 6..60), seed in any::<u64>()) {
            let a = calibrate_thresholds(&sizes).ok();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..sizes.len()).rev() {
                sizes.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(a, calibrate_thresholds(&sizes).ok());
        }

        #[test]
        fn alpha_bounds(r in 0.0..1.0f64, coe in 1.0..50.0f64) {
            let alpha = coefficient_alpha(r, coe);
            prop_assert!((1.0..=coe).contains(&alpha));
            prop_assert_eq!(alpha == coe, r <= 1.0 / coe);
        }

        #[test]
        fn size_aware_loss_non_negative(vals in prop::collection::vec((0.0..5.0f64, 0.0..1.0f64), 16), alpha in 1.0..10.0f64) {
            let loss = Grid::from_vec(4, 4, vals.iter().map(|v| v.0).collect()).unwrap();
            let mask = Grid::from_vec(4, 4, vals.iter().map(|v| if v.1 > 0.5 { v.1 } else { 0.0 }).collect()).unwrap();
            prop_assert!(size_aware_loss(&loss, &coefficient_mask(&mask, alpha)).unwrap() >= 0.0);
        }
    }
}
