//! Pseudo-mask generation from a cross scribble.
//!
//! The mask lives on the outer parallelogram of the cross. A pixel centre is
//! mapped into the (possibly skewed) arm frame spanned by `unit(D − O)` (x) and
//! `unit(A − O)` (y); inside the parallelogram its weight is the initial-mask
//! operator evaluated with σ picked per arm from the sign of each coordinate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CrossScribble, Point2};
use crate::grid::{DimensionMismatch, Grid, MaskGrid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PseudoMaskError {
    #[error("grid must be at least 1×1 (got {0}×{1})")]
    EmptyGrid(usize, usize),
    #[error("σ/r ratio must be positive (got {0})")]
    InvalidSigma(f64),
    #[error("unknown mask operator {0:?} (expected mul, add or max)")]
    UnknownOp(String),
    #[error("{0} has no pixels to normalise by")]
    EmptyMask(&'static str),
    #[error(transparent)]
    Dimensions(#[from] DimensionMismatch),
}

/// How the two per-axis Gaussians are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskOp {
    #[serde(rename = "mul", alias = "multiply")]
    Multiply,
    #[serde(rename = "add", alias = "addition")]
    Add,
    #[serde(rename = "max", alias = "maximum")]
    Max,
}

impl MaskOp {
    pub const ALL: [MaskOp; 3] = [MaskOp::Multiply, MaskOp::Add, MaskOp::Max];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskOp::Multiply => "mul",
            MaskOp::Add => "add",
            MaskOp::Max => "max",
        }
    }
}

impl fmt::Display for MaskOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskOp {
    type Err = PseudoMaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mul" | "multiply" => Ok(MaskOp::Multiply),
            "add" | "addition" => Ok(MaskOp::Add),
            "max" | "maximum" => Ok(MaskOp::Max),
            other => Err(PseudoMaskError::UnknownOp(other.to_string())),
        }
    }
}

/// σ as a multiple of the arm it applies to. `f64::INFINITY` yields a flat
/// (binary) mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SigmaRepr", into = "SigmaRepr")]
pub struct SigmaSpec {
    ratio: f64,
}

impl SigmaSpec {
    pub const INFINITE: SigmaSpec = SigmaSpec { ratio: f64::INFINITY };

    pub fn new(ratio: f64) -> Result<Self, PseudoMaskError> {
        if ratio > 0.0 && !ratio.is_nan() {
            Ok(Self { ratio })
        } else {
            Err(PseudoMaskError::InvalidSigma(ratio))
        }
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn is_infinite(&self) -> bool {
        self.ratio.is_infinite()
    }

    fn for_arm(&self, arm: f64) -> f64 {
        if self.is_infinite() {
            f64::INFINITY
        } else {
            self.ratio * arm
        }
    }
}

impl fmt::Display for SigmaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.ratio)
        }
    }
}

impl FromStr for SigmaSpec {
    type Err = PseudoMaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(Self::INFINITE);
        }
        let ratio = s.parse::<f64>().map_err(|_| PseudoMaskError::InvalidSigma(f64::NAN))?;
        Self::new(ratio)
    }
}

/// JSON has no infinity literal, so "inf" travels as a string.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SigmaRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<SigmaRepr> for SigmaSpec {
    type Error = PseudoMaskError;

    fn try_from(repr: SigmaRepr) -> Result<Self, Self::Error> {
        match repr {
            SigmaRepr::Number(r) => SigmaSpec::new(r),
            SigmaRepr::Text(s) => s.parse(),
        }
    }
}

impl From<SigmaSpec> for SigmaRepr {
    fn from(s: SigmaSpec) -> Self {
        if s.is_infinite() {
            SigmaRepr::Text("inf".into())
        } else {
            SigmaRepr::Number(s.ratio)
        }
    }
}

fn gaussian(v: f64, sigma: f64) -> f64 {
    if sigma.is_infinite() {
        1.0
    } else {
        (-(v * v) / (sigma * sigma)).exp()
    }
}

/// Initial-mask weight at arm-frame position `(x, y)`.
pub fn initial_weight(x: f64, y: f64, sigma_x: f64, sigma_y: f64, op: MaskOp) -> f64 {
    match op {
        MaskOp::Multiply => {
            if sigma_x.is_infinite() && sigma_y.is_infinite() {
                1.0
            } else {
                let qx = if sigma_x.is_infinite() { 0.0 } else { x * x / (sigma_x * sigma_x) };
                let qy = if sigma_y.is_infinite() { 0.0 } else { y * y / (sigma_y * sigma_y) };
                (-(qx + qy)).exp()
            }
        }
        MaskOp::Add => (gaussian(x, sigma_x) + gaussian(y, sigma_y)) / 2.0,
        MaskOp::Max => gaussian(x, sigma_x).max(gaussian(y, sigma_y)),
    }
}

/// Image-frame to arm-frame mapping for one cross.
#[derive(Debug, Clone, Copy)]
pub struct ArmFrame {
    origin: Point2,
    x_axis: Point2,
    y_axis: Point2,
    det: f64,
}

impl ArmFrame {
    /// The y-axis points along the cross's target direction; the x-axis keeps
    /// the original angle between the two segments.
    pub fn new(cross: &CrossScribble) -> Self {
        let oa = cross.axis_a();
        let od = cross.axis_d();
        let rotation = cross.direction.cross(oa).atan2(oa.dot(cross.direction));
        let (x_axis, y_axis) = if cross.has_direction_override() {
            (od.rotated(-rotation), cross.direction)
        } else {
            (od, oa)
        };
        Self {
            origin: cross.origin,
            x_axis,
            y_axis,
            det: x_axis.cross(y_axis),
        }
    }

    pub fn to_arm(&self, p: Point2) -> (f64, f64) {
        let d = p - self.origin;
        let x = d.cross(self.y_axis) / self.det;
        let y = self.x_axis.cross(d) / self.det;
        (x, y)
    }

    pub fn to_image(&self, x: f64, y: f64) -> Point2 {
        self.origin + self.x_axis * x + self.y_axis * y
    }
}

/// Rasterizes the weighted pseudo mask of `cross` onto a `width × height`
/// grid. Pixel centres sit at half-integer coordinates; membership is the
/// closed parallelogram; pixels outside get weight 0.
pub fn rasterize_pseudo_mask(
    cross: &CrossScribble,
    sigma: SigmaSpec,
    op: MaskOp,
    width: usize,
    height: usize,
) -> Result<MaskGrid, PseudoMaskError> {
    if width == 0 || height == 0 {
        return Err(PseudoMaskError::EmptyGrid(width, height));
    }
    let mut mask = Grid::filled(width, height, 0.0);
    let frame = ArmFrame::new(cross);
    let arms = cross.arms;
    let (x_lo, x_hi, y_lo, y_hi) = (-arms.oc, arms.od, -arms.ob, arms.oa);
    let tol = 1e-9 * arms.as_array().iter().fold(1.0f64, |m, &a| m.max(a));

    let corners = [
        frame.to_image(x_lo, y_lo),
        frame.to_image(x_lo, y_hi),
        frame.to_image(x_hi, y_lo),
        frame.to_image(x_hi, y_hi),
    ];
    let min_x = corners.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let col_range = pixel_span(min_x, max_x, width);
    let row_range = pixel_span(min_y, max_y, height);

    let sigma_pos_x = sigma.for_arm(arms.od);
    let sigma_neg_x = sigma.for_arm(arms.oc);
    let sigma_pos_y = sigma.for_arm(arms.oa);
    let sigma_neg_y = sigma.for_arm(arms.ob);

    for row in row_range {
        for col in col_range.clone() {
            let centre = Point2::new(col as f64 + 0.5, row as f64 + 0.5);
            let (x, y) = frame.to_arm(centre);
            if x < x_lo - tol || x > x_hi + tol || y < y_lo - tol || y > y_hi + tol {
                continue;
            }
            let (x, y) = (x.clamp(x_lo, x_hi), y.clamp(y_lo, y_hi));
            let sx = if x >= 0.0 { sigma_pos_x } else { sigma_neg_x };
            let sy = if y >= 0.0 { sigma_pos_y } else { sigma_neg_y };
            mask[(col, row)] = initial_weight(x, y, sx, sy, op);
        }
    }
    Ok(mask)
}

/// Pixel indices whose centres may fall inside `[lo, hi]`, clipped to `0..n`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let first = (lo - 0.5).floor().max(0.0);
    let last = (hi - 0.5).ceil() + 1.0;
    if last <= 0.0 || first >= n as f64 {
        return 0..0;
    }
    (first as usize)..(last.min(n as f64) as usize)
}

/// Relative pixel errors between a pseudo mask and the full ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeErrors {
    /// Fraction of pseudo-mask pixels that are background in the ground truth.
    pub e_p: f64,
    /// Fraction of pixels outside the pseudo mask that are foreground in the
    /// ground truth.
    pub e_n: f64,
}

/// `e_p = |Σ (Mᶠ − M)·M| / Σ M` and `e_n = Σ (Mᶠ − M)·(1 − M) / Σ (1 − M)`
/// with both masks binarized at `> 0`.
pub fn relative_errors(pseudo: &MaskGrid, gt_full: &MaskGrid) -> Result<RelativeErrors, PseudoMaskError> {
    pseudo.check_same_dims(gt_full)?;
    let mut pos_sum = 0.0;
    let mut pos_count = 0usize;
    let mut neg_sum = 0.0;
    let mut neg_count = 0usize;
    for (&m, &f) in pseudo.as_slice().iter().zip(gt_full.as_slice()) {
        let m = if m > 0.0 { 1.0 } else { 0.0 };
        let f = if f > 0.0 { 1.0 } else { 0.0 };
        if m > 0.0 {
            pos_sum += f - m;
            pos_count += 1;
        } else {
            neg_sum += f - m;
            neg_count += 1;
        }
    }
    if pos_count == 0 {
        return Err(PseudoMaskError::EmptyMask("pseudo mask"));
    }
    if neg_count == 0 {
        return Err(PseudoMaskError::EmptyMask("pseudo-mask complement"));
    }
    Ok(RelativeErrors {
        e_p: (pos_sum / pos_count as f64).abs(),
        e_n: neg_sum / neg_count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_cross, shrink_cross, Segment};
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn plus_cross(cx: f64, cy: f64, arm: f64) -> CrossScribble {
        build_cross(
            Segment::from_coords(cx, cy + arm, cx, cy - arm),
            Segment::from_coords(cx - arm, cy, cx + arm, cy),
            None,
        )
        .unwrap()
    }

    #[test]
    fn weight_at_origin_is_one() {
        for op in MaskOp::ALL {
            assert_eq!(initial_weight(0.0, 0.0, 3.0, 2.0, op), 1.0);
        }
    }

    #[test]
    fn analytic_weights_one_sigma_out() {
        let s = 2.5;
        assert!((initial_weight(s, 0.0, s, s, MaskOp::Multiply) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((initial_weight(s, 0.0, s, s, MaskOp::Multiply) - 0.3678794).abs() < 1e-7);
        assert!((initial_weight(s, 0.0, s, s, MaskOp::Add) - (1.0 / E + 1.0) / 2.0).abs() < 1e-15);
        assert!((initial_weight(s, 0.0, s, s, MaskOp::Add) - 0.6839397).abs() < 1e-7);
        assert_eq!(initial_weight(s, 0.0, s, s, MaskOp::Max), 1.0);
    }

    #[test]
    fn op_parsing() {
        assert_eq!("mul".parse::<MaskOp>().unwrap(), MaskOp::Multiply);
        assert_eq!("max".parse::<MaskOp>().unwrap(), MaskOp::Max);
        assert!("median".parse::<MaskOp>().is_err());
        assert_eq!(serde_json::to_string(&MaskOp::Add).unwrap(), "\"add\"");
    }

    #[test]
    fn sigma_parsing_and_json() {
        assert!("inf".parse::<SigmaSpec>().unwrap().is_infinite());
        assert_eq!("0.75".parse::<SigmaSpec>().unwrap().ratio(), 0.75);
        assert!("0".parse::<SigmaSpec>().is_err());
        assert!("-1".parse::<SigmaSpec>().is_err());
        assert_eq!(serde_json::to_string(&SigmaSpec::INFINITE).unwrap(), "\"inf\"");
        let s: SigmaSpec = serde_json::from_str("1.5").unwrap();
        assert_eq!(s.ratio(), 1.5);
        let s: SigmaSpec = serde_json::from_str("\"inf\"").unwrap();
        assert!(s.is_infinite());
    }

    #[test]
    fn axis_aligned_binary_block() {
        let cross = plus_cross(5.5, 5.5, 2.0);
        let mask = rasterize_pseudo_mask(&cross, SigmaSpec::INFINITE, MaskOp::Multiply, 11, 11).unwrap();
        assert_eq!(mask.count_positive(), 25);
        for row in 0..11 {
            for col in 0..11 {
                let inside = (3..=7).contains(&row) && (3..=7).contains(&col);
                assert_eq!(mask[(col, row)], if inside { 1.0 } else { 0.0 }, "({col},{row})");
            }
        }
    }

    #[test]
    fn clipped_at_image_border() {
        let cross = plus_cross(0.5, 0.5, 2.0);
        let mask = rasterize_pseudo_mask(&cross, SigmaSpec::INFINITE, MaskOp::Max, 11, 11).unwrap();
        assert_eq!(mask.count_positive(), 9);
    }

    #[test]
    fn gaussian_weights_decay_from_origin() {
        let cross = plus_cross(10.5, 10.5, 8.0);
        let mask = rasterize_pseudo_mask(&cross, SigmaSpec::new(1.0).unwrap(), MaskOp::Multiply, 21, 21).unwrap();
        assert_eq!(mask[(10, 10)], 1.0);
        // x = 8 = σ on the D arm
        assert!((mask[(18, 10)] - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(mask[(19, 10)], 0.0);
    }

    #[test]
    fn asymmetric_sigma_per_arm() {
        // OA = 8 (up in y-decreasing direction), OB = 2
        let cross = build_cross(
            Segment::from_coords(10.5, 2.5, 10.5, 12.5),
            Segment::from_coords(6.5, 10.5, 14.5, 10.5),
            None,
        )
        .unwrap();
        assert_eq!(cross.arms.as_array(), [8.0, 2.0, 4.0, 4.0]);
        let mask = rasterize_pseudo_mask(&cross, SigmaSpec::new(1.0).unwrap(), MaskOp::Multiply, 21, 21).unwrap();
        // 2 px towards A (y = 2, σ = 8) vs 2 px towards B (y = -2, σ = 2)
        assert!((mask[(10, 8)] - (-4.0f64 / 64.0).exp()).abs() < 1e-12);
        assert!((mask[(10, 12)] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn direction_override_rotates_mask() {
        // Arms 8 along A and 2 across; rotate OA (pointing to -y) to +x.
        let cross = build_cross(
            Segment::from_coords(20.5, 12.5, 20.5, 28.5),
            Segment::from_coords(18.5, 20.5, 22.5, 20.5),
            Some(0.0),
        )
        .unwrap();
        let mask = rasterize_pseudo_mask(&cross, SigmaSpec::INFINITE, MaskOp::Multiply, 41, 41).unwrap();
        assert_eq!(mask.count_positive(), 17 * 5);
        assert!(mask[(28, 20)] > 0.0 && mask[(12, 20)] > 0.0);
        assert_eq!(mask[(20, 13)], 0.0);
    }

    #[test]
    fn relative_error_examples() {
        let gt = Grid::from_fn(4, 4, |x, _| if x < 2 { 1.0 } else { 0.0 });
        let pseudo = Grid::from_fn(4, 4, |x, y| if x < 2 && y < 2 { 1.0 } else { 0.0 });
        let e = relative_errors(&pseudo, &gt).unwrap();
        assert_eq!(e.e_p, 0.0);
        assert!((e.e_n - 4.0 / 12.0).abs() < 1e-15);

        let same = relative_errors(&gt, &gt).unwrap();
        assert_eq!((same.e_p, same.e_n), (0.0, 0.0));

        let mut nearly_all = Grid::filled(4, 4, 1.0);
        nearly_all[(3, 3)] = 0.0;
        let e = relative_errors(&nearly_all, &Grid::filled(4, 4, 0.0)).unwrap();
        assert_eq!((e.e_p, e.e_n), (1.0, 0.0));
    }

    #[test]
    fn relative_error_needs_both_regions() {
        let ones = Grid::filled(3, 3, 1.0);
        let zeros = Grid::filled(3, 3, 0.0);
        assert!(matches!(relative_errors(&zeros, &ones), Err(PseudoMaskError::EmptyMask(_))));
        assert!(matches!(relative_errors(&ones, &ones), Err(PseudoMaskError::EmptyMask(_))));
        assert!(matches!(
            relative_errors(&ones, &Grid::filled(2, 3, 0.0)),
            Err(PseudoMaskError::Dimensions(_))
        ));
    }

    fn arb_cross() -> impl Strategy<Value = CrossScribble> {
        (
            20.0..44.0f64,
            20.0..44.0f64,
            0.0..std::f64::consts::PI,
            0.6..2.5f64,
            prop::array::uniform4(3.0..18.0f64),
            prop::option::of(0.0..360.0f64),
        )
            .prop_map(|(cx, cy, a1, gap, [l1, l2, l3, l4], dir)| {
                let c = Point2::new(cx, cy);
                let u = Point2::new(a1.cos(), a1.sin());
                let v = Point2::new((a1 + gap).cos(), (a1 + gap).sin());
                build_cross(Segment::new(c + u * l1, c - u * l2), Segment::new(c - v * l3, c + v * l4), dir).unwrap()
            })
    }

    proptest! {
        #[test]
        fn operator_ordering(
            x in -50.0..50.0f64,
            y in -50.0..50.0f64,
            sx in 0.1..60.0f64,
            sy in 0.1..60.0f64,
        ) {
            let m = initial_weight(x, y, sx, sy, MaskOp::Multiply);
            let a = initial_weight(x, y, sx, sy, MaskOp::Add);
            let mx = initial_weight(x, y, sx, sy, MaskOp::Max);
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!(m <= a && a <= mx && mx <= 1.0);
        }

        #[test]
        fn weights_monotone_in_sigma(cross in arb_cross(), r in 0.1..3.0f64, k in 1.0..4.0f64) {
            for op in MaskOp::ALL {
                let lo = rasterize_pseudo_mask(&cross, SigmaSpec::new(r).unwrap(), op, 64, 64).unwrap();
                let hi = rasterize_pseudo_mask(&cross, SigmaSpec::new(r * k).unwrap(), op, 64, 64).unwrap();
                let inf = rasterize_pseudo_mask(&cross, SigmaSpec::INFINITE, op, 64, 64).unwrap();
                for ((a, b), c) in lo.as_slice().iter().zip(hi.as_slice()).zip(inf.as_slice()) {
                    prop_assert!(a <= b && b <= c);
                }
            }
        }

        #[test]
        fn infinite_sigma_is_operator_independent(cross in arb_cross()) {
            let masks: Vec<_> = MaskOp::ALL
                .iter()
                .map(|&op| rasterize_pseudo_mask(&cross, SigmaSpec::INFINITE, op, 64, 64).unwrap())
                .collect();
            prop_assert!(masks[0].as_slice().iter().all(|&w| w == 0.0 || w == 1.0));
            prop_assert_eq!(&masks[0], &masks[1]);
            prop_assert_eq!(&masks[0], &masks[2]);
        }

        #[test]
        fn translation_equivariant(cross in arb_cross(), dx in -6i32..6, dy in -6i32..6) {
            let off = Point2::new(dx as f64, dy as f64);
            let moved = CrossScribble {
                seg_ab: Segment::new(cross.seg_ab.a + off, cross.seg_ab.b + off),
                seg_cd: Segment::new(cross.seg_cd.a + off, cross.seg_cd.b + off),
                origin: cross.origin + off,
                ..cross
            };
            let sigma = SigmaSpec::new(0.8).unwrap();
            let a = rasterize_pseudo_mask(&cross, sigma, MaskOp::Multiply, 64, 64).unwrap();
            let b = rasterize_pseudo_mask(&moved, sigma, MaskOp::Multiply, 64, 64).unwrap();
            for row in 0..64i32 {
                for col in 0..64i32 {
                    let (c2, r2) = (col + dx, row + dy);
                    if !(0..64).contains(&c2) || !(0..64).contains(&r2) {
                        continue;
                    }
                    let wa = a[(col as usize, row as usize)];
                    let wb = b[(c2 as usize, r2 as usize)];
                    prop_assert!((wa - wb).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn shrunk_masks_nest(cross in arb_cross(), rate in 0.05..0.6f64) {
            let full = rasterize_pseudo_mask(&cross, SigmaSpec::INFINITE, MaskOp::Multiply, 64, 64).unwrap();
            let small = shrink_cross(&cross, rate).unwrap();
            let part = rasterize_pseudo_mask(&small, SigmaSpec::INFINITE, MaskOp::Multiply, 64, 64).unwrap();
            for (a, b) in part.as_slice().iter().zip(full.as_slice()) {
                prop_assert!(*a <= *b);
            }
        }
    }
}
