//! Seeded synthetic corpus: one bright rotated rectangle or ellipse per image
//! on a noisy dark background, annotated with a cross along its two axes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset_io::{AnnotationDoc, AnnotationEntry, CrossSegments};
use crate::geometry::{Point2, Segment};
use crate::grid::{Grid, MaskGrid};
use crate::multi_category::CategoryId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Rectangles,
    Ellipses,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub shapes: ShapeFamily,
    /// Target area as a fraction of the image, sampled log-uniformly.
    pub rel_area: [f64; 2],
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Each arm of the annotated cross ends this fraction of the way to the
    /// boundary (drawn uniformly from the interval).
    pub arm_reach: [f64; 2],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            count: 80,
            shapes: ShapeFamily::Mixed,
            rel_area: [0.01, 0.4],
            noise: 0.05,
            arm_reach: [0.9, 1.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: String,
    pub image: Grid<f64>,
    pub gt: MaskGrid,
    pub doc: AnnotationDoc,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    ellipse: bool,
    centre: Point2,
    /// unit vector of the first semi-axis
    axis: Point2,
    semi: [f64; 2],
}

impl Shape {
    fn contains(&self, p: Point2) -> bool {
        let d = p - self.centre;
        let u = d.dot(self.axis) / self.semi[0];
        let v = d.cross(self.axis) / self.semi[1];
        if self.ellipse {
            u * u + v * v <= 1.0
        } else {
            u.abs() <= 1.0 && v.abs() <= 1.0
        }
    }

    fn area(ellipse: bool, semi: [f64; 2]) -> f64 {
        if ellipse {
            PI * semi[0] * semi[1]
        } else {
            4.0 * semi[0] * semi[1]
        }
    }
}

pub fn generate_corpus(spec: &SyntheticSpec) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count).map(|i| generate_one(spec, i, &mut rng)).collect()
}

fn generate_one(spec: &SyntheticSpec, index: usize, rng: &mut ChaCha8Rng) -> SyntheticSample {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let ellipse = match spec.shapes {
        ShapeFamily::Rectangles => false,
        ShapeFamily::Ellipses => true,
        ShapeFamily::Mixed => rng.random_bool(0.5),
    };
    let [lo, hi] = spec.rel_area;
    let rel = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
    let aspect = rng.random_range(0.5..1.0);
    // area = c · s0 · s1 with s1 = aspect · s0
    let unit_area = Shape::area(ellipse, [1.0, aspect]);
    let s0 = (rel * w * h / unit_area).sqrt();
    let mut semi = [s0, s0 * aspect];
    let angle = rng.random_range(0.0..PI);
    let axis = Point2::new(angle.cos(), angle.sin());
    // bounding half-extent must fit with a 1 px margin
    let margin = 1.0;
    let radius = if ellipse { semi[0] } else { semi[0].hypot(semi[1]) };
    let max_radius = (w.min(h) / 2.0 - margin).max(2.0);
    if radius > max_radius {
        let k = max_radius / radius;
        semi = [semi[0] * k, semi[1] * k];
    }
    let radius = radius.min(max_radius);
    let centre = Point2::new(
        rng.random_range(radius + margin..=w - radius - margin),
        rng.random_range(radius + margin..=h - radius - margin),
    );
    let shape = Shape {
        ellipse,
        centre,
        axis,
        semi,
    };

    let gt = Grid::from_fn(spec.width, spec.height, |x, y| {
        if shape.contains(Point2::new(x as f64 + 0.5, y as f64 + 0.5)) {
            1.0
        } else {
            0.0
        }
    });
    let bg_level = rng.random_range(0.15..0.3);
    let fg_level = rng.random_range(0.65..0.85);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("valid noise level");
    let image = gt.map(|&g| {
        let base = if g > 0.0 { fg_level } else { bg_level };
        (base + noise.sample(rng)).clamp(0.0, 1.0)
    });

    // cross along the two axes: AB on the first axis, CD on the second
    let normal = axis.rotated(PI / 2.0);
    let [r0, r1] = spec.arm_reach;
    let mut reach = || rng.random_range(r0..=r1);
    let a = centre + axis * (semi[0] * reach());
    let b = centre - axis * (semi[0] * reach());
    let c = centre - normal * (semi[1] * reach());
    let d = centre + normal * (semi[1] * reach());
    let id = format!("syn{index:04}");
    let mut doc = AnnotationDoc::new(format!("{id}.png"), spec.width as u32, spec.height as u32);
    doc.entries.push(AnnotationEntry {
        category: CategoryId::new(1).expect("non-zero"),
        cross: CrossSegments {
            seg_ab: Segment::new(a, b),
            seg_cd: Segment::new(c, d),
        },
        direction_deg: None,
    });
    SyntheticSample { id, image, gt, doc }
}
