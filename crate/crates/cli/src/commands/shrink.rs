use std::path::Path;

use serde::{Deserialize, Serialize};

use crossmask::dataset_io::{self, AnnotationDoc};
use crossmask::grid::{Grid, MaskGrid};
use crossmask::pseudo_mask::{relative_errors, MaskOp, SigmaSpec};

use super::{gt_path, load_annotation_dir, require_dir, validation, write_json, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub rate: f64,
    /// `(1 − rate)²`
    pub expected_area_ratio: f64,
    /// Mean over every (image, category) of shrunk area / unshrunk area.
    pub mean_area_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_e_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_e_n: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkReport {
    pub image_count: usize,
    pub mask_count: usize,
    pub rows: Vec<RateRow>,
}

fn union(masks: &[(crossmask::multi_category::CategoryId, MaskGrid)], doc: &AnnotationDoc) -> MaskGrid {
    let mut out = Grid::filled(doc.width as usize, doc.height as usize, 0.0f64);
    for (_, m) in masks {
        for (a, v) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *a = a.max(*v);
        }
    }
    out
}

pub fn run(annotations: &Path, rates: &[f64], gt_dir: Option<&Path>, report: &Path) -> CliResult {
    if let Some(r) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(validation(format!("rate {r} outside [0, 1)")));
    }
    if let Some(dir) = gt_dir {
        require_dir(dir, "ground-truth directory")?;
    }
    let docs = load_annotation_dir(annotations)?;
    let gts: Vec<Option<MaskGrid>> = docs
        .iter()
        .map(|(_, doc)| {
            gt_dir
                .map(|dir| {
                    let p = gt_path(dir, doc);
                    let g = dataset_io::read_mask(&p).map_err(validation)?;
                    if g.dims() != (doc.width as usize, doc.height as usize) {
                        return Err(validation(format!("{}: size differs from annotation", p.display())));
                    }
                    Ok(g)
                })
                .transpose()
        })
        .collect::<CliResult<_>>()?;

    let render = |doc: &AnnotationDoc, rate: f64| {
        doc.category_masks(SigmaSpec::INFINITE, MaskOp::Multiply, rate)
            .map_err(|e| validation(format!("{}: {e}", doc.image_ref)))
    };
    let base: Vec<_> = docs.iter().map(|(_, d)| render(d, 0.0)).collect::<CliResult<_>>()?;
    let mask_count = base.iter().map(Vec::len).sum();

    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        let (mut ratio_sum, mut n) = (0.0, 0usize);
        let (mut ep, mut en, mut n_err) = (0.0, 0.0, 0usize);
        for (((_, doc), full), gt) in docs.iter().zip(&base).zip(&gts) {
            let shrunk = render(doc, rate)?;
            for ((_, f), (_, s)) in full.iter().zip(&shrunk) {
                let fa = f.count_positive();
                if fa > 0 {
                    ratio_sum += s.count_positive() as f64 / fa as f64;
                    n += 1;
                }
            }
            if let Some(g) = gt {
                match relative_errors(&union(&shrunk, doc), g) {
                    Ok(e) => {
                        ep += e.e_p;
                        en += e.e_n;
                        n_err += 1;
                    }
                    Err(e) => log::warn!("{}: rate {rate}: {e}; skipped in e_p/e_n", doc.image_ref),
                }
            }
        }
        let mean = |s: f64, k: usize| if k == 0 { None } else { Some(s / k as f64) };
        let row = RateRow {
            rate,
            expected_area_ratio: (1.0 - rate) * (1.0 - rate),
            mean_area_ratio: mean(ratio_sum, n).unwrap_or(0.0),
            mean_e_p: gt_dir.and(mean(ep, n_err)),
            mean_e_n: gt_dir.and(mean(en, n_err)),
        };
        log::info!(
            "rate {rate}: area ratio {:.4} (expected {:.4})",
            row.mean_area_ratio,
            row.expected_area_ratio
        );
        rows.push(row);
    }
    write_json(
        report,
        &ShrinkReport {
            image_count: docs.len(),
            mask_count,
            rows,
        },
    )
}
