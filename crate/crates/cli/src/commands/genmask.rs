use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crossmask::dataset_io::{self, AnnotationDoc};
use crossmask::grid::MaskGrid;
use crossmask::multi_category::{combine_pseudo_masks, CategoryId, LabelMap};
use crossmask::pseudo_mask::{MaskOp, SigmaSpec};
use crossmask::size_branching::relative_size;

use super::{annotation_stem, load_annotation_dir, runtime, validation, write_json, CliResult};

pub struct Options {
    pub annotations: PathBuf,
    pub out: PathBuf,
    pub op: MaskOp,
    pub sigma: SigmaSpec,
    pub shrink: f64,
    pub combine: bool,
    pub raw: bool,
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub category: CategoryId,
    pub file: String,
    pub area_px: usize,
    pub relative_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub annotation: String,
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    pub masks: Vec<MaskSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_map: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub op: MaskOp,
    pub sigma_ratio: SigmaSpec,
    pub shrink: f64,
    pub image_count: usize,
    pub mask_count: usize,
    pub total_area_px: usize,
    /// Mean relative size over all written category masks.
    pub mean_relative_size: f64,
    pub images: Vec<ImageSummary>,
}

struct Rendered {
    stem: String,
    annotation: String,
    doc: AnnotationDoc,
    masks: Vec<(CategoryId, MaskGrid)>,
    labels: Option<LabelMap>,
}

pub fn run(opts: &Options) -> CliResult {
    if !(0.0..1.0).contains(&opts.shrink) {
        return Err(validation(format!("--shrink {} outside [0, 1)", opts.shrink)));
    }
    let docs = load_annotation_dir(&opts.annotations)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(runtime)?;
    let rendered: Vec<Result<Rendered, String>> = pool.install(|| {
        docs.into_par_iter()
            .map(|(path, doc)| {
                let masks = doc
                    .category_masks(opts.sigma, opts.op, opts.shrink)
                    .map_err(|e| format!("{}: {e} ({})", path.display(), e.kind()))?;
                let labels = if opts.combine {
                    Some(combine_pseudo_masks(&masks).map_err(|e| format!("{}: {e}", path.display()))?)
                } else {
                    None
                };
                Ok(Rendered {
                    stem: annotation_stem(&path),
                    annotation: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                    doc,
                    masks,
                    labels,
                })
            })
            .collect()
    });
    let mut ok = Vec::with_capacity(rendered.len());
    let mut failures = 0;
    for r in rendered {
        match r {
            Ok(r) => ok.push(r),
            Err(msg) => {
                failures += 1;
                log::error!("{msg}");
            }
        }
    }
    if failures > 0 {
        return Err(validation(format!("{failures} annotation file(s) failed")));
    }

    std::fs::create_dir_all(&opts.out).map_err(|e| runtime(format!("{}: {e}", opts.out.display())))?;
    let mut images = Vec::with_capacity(ok.len());
    let (mut mask_count, mut total_area, mut size_sum) = (0usize, 0usize, 0.0);
    for r in ok {
        let mut masks = Vec::with_capacity(r.masks.len());
        for (category, mask) in &r.masks {
            let file = format!("{}_cat{}.png", r.stem, category);
            dataset_io::write_mask(mask, &opts.out.join(&file)).map_err(runtime)?;
            if opts.raw {
                let raw = format!("{}_cat{}.pmf", r.stem, category);
                dataset_io::write_mask_raw(mask, &opts.out.join(raw)).map_err(runtime)?;
            }
            let area = mask.count_positive();
            let rel = relative_size(mask);
            mask_count += 1;
            total_area += area;
            size_sum += rel;
            masks.push(MaskSummary {
                category: *category,
                file,
                area_px: area,
                relative_size: rel,
            });
        }
        let label_map = match &r.labels {
            Some(labels) => {
                let file = format!("{}_labels.png", r.stem);
                dataset_io::write_label_map(labels, &opts.out.join(&file)).map_err(runtime)?;
                Some(file)
            }
            None => None,
        };
        images.push(ImageSummary {
            annotation: r.annotation,
            image_ref: r.doc.image_ref.clone(),
            width: r.doc.width,
            height: r.doc.height,
            masks,
            label_map,
        });
    }
    let summary = Summary {
        op: opts.op,
        sigma_ratio: opts.sigma,
        shrink: opts.shrink,
        image_count: images.len(),
        mask_count,
        total_area_px: total_area,
        mean_relative_size: if mask_count == 0 { 0.0 } else { size_sum / mask_count as f64 },
        images,
    };
    write_json(&opts.out.join("summary.json"), &summary)?;
    log::info!(
        "wrote {} mask(s) for {} image(s) to {}",
        summary.mask_count,
        summary.image_count,
        opts.out.display()
    );
    Ok(())
}
