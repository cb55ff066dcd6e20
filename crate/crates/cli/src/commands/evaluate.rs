use std::collections::BTreeSet;
use std::path::Path;

use crossmask::dataset_io;
use crossmask::losses_metrics::EvalReport;

use super::{require_dir, validation, write_json, CliResult};

fn png_names(dir: &Path) -> CliResult<BTreeSet<String>> {
    Ok(std::fs::read_dir(dir)
        .map_err(|e| validation(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect())
}

pub fn run(pred_dir: &Path, gt_dir: &Path, report: &Path) -> CliResult {
    require_dir(pred_dir, "prediction directory")?;
    require_dir(gt_dir, "ground-truth directory")?;
    let preds = png_names(pred_dir)?;
    let gts = png_names(gt_dir)?;
    if preds.is_empty() {
        return Err(validation(format!("no masks found in {}", pred_dir.display())));
    }
    let unpaired: Vec<&String> = preds.symmetric_difference(&gts).collect();
    if !unpaired.is_empty() {
        for name in &unpaired {
            log::error!("{name} has no counterpart");
        }
        return Err(validation(format!("{} unpaired mask file(s)", unpaired.len())));
    }

    let mut loaded = Vec::with_capacity(preds.len());
    for name in &preds {
        let p = dataset_io::read_mask(&pred_dir.join(name)).map_err(validation)?;
        let g = dataset_io::read_mask(&gt_dir.join(name)).map_err(validation)?;
        if p.dims() != g.dims() {
            return Err(validation(format!(
                "{name}: prediction is {:?}, ground truth is {:?}",
                p.dims(),
                g.dims()
            )));
        }
        loaded.push((name.clone(), p, g));
    }
    let out = EvalReport::from_named_pairs(loaded.iter().map(|(n, p, g)| (n.clone(), p, g))).map_err(validation)?;
    log::info!("mDice {:.4} over {} image(s)", out.mdice, out.count);
    write_json(report, &out)
}
