use std::path::Path;

use crossmask::dataset_io::{annotation_stats, DatasetManifest, GtSource, ManifestError};

use super::{require_dir, runtime, validation, write_json, CliError, CliResult};

fn classify(e: ManifestError) -> CliError {
    match e {
        ManifestError::Io(_) => runtime(e),
        other => validation(other),
    }
}

pub fn run(manifest_path: &Path, gt_dir: Option<&Path>, report: &Path) -> CliResult {
    if !manifest_path.is_file() {
        return Err(validation(format!("manifest {} not found", manifest_path.display())));
    }
    let (manifest, base) = DatasetManifest::load(manifest_path).map_err(classify)?;
    let gt = match gt_dir {
        Some(dir) => {
            require_dir(dir, "ground-truth directory")?;
            GtSource::Dir(dir.to_path_buf())
        }
        None if !manifest.items.is_empty() && manifest.items.iter().all(|i| i.gt_mask_ref.is_some()) => {
            GtSource::Manifest
        }
        None => GtSource::None,
    };
    let stats = annotation_stats(&manifest, &base, &gt).map_err(classify)?;
    log::info!(
        "{} image(s): mean foreground rate {:.4}%, mean background rate {:.4}%",
        stats.count,
        100.0 * stats.aggregate.mean_fg_rate,
        100.0 * stats.aggregate.mean_bg_rate
    );
    write_json(report, &stats)
}
