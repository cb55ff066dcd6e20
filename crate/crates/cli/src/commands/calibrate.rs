use std::collections::BTreeMap;
use std::path::Path;

use crossmask::dataset_io;
use crossmask::multi_category::CategoryId;
use crossmask::size_branching::{calibrate_thresholds, relative_size, ThresholdTable};

use super::{require_dir, runtime, validation, CliResult};

/// Category encoded in a `genmask` file name (`<stem>_cat<k>.png`). Other
/// PNG masks count as category 1; label maps are skipped.
fn mask_category(name: &str) -> Option<CategoryId> {
    let stem = name.strip_suffix(".png")?;
    if stem.ends_with("_labels") {
        return None;
    }
    let parsed = stem
        .rsplit_once("_cat")
        .and_then(|(_, k)| k.parse::<u8>().ok())
        .and_then(|k| CategoryId::new(k).ok());
    Some(parsed.unwrap_or(CategoryId::new(1).expect("non-zero")))
}

pub fn run(masks_dir: &Path, out: &Path) -> CliResult {
    require_dir(masks_dir, "mask directory")?;
    let mut files: Vec<_> = std::fs::read_dir(masks_dir)
        .map_err(|e| validation(format!("{}: {e}", masks_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();

    let mut sizes: BTreeMap<CategoryId, Vec<f64>> = BTreeMap::new();
    for path in files {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let Some(category) = mask_category(&name) else { continue };
        let mask = dataset_io::read_mask(&path).map_err(validation)?;
        sizes.entry(category).or_default().push(relative_size(&mask));
    }
    if sizes.is_empty() {
        return Err(validation(format!("no masks found in {}", masks_dir.display())));
    }

    let mut table = ThresholdTable::default();
    for (category, values) in &sizes {
        let thr = calibrate_thresholds(values)
            .map_err(|e| validation(format!("category {category} ({} masks): {e}", values.len())))?;
        log::info!("category {category}: thr1 = {}, thr2 = {}", thr.thr1(), thr.thr2());
        table.0.insert(*category, thr);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    dataset_io::atomic_write(out, table.to_json().as_bytes()).map_err(runtime)
}
