pub mod calibrate;
pub mod evaluate;
pub mod genmask;
pub mod serve;
pub mod shrink;
pub mod stats;
pub mod train;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crossmask::dataset_io::{self, AnnotationDoc};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or inputs that fail validation (exit 2).
    Validation(String),
    /// Anything that goes wrong after inputs were accepted (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn validation(msg: impl fmt::Display) -> CliError {
    CliError::Validation(msg.to_string())
}

pub fn runtime(msg: impl fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

pub fn require_dir(path: &Path, what: &str) -> CliResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(validation(format!("{what} {} is not a directory", path.display())))
    }
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    dataset_io::atomic_write(path, text.as_bytes()).map_err(runtime)
}

/// File name without the trailing `.json`.
pub fn annotation_stem(path: &Path) -> String {
    let name = path.file_name().unwrap_or_default().to_string_lossy();
    name.strip_suffix(".json").unwrap_or(&name).to_string()
}

/// Loads every annotation in `dir`. All files are checked before returning;
/// each failure is logged and the whole load fails as a validation error.
pub fn load_annotation_dir(dir: &Path) -> CliResult<Vec<(PathBuf, AnnotationDoc)>> {
    require_dir(dir, "annotation directory")?;
    let files = dataset_io::list_annotation_files(dir).map_err(validation)?;
    if files.is_empty() {
        return Err(validation(format!("no annotations found in {}", dir.display())));
    }
    let mut docs = Vec::with_capacity(files.len());
    let mut failures = 0;
    for f in files {
        match dataset_io::load_annotation(&f) {
            Ok(doc) => docs.push((f, doc)),
            Err(e) => {
                failures += 1;
                log::error!("{}: {} ({})", f.display(), e, e.kind());
            }
        }
    }
    if failures > 0 {
        return Err(validation(format!("{failures} annotation file(s) failed validation")));
    }
    Ok(docs)
}

/// Ground-truth file for an annotation: `<dir>/<image_ref stem>.png`.
pub fn gt_path(dir: &Path, doc: &AnnotationDoc) -> PathBuf {
    let stem = Path::new(&doc.image_ref).file_stem().unwrap_or_default();
    dir.join(stem).with_extension("png")
}
