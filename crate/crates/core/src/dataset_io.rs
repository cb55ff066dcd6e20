//! On-disk formats: annotation documents, mask images, dataset manifests and
//! annotation statistics.
//!
//! Annotation documents are JSON with an explicit `schema_version`:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "image_ref": "case01.png",
//!   "width": 64,
//!   "height": 48,
//!   "entries": [
//!     {"category": 1, "cross": {"seg_ab": [[30, 10], [30, 40]], "seg_cd": [[18, 25], [44, 25]]}}
//!   ],
//!   "background": {"seg": [[2, 2], [60, 4]]}
//! }
//! ```
//!
//! Masks are 8-bit grayscale PNGs. Binary masks use 0/255, soft masks are
//! quantised to `round(255·w)`, and label maps store the raw category index.
//! Every write goes to a temporary file in the destination directory and is
//! renamed into place.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{build_cross, shrink_cross, CrossScribble, GeometryError, Point2, Segment};
use crate::grid::{Grid, MaskGrid};
use crate::multi_category::{CategoryId, LabelMap};
use crate::pseudo_mask::{rasterize_pseudo_mask, MaskOp, PseudoMaskError, SigmaSpec};

pub const SCHEMA_VERSION: u32 = 1;
/// Magic bytes of the raw float mask stream.
pub const RAW_MASK_MAGIC: [u8; 4] = *b"PMF1";
/// Histogram bin width used by coverage statistics.
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.01;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: unsupported pixel format {format} (expected 8-bit)")]
    UnsupportedBitDepth { path: PathBuf, format: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("mask value {0} is outside [0, 1]")]
    Unrepresentable(f64),
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("entry {entry}: {source}")]
    Geometry {
        entry: usize,
        #[source]
        source: GeometryError,
    },
    #[error("{location}: endpoint ({x}, {y}) outside the {width}×{height} image")]
    Bounds {
        location: String,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("entry {entry}: category {category} already annotated (set multi_instance to allow repeats)")]
    DuplicateCategory { entry: usize, category: CategoryId },
    #[error(transparent)]
    Mask(#[from] PseudoMaskError),
}

impl AnnotationError {
    /// Short machine-readable kind for reports and HTTP bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            AnnotationError::Io(_) => "IoError",
            AnnotationError::Schema(_) => "SchemaError",
            AnnotationError::Geometry { source, .. } => source.kind(),
            AnnotationError::Bounds { .. } => "BoundsError",
            AnnotationError::DuplicateCategory { .. } => "DuplicateCategory",
            AnnotationError::Mask(_) => "MaskError",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

// ── Annotation documents ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossSegments {
    pub seg_ab: Segment,
    pub seg_cd: Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub category: CategoryId,
    pub cross: CrossSegments,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction_deg: Option<f64>,
}

impl AnnotationEntry {
    pub fn build(&self) -> Result<CrossScribble, GeometryError> {
        build_cross(self.cross.seg_ab, self.cross.seg_cd, self.direction_deg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundScribble {
    pub seg: Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationDoc {
    pub schema_version: u32,
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub multi_instance: bool,
    pub entries: Vec<AnnotationEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<BackgroundScribble>,
}

impl AnnotationDoc {
    pub fn new(image_ref: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            image_ref: image_ref.into(),
            width,
            height,
            multi_instance: false,
            entries: Vec::new(),
            background: None,
        }
    }

    /// Parses and validates a document.
    pub fn from_json(text: &str) -> Result<Self, AnnotationError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| AnnotationError::Schema(e.to_string()))?;
        match value.get("schema_version") {
            None => return Err(AnnotationError::Schema("missing field `schema_version`".into())),
            Some(v) if v.as_u64() != Some(SCHEMA_VERSION as u64) => {
                return Err(AnnotationError::Schema(format!("unsupported schema_version {v}")))
            }
            Some(_) => {}
        }
        let doc: AnnotationDoc = serde_json::from_value(value).map_err(|e| AnnotationError::Schema(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    /// Canonical serialisation: pretty-printed with a trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("annotation serializes");
        s.push('\n');
        s
    }

    /// Checks bounds, category uniqueness and every cross; returns the crosses.
    pub fn validate(&self) -> Result<Vec<CrossScribble>, AnnotationError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(AnnotationError::Schema(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(AnnotationError::Schema("width and height must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        let mut crosses = Vec::with_capacity(self.entries.len());
        for (i, entry) in self.entries.iter().enumerate() {
            let segs = [entry.cross.seg_ab, entry.cross.seg_cd];
            for p in segs.iter().flat_map(|s| [s.a, s.b]) {
                self.check_bounds(p, || format!("entry {i}"))?;
            }
            if !self.multi_instance && !seen.insert(entry.category) {
                return Err(AnnotationError::DuplicateCategory {
                    entry: i,
                    category: entry.category,
                });
            }
            crosses.push(entry.build().map_err(|source| AnnotationError::Geometry { entry: i, source })?);
        }
        if let Some(bg) = &self.background {
            for p in [bg.seg.a, bg.seg.b] {
                self.check_bounds(p, || "background".to_string())?;
            }
            if bg.seg.length() <= 0.0 {
                return Err(AnnotationError::Schema("background segment has zero length".into()));
            }
        }
        Ok(crosses)
    }

    fn check_bounds(&self, p: Point2, location: impl FnOnce() -> String) -> Result<(), AnnotationError> {
        let inside = p.is_finite() && (0.0..=self.width as f64).contains(&p.x) && (0.0..=self.height as f64).contains(&p.y);
        if inside {
            Ok(())
        } else {
            Err(AnnotationError::Bounds {
                location: location(),
                x: p.x,
                y: p.y,
                width: self.width,
                height: self.height,
            })
        }
    }

    /// Categories in ascending order.
    pub fn categories(&self) -> Vec<CategoryId> {
        self.entries.iter().map(|e| e.category).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// One pseudo mask per category (repeated instances are merged by
    /// pixel-wise maximum), after shrinking every cross by `shrink`.
    pub fn category_masks(
        &self,
        sigma: SigmaSpec,
        op: MaskOp,
        shrink: f64,
    ) -> Result<Vec<(CategoryId, MaskGrid)>, AnnotationError> {
        let crosses = self.validate()?;
        let (w, h) = (self.width as usize, self.height as usize);
        let mut out: BTreeMap<CategoryId, MaskGrid> = BTreeMap::new();
        for (i, (entry, cross)) in self.entries.iter().zip(crosses).enumerate() {
            let cross = shrink_cross(&cross, shrink).map_err(|source| AnnotationError::Geometry { entry: i, source })?;
            let mask = rasterize_pseudo_mask(&cross, sigma, op, w, h)?;
            match out.get_mut(&entry.category) {
                Some(acc) => {
                    for (a, m) in acc.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *a = a.max(*m);
                    }
                }
                None => {
                    out.insert(entry.category, mask);
                }
            }
        }
        Ok(out.into_iter().collect())
    }
}

pub fn load_annotation(path: &Path) -> Result<AnnotationDoc, AnnotationError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    AnnotationDoc::from_json(&text)
}

pub fn save_annotation(doc: &AnnotationDoc, path: &Path) -> Result<(), AnnotationError> {
    doc.validate()?;
    atomic_write(path, doc.to_canonical_json().as_bytes())?;
    Ok(())
}

/// Annotation files (`*.json`) directly inside `dir`, sorted by name.
pub fn list_annotation_files(dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    Ok(files)
}

// ── Masks ────────────────────────────────────────────────────────────────────

fn quantize(w: f64) -> Result<u8, IoError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(IoError::Unrepresentable(w));
    }
    Ok((255.0 * w).round() as u8)
}

fn encode_gray_png(width: usize, height: usize, pixels: Vec<u8>) -> Vec<u8> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels).expect("buffer matches dimensions");
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .expect("in-memory PNG encoding succeeds");
    bytes
}

/// PNG bytes of a mask: `round(255·w)` per pixel.
pub fn encode_mask_png(grid: &MaskGrid) -> Result<Vec<u8>, IoError> {
    let pixels = grid.as_slice().iter().map(|&w| quantize(w)).collect::<Result<Vec<_>, _>>()?;
    Ok(encode_gray_png(grid.width(), grid.height(), pixels))
}

pub fn encode_label_png(labels: &LabelMap) -> Vec<u8> {
    encode_gray_png(labels.width(), labels.height(), labels.as_slice().to_vec())
}

pub fn write_mask(grid: &MaskGrid, path: &Path) -> Result<(), IoError> {
    atomic_write(path, &encode_mask_png(grid)?)
}

pub fn write_label_map(labels: &LabelMap, path: &Path) -> Result<(), IoError> {
    atomic_write(path, &encode_label_png(labels))
}

fn decode_gray8(bytes: &[u8], path: &Path) -> Result<GrayImage, IoError> {
    let img = image::load_from_memory(bytes).map_err(|source| IoError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    match img {
        DynamicImage::ImageLuma8(g) => Ok(g),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => Ok(img.to_luma8()),
        other => Err(IoError::UnsupportedBitDepth {
            path: path.to_path_buf(),
            format: format!("{:?}", other.color()),
        }),
    }
}

fn read_gray8(path: &Path) -> Result<GrayImage, IoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_gray8(&bytes, path)
}

/// Reads a mask PNG as weights `v / 255`.
pub fn read_mask(path: &Path) -> Result<MaskGrid, IoError> {
    let img = read_gray8(path)?;
    Ok(gray_to_grid(&img, |v| v as f64 / 255.0))
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<MaskGrid, IoError> {
    let img = decode_gray8(bytes, Path::new("<memory>"))?;
    Ok(gray_to_grid(&img, |v| v as f64 / 255.0))
}

pub fn read_label_map(path: &Path) -> Result<LabelMap, IoError> {
    let img = read_gray8(path)?;
    Ok(gray_to_grid(&img, |v| v))
}

/// Grayscale image with intensities scaled to `[0, 1]`. Colour images are
/// converted to luma.
pub fn read_image(path: &Path) -> Result<Grid<f64>, IoError> {
    let img = image::open(path).map_err(|source| IoError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.to_luma8();
    Ok(gray_to_grid(&gray, |v| v as f64 / 255.0))
}

pub fn write_image(image: &Grid<f64>, path: &Path) -> Result<(), IoError> {
    let pixels = image.as_slice().iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
    atomic_write(path, &encode_gray_png(image.width(), image.height(), pixels))
}

fn gray_to_grid<T>(img: &GrayImage, f: impl Fn(u8) -> T) -> Grid<T> {
    let (w, h) = img.dimensions();
    Grid::from_fn(w as usize, h as usize, |x, y| {
        let Luma([v]) = *img.get_pixel(x as u32, y as u32);
        f(v)
    })
}

/// Lossless mask stream: `PMF1`, height and width as little-endian `u16`,
/// then row-major little-endian `f32` weights.
pub fn encode_mask_raw(grid: &MaskGrid) -> Result<Vec<u8>, IoError> {
    let (w, h) = grid.dims();
    let (Ok(w16), Ok(h16)) = (u16::try_from(w), u16::try_from(h)) else {
        return Err(IoError::Format {
            path: PathBuf::from("<memory>"),
            message: format!("{w}×{h} exceeds the raw stream limit of 65535"),
        });
    };
    let mut out = Vec::with_capacity(8 + 4 * grid.len());
    out.extend_from_slice(&RAW_MASK_MAGIC);
    out.extend_from_slice(&h16.to_le_bytes());
    out.extend_from_slice(&w16.to_le_bytes());
    for &v in grid.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mask_raw(bytes: &[u8], path: &Path) -> Result<MaskGrid, IoError> {
    let bad = |message: &str| IoError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 8 || bytes[..4] != RAW_MASK_MAGIC {
        return Err(bad("not a raw mask stream"));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * w * h {
        return Err(bad("payload length does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Grid::from_vec(w, h, data).expect("length checked"))
}

pub fn write_mask_raw(grid: &MaskGrid, path: &Path) -> Result<(), IoError> {
    atomic_write(path, &encode_mask_raw(grid)?)
}

pub fn read_mask_raw(path: &Path) -> Result<MaskGrid, IoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_mask_raw(&bytes, path)
}

// ── Manifests ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub image_ref: String,
    pub annotation_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_ref: Option<String>,
    #[serde(default)]
    pub split: Split,
}

/// Dataset listing. Refs are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("manifest schema error: {0}")]
    Schema(String),
    #[error("duplicate image_ref {0}")]
    DuplicateImage(String),
    #[error("unresolvable ref {0}")]
    Unresolvable(PathBuf),
    #[error("{image_ref}: {source}")]
    Annotation {
        image_ref: String,
        #[source]
        source: AnnotationError,
    },
    #[error("no ground-truth mask for {0}")]
    MissingGt(String),
}

impl DatasetManifest {
    /// Loads and checks a manifest; returns it with the directory refs resolve against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), ManifestError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| ManifestError::Schema(e.to_string()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.check(&base)?;
        Ok((manifest, base))
    }

    pub fn check(&self, base: &Path) -> Result<(), ManifestError> {
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(item.image_ref.as_str()) {
                return Err(ManifestError::DuplicateImage(item.image_ref.clone()));
            }
            let refs = [Some(&item.image_ref), Some(&item.annotation_ref), item.gt_mask_ref.as_ref()];
            for r in refs.into_iter().flatten() {
                let p = base.join(r);
                if !p.exists() {
                    return Err(ManifestError::Unresolvable(p));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

// ── Annotation statistics ────────────────────────────────────────────────────

/// Pixels crossed by a one-pixel-wide Bresenham line between the pixels
/// containing the two endpoints, clipped to the image.
pub fn bresenham_pixels(seg: &Segment, width: usize, height: usize) -> Vec<(usize, usize)> {
    let cell = |v: f64, n: usize| (v.floor() as i64).clamp(0, n as i64 - 1);
    let (mut x0, mut y0) = (cell(seg.a.x, width), cell(seg.a.y, height));
    let (x1, y1) = (cell(seg.b.x, width), cell(seg.b.y, height));
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((x0 as usize, y0 as usize));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub image_ref: String,
    pub fg_scribble_px: usize,
    pub bg_scribble_px: usize,
    /// Foreground pixel count the rate is measured against: ground truth when
    /// available, otherwise the flat pseudo mask.
    pub fg_area_px: usize,
    pub bg_area_px: usize,
    pub fg_annotated_rate: f64,
    pub bg_annotated_rate: f64,
    /// Fraction of ground-truth foreground covered by the pseudo mask.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of_unit_values(values: &[f64]) -> Self {
        let bins = (1.0 / HISTOGRAM_BIN_WIDTH).round() as usize;
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v / HISTOGRAM_BIN_WIDTH).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self {
            bin_width: HISTOGRAM_BIN_WIDTH,
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsAggregate {
    /// Mean over images of the per-image rate.
    pub mean_fg_rate: f64,
    pub mean_bg_rate: f64,
    /// Total scribble pixels over total category pixels.
    pub pooled_fg_rate: f64,
    pub pooled_bg_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pooled_coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage_histogram: Option<Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub count: usize,
    pub per_image: Vec<ImageStats>,
    pub aggregate: StatsAggregate,
    /// Per-image foreground-rate distribution.
    pub fg_rate_histogram: Histogram,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Statistics for one annotated image. `gt` is the binary full mask.
pub fn image_stats(doc: &AnnotationDoc, gt: Option<&MaskGrid>) -> Result<ImageStats, AnnotationError> {
    let (w, h) = (doc.width as usize, doc.height as usize);
    if let Some(g) = gt {
        if g.dims() != (w, h) {
            return Err(AnnotationError::Schema(format!(
                "ground truth is {}×{}, annotation says {w}×{h}",
                g.width(),
                g.height()
            )));
        }
    }
    let mut fg = Grid::filled(w, h, false);
    for entry in &doc.entries {
        for seg in [entry.cross.seg_ab, entry.cross.seg_cd] {
            for p in bresenham_pixels(&seg, w, h) {
                fg[p] = true;
            }
        }
    }
    let fg_scribble_px = fg.as_slice().iter().filter(|&&b| b).count();
    let bg_scribble_px = doc
        .background
        .map(|bg| bresenham_pixels(&bg.seg, w, h).into_iter().collect::<BTreeSet<_>>().len())
        .unwrap_or(0);

    let mut pseudo: MaskGrid = Grid::filled(w, h, 0.0);
    for (_, m) in doc.category_masks(SigmaSpec::INFINITE, MaskOp::Multiply, 0.0)? {
        for (a, v) in pseudo.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *a = a.max(*v);
        }
    }
    let (fg_area_px, coverage) = match gt {
        Some(g) => {
            let gt_pos = g.count_positive();
            let covered = g
                .as_slice()
                .iter()
                .zip(pseudo.as_slice())
                .filter(|(&gv, &pv)| gv > 0.0 && pv > 0.0)
                .count();
            (gt_pos, Some(if gt_pos == 0 { 1.0 } else { ratio(covered, gt_pos) }))
        }
        None => (pseudo.count_positive(), None),
    };
    let bg_area_px = w * h - fg_area_px;
    Ok(ImageStats {
        image_ref: doc.image_ref.clone(),
        fg_scribble_px,
        bg_scribble_px,
        fg_area_px,
        bg_area_px,
        fg_annotated_rate: ratio(fg_scribble_px, fg_area_px),
        bg_annotated_rate: ratio(bg_scribble_px, bg_area_px),
        coverage,
    })
}

/// Aggregates per-image statistics. The result does not depend on input order.
pub fn aggregate_stats(mut per_image: Vec<ImageStats>) -> StatsReport {
    per_image.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
    let n = per_image.len();
    let mean = |f: &dyn Fn(&ImageStats) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_image.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let sum = |f: &dyn Fn(&ImageStats) -> usize| per_image.iter().map(f).sum::<usize>();
    let has_cov = n > 0 && per_image.iter().all(|s| s.coverage.is_some());
    let coverages: Vec<f64> = per_image.iter().filter_map(|s| s.coverage).collect();
    let pooled_coverage = has_cov.then(|| {
        let covered: f64 = per_image.iter().map(|s| s.coverage.unwrap() * s.fg_area_px as f64).sum();
        let total = sum(&|s| s.fg_area_px);
        if total == 0 {
            1.0
        } else {
            covered / total as f64
        }
    });
    let fg_rates: Vec<f64> = per_image.iter().map(|s| s.fg_annotated_rate.min(1.0)).collect();
    StatsReport {
        count: n,
        aggregate: StatsAggregate {
            mean_fg_rate: mean(&|s| s.fg_annotated_rate),
            mean_bg_rate: mean(&|s| s.bg_annotated_rate),
            pooled_fg_rate: ratio(sum(&|s| s.fg_scribble_px), sum(&|s| s.fg_area_px)),
            pooled_bg_rate: ratio(sum(&|s| s.bg_scribble_px), sum(&|s| s.bg_area_px)),
            mean_coverage: has_cov.then(|| mean(&|s| s.coverage.unwrap())),
            pooled_coverage,
            coverage_histogram: has_cov.then(|| Histogram::of_unit_values(&coverages)),
        },
        fg_rate_histogram: Histogram::of_unit_values(&fg_rates),
        per_image,
    }
}

/// Where ground-truth masks come from when computing coverage.
#[derive(Debug, Clone, PartialEq)]
pub enum GtSource {
    None,
    /// `gt_mask_ref` of each manifest item (required on every item).
    Manifest,
    /// `<dir>/<image file stem>.png` for every item.
    Dir(PathBuf),
}

pub fn annotation_stats(manifest: &DatasetManifest, base: &Path, gt: &GtSource) -> Result<StatsReport, ManifestError> {
    let mut per_image = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let wrap = |source| ManifestError::Annotation {
            image_ref: item.image_ref.clone(),
            source,
        };
        let doc = load_annotation(&base.join(&item.annotation_ref)).map_err(wrap)?;
        let gt_path = match gt {
            GtSource::None => None,
            GtSource::Manifest => Some(base.join(
                item.gt_mask_ref
                    .as_ref()
                    .ok_or_else(|| ManifestError::MissingGt(item.image_ref.clone()))?,
            )),
            GtSource::Dir(dir) => {
                let stem = Path::new(&item.image_ref).file_stem().unwrap_or_default();
                let p = dir.join(stem).with_extension("png");
                if !p.exists() {
                    return Err(ManifestError::MissingGt(item.image_ref.clone()));
                }
                Some(p)
            }
        };
        let gt_mask = gt_path.map(|p| read_mask(&p)).transpose()?;
        per_image.push(image_stats(&doc, gt_mask.as_ref()).map_err(wrap)?);
    }
    Ok(aggregate_stats(per_image))
}
