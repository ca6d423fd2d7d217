//! Dataset types and annotation/prediction file I/O.
//!
//! Both file kinds are line-delimited JSON with explicit field names.
//! Annotation and prediction files start with a [`DatasetMeta`] header line,
//! followed by one [`ImageAnnotation`] record per image (annotations) or one
//! scored triplet per line (predictions). Unknown fields are rejected, and
//! malformed or out-of-range records report the file, record index and field.

mod generate;

pub use generate::{generate_dataset, GeneratedDataset, MAX_ACTION_PATTERNS};

use crate::geometry::BoundingBox;
use crate::postproc::ScoredTriplet;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Header record shared by annotation and prediction files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub num_images: usize,
    /// Images are square, `image_size` x `image_size` pixels.
    pub image_size: u32,
    pub num_object_classes: usize,
    pub num_action_classes: usize,
}

/// One ground-truth human-object pair with its action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtInstance {
    pub human_box: BoundingBox,
    pub object_box: BoundingBox,
    pub object_class: usize,
    pub actions: Vec<usize>,
}

/// Ground-truth record for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageAnnotation {
    pub image_id: String,
    pub file_name: String,
    pub instances: Vec<GtInstance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub annotations: Vec<ImageAnnotation>,
}

impl Dataset {
    /// Total ground-truth pair count.
    pub fn num_instances(&self) -> usize {
        self.annotations.iter().map(|a| a.instances.len()).sum()
    }
}

/// Controls synthetic scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub num_images: usize,
    pub image_size: u32,
    pub num_object_classes: usize,
    pub num_action_classes: usize,
    pub pairs_min: usize,
    pub pairs_max: usize,
    /// Zipf-like exponent over (object, action) combinations; 0 = uniform.
    pub class_skew: f64,
    /// When false, images are flat background only.
    pub render_style: bool,
    pub rare_threshold: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_images: 32,
            image_size: 64,
            num_object_classes: 3,
            num_action_classes: 4,
            pairs_min: 1,
            pairs_max: 2,
            class_skew: 0.0,
            render_style: true,
            rare_threshold: 10,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_object_classes == 0 || self.num_action_classes == 0 {
            return Err(DataError::InvalidSpec(
                "class counts must be at least 1".into(),
            ));
        }
        if self.pairs_min == 0 || self.pairs_min > self.pairs_max {
            return Err(DataError::InvalidSpec(
                "pairs_min must be >= 1 and <= pairs_max".into(),
            ));
        }
        if self.num_action_classes > MAX_ACTION_PATTERNS {
            return Err(DataError::InvalidSpec(format!(
                "{} action classes requested but only {} distinct geometric patterns exist",
                self.num_action_classes, MAX_ACTION_PATTERNS
            )));
        }
        if self.image_size < 16 {
            return Err(DataError::InvalidSpec("image_size must be >= 16".into()));
        }
        Ok(())
    }
}

/// One HOI class: an (object class, action) pair with its training count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoiClassEntry {
    pub object_class: usize,
    pub action: usize,
    pub train_count: u64,
    pub rare: bool,
}

/// Table of all `C_o * C_a` HOI classes, indexed by
/// `object_class * C_a + action`.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiClassTable {
    pub entries: Vec<HoiClassEntry>,
    pub rare_threshold: u64,
    num_action_classes: usize,
}

impl HoiClassTable {
    pub fn from_dataset(dataset: &Dataset, rare_threshold: u64) -> Self {
        let (c_o, c_a) = (
            dataset.meta.num_object_classes,
            dataset.meta.num_action_classes,
        );
        let mut counts = vec![0u64; c_o * c_a];
        for ann in &dataset.annotations {
            for inst in &ann.instances {
                for &a in &inst.actions {
                    counts[inst.object_class * c_a + a] += 1;
                }
            }
        }
        let entries = counts
            .iter()
            .enumerate()
            .map(|(id, &count)| HoiClassEntry {
                object_class: id / c_a,
                action: id % c_a,
                train_count: count,
                rare: count < rare_threshold,
            })
            .collect();
        Self {
            entries,
            rare_threshold,
            num_action_classes: c_a,
        }
    }

    pub fn hoi_id(&self, object_class: usize, action: usize) -> usize {
        object_class * self.num_action_classes + action
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_action_classes(&self) -> usize {
        self.num_action_classes
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: record {record}: {source}")]
    Parse {
        path: PathBuf,
        record: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: missing header line")]
    MissingHeader { path: PathBuf },
    #[error("{path}: record {record} ({id}): field {field}: {reason}")]
    InvalidRecord {
        path: PathBuf,
        record: usize,
        id: String,
        field: &'static str,
        reason: String,
    },
    #[error("vocabulary mismatch: {left:?} vs {right:?}")]
    VocabMismatch {
        left: Box<DatasetMeta>,
        right: Box<DatasetMeta>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_instance(
    inst: &GtInstance,
    meta: &DatasetMeta,
    path: &Path,
    record: usize,
    id: &str,
) -> Result<(), DataError> {
    let invalid = |field: &'static str, reason: String| DataError::InvalidRecord {
        path: path.to_path_buf(),
        record,
        id: id.to_string(),
        field,
        reason,
    };
    if !inst.human_box.is_valid() {
        return Err(invalid(
            "human_box",
            format!("{:?} outside [0,1]", inst.human_box),
        ));
    }
    if !inst.object_box.is_valid() {
        return Err(invalid(
            "object_box",
            format!("{:?} outside [0,1]", inst.object_box),
        ));
    }
    if inst.object_class >= meta.num_object_classes {
        return Err(invalid(
            "object_class",
            format!("{} >= {}", inst.object_class, meta.num_object_classes),
        ));
    }
    if inst.actions.is_empty() {
        return Err(invalid(
            "actions",
            "ground truth needs at least one action".into(),
        ));
    }
    for &a in &inst.actions {
        if a >= meta.num_action_classes {
            return Err(invalid(
                "actions",
                format!("{} >= {}", a, meta.num_action_classes),
            ));
        }
    }
    Ok(())
}

pub fn save_annotations(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut line = serde_json::to_string(&dataset.meta).expect("meta serializes");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(io_err(path))?;
    for ann in &dataset.annotations {
        let mut line = serde_json::to_string(ann).expect("annotation serializes");
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_annotations(path: &Path) -> Result<Dataset, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let meta: DatasetMeta = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str(&line).map_err(|source| DataError::Parse {
                path: path.to_path_buf(),
                record: 0,
                source,
            })?
        }
        None => {
            return Err(DataError::MissingHeader {
                path: path.to_path_buf(),
            })
        }
    };
    let mut annotations = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: ImageAnnotation =
            serde_json::from_str(&line).map_err(|source| DataError::Parse {
                path: path.to_path_buf(),
                record: lineno,
                source,
            })?;
        for inst in &ann.instances {
            check_instance(inst, &meta, path, lineno, &ann.image_id)?;
        }
        annotations.push(ann);
    }
    Ok(Dataset { meta, annotations })
}

pub fn save_predictions(
    path: &Path,
    meta: &DatasetMeta,
    triplets: &[ScoredTriplet],
) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut line = serde_json::to_string(meta).expect("meta serializes");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(io_err(path))?;
    for t in triplets {
        let mut line = serde_json::to_string(t).expect("triplet serializes");
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_predictions(path: &Path) -> Result<(DatasetMeta, Vec<ScoredTriplet>), DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let meta: DatasetMeta = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str(&line).map_err(|source| DataError::Parse {
                path: path.to_path_buf(),
                record: 0,
                source,
            })?
        }
        None => {
            return Err(DataError::MissingHeader {
                path: path.to_path_buf(),
            })
        }
    };
    let mut triplets = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: ScoredTriplet = serde_json::from_str(&line).map_err(|source| DataError::Parse {
            path: path.to_path_buf(),
            record: lineno,
            source,
        })?;
        let invalid = |field: &'static str, reason: String| DataError::InvalidRecord {
            path: path.to_path_buf(),
            record: lineno,
            id: t.image_id.clone(),
            field,
            reason,
        };
        if t.object_class >= meta.num_object_classes {
            return Err(invalid(
                "object_class",
                format!("{} >= {}", t.object_class, meta.num_object_classes),
            ));
        }
        if t.action >= meta.num_action_classes {
            return Err(invalid(
                "action",
                format!("{} >= {}", t.action, meta.num_action_classes),
            ));
        }
        for (field, v) in [
            ("action_score", t.action_score),
            ("object_score", t.object_score),
            ("interactive_score", t.interactive_score),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(field, format!("{v} outside [0,1]")));
            }
        }
        if t.score != t.action_score * t.object_score * t.interactive_score {
            return Err(invalid(
                "score",
                "score must equal action_score * object_score * interactive_score".into(),
            ));
        }
        triplets.push(t);
    }
    Ok((meta, triplets))
}

pub fn save_class_table(path: &Path, table: &HoiClassTable) -> Result<(), DataError> {
    #[derive(Serialize)]
    struct Header {
        rare_threshold: u64,
        num_action_classes: usize,
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        rare_threshold: table.rare_threshold,
        num_action_classes: table.num_action_classes,
    };
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(io_err(path))?;
    for e in &table.entries {
        let mut line = serde_json::to_string(e).expect("entry serializes");
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_class_table(path: &Path) -> Result<HoiClassTable, DataError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Header {
        rare_threshold: u64,
        num_action_classes: usize,
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str(&line).map_err(|source| DataError::Parse {
                path: path.to_path_buf(),
                record: 0,
                source,
            })?
        }
        None => {
            return Err(DataError::MissingHeader {
                path: path.to_path_buf(),
            })
        }
    };
    let mut entries = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: HoiClassEntry = serde_json::from_str(&line).map_err(|source| DataError::Parse {
            path: path.to_path_buf(),
            record: lineno,
            source,
        })?;
        entries.push(e);
    }
    Ok(HoiClassTable {
        entries,
        rare_threshold: header.rare_threshold,
        num_action_classes: header.num_action_classes,
    })
}

/// Loads an image as an `(H*W, 3)` token matrix with entries in `[0, 1]`,
/// rows in row-major pixel order.
pub fn load_image_tokens(path: &Path) -> Result<ndarray::Array2<f64>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?
        .to_rgb8();
    Ok(image_to_tokens(&img))
}

pub fn image_to_tokens(img: &image::RgbImage) -> ndarray::Array2<f64> {
    let (w, h) = img.dimensions();
    let mut tokens = ndarray::Array2::zeros(((w * h) as usize, 3));
    for (y, x) in (0..h).flat_map(|y| (0..w).map(move |x| (y, x))) {
        let p = img.get_pixel(x, y);
        let row = (y * w + x) as usize;
        for c in 0..3 {
            tokens[[row, c]] = p.0[c] as f64 / 255.0;
        }
    }
    tokens
}
