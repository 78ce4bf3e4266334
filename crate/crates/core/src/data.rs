//! Dataset ingestion, split protocols, and a synthetic dataset generator.
//!
//! Real datasets come in as a directory of images plus a manifest: one line
//! per image, `<path> <label,label,...>`, paths relative to the manifest.
//! Images are binary PPM (P6) or PGM (P5); anything else should be converted
//! on export. Sample ids are the zero-based manifest line positions, so the
//! manifest order is the dataset order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Rng;
use crate::types::{LabelSet, Sample, SplitSpec, TypeError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {what}")]
    BadManifest { line: usize, what: String },
    #[error("{path}: {what}")]
    BadImage { path: String, what: String },
    #[error("invalid dataset config: {0}")]
    BadConfig(String),
    #[error("sample {id} has {count} labels; this protocol needs single-label data")]
    MultiLabelSample { id: u64, count: usize },
    #[error("class {class} has {available} samples, protocol needs {needed}")]
    ShortClass {
        class: u32,
        needed: usize,
        available: usize,
    },
    #[error("dataset has {available} usable samples, protocol needs {needed}")]
    ShortDataset { needed: usize, available: usize },
    #[error("bad split file: {0}")]
    BadSplitFile(String),
    #[error(transparent)]
    Type(#[from] TypeError),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Synthetic dataset shape: `classes * per_class` images of
/// `side x side` pixels, three channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub noise: f64,
    #[serde(default)]
    pub multi_label: bool,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::BadConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.per_class == 0 {
            return Err(DataError::BadConfig("per_class must be positive".into()));
        }
        if self.side == 0 {
            return Err(DataError::BadConfig("side must be positive".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(DataError::BadConfig(format!(
                "noise must be non-negative, got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

/// Noise-free signature image for one class: a class-specific sinusoid
/// across all channels plus a bright blob at a class-specific position.
pub fn class_pattern(class: usize, classes: usize, side: usize) -> Array3<f64> {
    let golden = 0.618_033_988_749_894_9_f64;
    let fx = 1 + class % 3;
    let fy = 1 + (class / 3) % 3;
    let phase = std::f64::consts::TAU * ((class as f64 * golden).fract());
    let grid = (classes as f64).sqrt().ceil() as usize;
    let bx = ((class % grid) as f64 + 0.5) / grid as f64 * side as f64;
    let by = (((class / grid) % grid) as f64 + 0.5) / grid as f64 * side as f64;
    let sigma = side as f64 / 8.0;
    let blob_channel = class % 3;
    let mut out = Array3::zeros((3, side, side));
    for ch in 0..3 {
        let channel_shift = ch as f64 * std::f64::consts::TAU / 3.0;
        for y in 0..side {
            for x in 0..side {
                let angle = std::f64::consts::TAU * (fx * x + fy * y) as f64 / side as f64;
                let mut v = 0.5 + 0.3 * (angle + phase + channel_shift).sin();
                if ch == blob_channel {
                    let dx = x as f64 - bx;
                    let dy = y as f64 - by;
                    v += 0.35 * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
                out[[ch, y, x]] = v;
            }
        }
    }
    out
}

/// Generates the dataset. Single-label mode emits `per_class` images per
/// class in class order; multi-label mode keeps the same sample count but
/// overlays 1 to 3 class patterns per image.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Sample>, DataError> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let patterns: Vec<Array3<f64>> = (0..cfg.classes)
        .map(|c| class_pattern(c, cfg.classes, cfg.side))
        .collect();
    let total = cfg.classes * cfg.per_class;
    let mut out = Vec::with_capacity(total);
    for id in 0..total as u64 {
        let (base, labels) = if cfg.multi_label {
            let count = (1 + rng.index(3)).min(cfg.classes);
            let mut choices: Vec<usize> = (0..cfg.classes).collect();
            rng.shuffle(&mut choices);
            choices.truncate(count);
            let mut base = Array3::zeros((3, cfg.side, cfg.side));
            for &c in &choices {
                base += &patterns[c];
            }
            base /= count as f64;
            let labels = LabelSet::new(choices.iter().map(|&c| c as u32))?;
            (base, labels)
        } else {
            let class = id as usize / cfg.per_class;
            (patterns[class].clone(), LabelSet::single(class as u32))
        };
        let mut pixels = base;
        for v in pixels.iter_mut() {
            *v = (*v + cfg.noise * rng.normal()).clamp(0.0, 1.0);
        }
        out.push(Sample::new(id, pixels, labels)?);
    }
    Ok(out)
}

/// Nearest-neighbor resize; identity when the size already matches.
pub fn resize_nearest(img: &Array3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (c, src_h, src_w) = img.dim();
    if (src_h, src_w) == (height, width) {
        return img.clone();
    }
    let mut out = Array3::zeros((c, height, width));
    for ch in 0..c {
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * src_h as f64 / height as f64) as usize).min(src_h - 1);
            for x in 0..width {
                let sx =
                    (((x as f64 + 0.5) * src_w as f64 / width as f64) as usize).min(src_w - 1);
                out[[ch, y, x]] = img[[ch, sy, sx]];
            }
        }
    }
    out
}

/// Writes a binary PPM, quantizing [0,1] to 8-bit.
pub fn write_ppm(path: &Path, img: &Array3<f64>) -> Result<(), DataError> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(DataError::BadImage {
            path: path.display().to_string(),
            what: format!("expected 3 channels, got {c}"),
        });
    }
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    write!(out, "P6\n{w} {h}\n255\n").map_err(|e| io_err(path, e))?;
    let mut row = Vec::with_capacity(w * 3);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for ch in 0..3 {
                row.push((img[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out.write_all(&row).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads a binary PPM (P6) or PGM (P5) into [0,1] floats; grayscale is
/// replicated across the three channels.
pub fn read_ppm(path: &Path) -> Result<Array3<f64>, DataError> {
    let bad = |what: String| DataError::BadImage {
        path: path.display().to_string(),
        what,
    };
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, DataError> {
        // skip whitespace and # comments between header fields
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::BadImage {
                path: path.display().to_string(),
                what: "truncated header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes)?;
    let channels = match magic.as_str() {
        "P6" => 3usize,
        "P5" => 1usize,
        other => return Err(bad(format!("unsupported format {other:?}"))),
    };
    let w: usize = token(&bytes)?
        .parse()
        .map_err(|_| bad("bad width".into()))?;
    let h: usize = token(&bytes)?
        .parse()
        .map_err(|_| bad("bad height".into()))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| bad("bad maxval".into()))?;
    if maxval != 255 {
        return Err(bad(format!("only maxval 255 is supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero-sized image".into()));
    }
    pos += 1; // single whitespace byte after maxval
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(bad(format!(
            "pixel data truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let data = &bytes[pos..pos + need];
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let src = (y * w + x) * channels + if channels == 3 { ch } else { 0 };
                out[[ch, y, x]] = data[src] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Loads every manifest entry, resizing to `(height, width)` when given.
pub fn load_manifest(
    manifest: &Path,
    resize_to: Option<(usize, usize)>,
) -> Result<Vec<Sample>, DataError> {
    let entries = read_manifest_labels(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(entries.len());
    for (id, (rel, labels)) in entries.into_iter().enumerate() {
        let path = base.join(&rel);
        let mut img = read_ppm(&path)?;
        if let Some((h, w)) = resize_to {
            img = resize_nearest(&img, h, w);
        }
        out.push(Sample::new(id as u64, img, labels)?);
    }
    Ok(out)
}

/// Reads only paths and labels, without decoding any image.
pub fn read_manifest_labels(manifest: &Path) -> Result<Vec<(PathBuf, LabelSet)>, DataError> {
    let file = File::open(manifest).map_err(|e| io_err(manifest, e))?;
    let mut out = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(manifest, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let path = parts.next().unwrap();
        let labels_text = parts.next().ok_or_else(|| DataError::BadManifest {
            line: line_no + 1,
            what: "expected `<path> <label,label,...>`".into(),
        })?;
        if parts.next().is_some() {
            return Err(DataError::BadManifest {
                line: line_no + 1,
                what: "unexpected trailing fields".into(),
            });
        }
        let mut labels = Vec::new();
        for piece in labels_text.split(',') {
            let label: u32 = piece.parse().map_err(|_| DataError::BadManifest {
                line: line_no + 1,
                what: format!("bad label {piece:?}"),
            })?;
            labels.push(label);
        }
        let labels = LabelSet::new(labels).map_err(|e| DataError::BadManifest {
            line: line_no + 1,
            what: e.to_string(),
        })?;
        out.push((PathBuf::from(path), labels));
    }
    Ok(out)
}

/// Writes `samples` as PPM files plus a manifest into `dir`; returns the
/// manifest path.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf, DataError> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest =
        BufWriter::new(File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?);
    for sample in samples {
        let rel = format!("images/{:06}.ppm", sample.id);
        write_ppm(&dir.join(&rel), &sample.pixels)?;
        let labels: Vec<String> = sample.labels.iter().map(|l| l.to_string()).collect();
        writeln!(manifest, "{rel} {}", labels.join(",")).map_err(|e| io_err(&manifest_path, e))?;
    }
    manifest.flush().map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest_path)
}

/// How a benchmark split is drawn from a labeled corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolKind {
    /// Fixed counts sampled inside every class; remainder is the database.
    PerClass { train: usize, test: usize, val: usize },
    /// Fixed totals sampled across the whole corpus.
    Totals { train: usize, test: usize, val: usize },
    /// Keep a seeded subset of classes, then sample per kept class.
    ClassSubset {
        classes: usize,
        train: usize,
        test: usize,
        val: usize,
    },
    /// Keep images carrying at least one of the most frequent tags, then
    /// sample totals from the kept pool.
    TopTags {
        tags: usize,
        train: usize,
        test: usize,
        val: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProtocol {
    pub name: String,
    pub kind: ProtocolKind,
}

impl DatasetProtocol {
    pub fn cifar10() -> Self {
        DatasetProtocol {
            name: "cifar10".into(),
            kind: ProtocolKind::PerClass {
                train: 500,
                test: 100,
                val: 100,
            },
        }
    }

    pub fn nuswide() -> Self {
        DatasetProtocol {
            name: "nuswide".into(),
            kind: ProtocolKind::TopTags {
                tags: 21,
                train: 10_500,
                test: 2_100,
                val: 2_100,
            },
        }
    }

    pub fn coco() -> Self {
        DatasetProtocol {
            name: "coco".into(),
            kind: ProtocolKind::Totals {
                train: 10_000,
                test: 5_000,
                val: 5_000,
            },
        }
    }

    pub fn imagenet() -> Self {
        DatasetProtocol {
            name: "imagenet".into(),
            kind: ProtocolKind::ClassSubset {
                classes: 100,
                train: 130,
                test: 25,
                val: 25,
            },
        }
    }

    /// Preset by name, or `None` for protocols that need explicit counts.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "cifar10" => Some(Self::cifar10()),
            "nuswide" => Some(Self::nuswide()),
            "coco" => Some(Self::coco()),
            "imagenet" => Some(Self::imagenet()),
            _ => None,
        }
    }
}

/// A drawn split plus whatever the protocol decided along the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub split: SplitSpec,
    /// Classes kept by a class-subset protocol, in selection order.
    pub retained_classes: Option<Vec<u32>>,
    /// Tags kept by a top-tags protocol, most frequent first.
    pub retained_tags: Option<Vec<u32>>,
}

/// The most frequent `count` tags, ties broken by smaller tag id.
pub fn most_frequent_tags(labels: &[LabelSet], count: usize) -> Vec<u32> {
    let mut freq: BTreeMap<u32, usize> = BTreeMap::new();
    for set in labels {
        for tag in set.iter() {
            *freq.entry(tag).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(u32, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(count).map(|(tag, _)| tag).collect()
}

fn single_label(id: u64, set: &LabelSet) -> Result<u32, DataError> {
    let mut it = set.iter();
    let first = it.next().expect("label sets are non-empty");
    if it.next().is_some() {
        return Err(DataError::MultiLabelSample {
            id,
            count: set.len(),
        });
    }
    Ok(first)
}

fn take_chunks(
    mut ids: Vec<u64>,
    rng: &mut Rng,
    train: usize,
    test: usize,
    val: usize,
) -> (Vec<u64>, Vec<u64>, Vec<u64>, Vec<u64>) {
    rng.shuffle(&mut ids);
    let db = ids.split_off(train + test + val);
    let val_ids = ids.split_off(train + test);
    let test_ids = ids.split_off(train);
    (ids, test_ids, val_ids, db)
}

/// Draws the split. `labels[i]` is the label set of sample id `i`; the
/// result is a pure function of `(labels, protocol, seed)`.
pub fn build_split(
    protocol: &DatasetProtocol,
    labels: &[LabelSet],
    seed: u64,
) -> Result<SplitOutcome, DataError> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut val = Vec::new();
    let mut db = Vec::new();
    let mut retained_classes = None;
    let mut retained_tags = None;
    match protocol.kind {
        ProtocolKind::PerClass {
            train: tr,
            test: te,
            val: va,
        } => {
            let by_class = group_by_class(labels)?;
            sample_classes(by_class.iter(), &mut rng, tr, te, va, &mut train, &mut test, &mut val, &mut db)?;
        }
        ProtocolKind::Totals {
            train: tr,
            test: te,
            val: va,
        } => {
            let needed = tr + te + va;
            if labels.len() < needed {
                return Err(DataError::ShortDataset {
                    needed,
                    available: labels.len(),
                });
            }
            let ids: Vec<u64> = (0..labels.len() as u64).collect();
            let (a, b, c, d) = take_chunks(ids, &mut rng, tr, te, va);
            (train, test, val, db) = (a, b, c, d);
        }
        ProtocolKind::ClassSubset {
            classes,
            train: tr,
            test: te,
            val: va,
        } => {
            let by_class = group_by_class(labels)?;
            if by_class.len() < classes {
                return Err(DataError::BadConfig(format!(
                    "protocol keeps {classes} classes but the dataset has {}",
                    by_class.len()
                )));
            }
            let mut all_classes: Vec<u32> = by_class.keys().copied().collect();
            rng.shuffle(&mut all_classes);
            let kept: Vec<u32> = all_classes.into_iter().take(classes).collect();
            let kept_sorted: std::collections::BTreeSet<u32> = kept.iter().copied().collect();
            sample_classes(
                by_class.iter().filter(|(c, _)| kept_sorted.contains(c)),
                &mut rng,
                tr,
                te,
                va,
                &mut train,
                &mut test,
                &mut val,
                &mut db,
            )?;
            retained_classes = Some(kept);
        }
        ProtocolKind::TopTags {
            tags,
            train: tr,
            test: te,
            val: va,
        } => {
            let top = most_frequent_tags(labels, tags);
            let tag_set: std::collections::BTreeSet<u32> = top.iter().copied().collect();
            let ids: Vec<u64> = labels
                .iter()
                .enumerate()
                .filter(|(_, set)| set.iter().any(|t| tag_set.contains(&t)))
                .map(|(i, _)| i as u64)
                .collect();
            let needed = tr + te + va;
            if ids.len() < needed {
                return Err(DataError::ShortDataset {
                    needed,
                    available: ids.len(),
                });
            }
            let (a, b, c, d) = take_chunks(ids, &mut rng, tr, te, va);
            (train, test, val, db) = (a, b, c, d);
            retained_tags = Some(top);
        }
    }
    for list in [&mut train, &mut test, &mut val, &mut db] {
        list.sort_unstable();
    }
    let split = SplitSpec {
        train_ids: train,
        test_ids: test,
        val_ids: val,
        database_ids: db,
    };
    debug_assert!(split.is_disjoint());
    Ok(SplitOutcome {
        split,
        retained_classes,
        retained_tags,
    })
}

fn group_by_class(labels: &[LabelSet]) -> Result<BTreeMap<u32, Vec<u64>>, DataError> {
    let mut by_class: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for (id, set) in labels.iter().enumerate() {
        let class = single_label(id as u64, set)?;
        by_class.entry(class).or_default().push(id as u64);
    }
    Ok(by_class)
}

#[allow(clippy::too_many_arguments)]
fn sample_classes<'a>(
    classes: impl Iterator<Item = (&'a u32, &'a Vec<u64>)>,
    rng: &mut Rng,
    train: usize,
    test: usize,
    val: usize,
    train_out: &mut Vec<u64>,
    test_out: &mut Vec<u64>,
    val_out: &mut Vec<u64>,
    db_out: &mut Vec<u64>,
) -> Result<(), DataError> {
    let needed = train + test + val;
    for (&class, ids) in classes {
        if ids.len() < needed {
            return Err(DataError::ShortClass {
                class,
                needed,
                available: ids.len(),
            });
        }
        let (a, b, c, d) = take_chunks(ids.clone(), rng, train, test, val);
        train_out.extend(a);
        test_out.extend(b);
        val_out.extend(c);
        db_out.extend(d);
    }
    Ok(())
}

/// On-disk record of a drawn split; loading one bypasses sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub protocol: String,
    pub seed: u64,
    pub retained_classes: Option<Vec<u32>>,
    pub retained_tags: Option<Vec<u32>>,
    pub split: SplitSpec,
}

pub fn save_split(path: &Path, split: &SplitFile) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    serde_json::to_writer_pretty(&mut w, split)
        .map_err(|e| DataError::BadSplitFile(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<SplitFile, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let split: SplitFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| DataError::BadSplitFile(e.to_string()))?;
    if !split.split.is_disjoint() {
        return Err(DataError::BadSplitFile(
            "split parts share sample ids".into(),
        ));
    }
    Ok(split)
}
