//! Dataset directory I/O.
//!
//! Layout: `<root>/<split>/images/<id>.png` (8-bit grayscale PNG) plus
//! `<root>/<split>/annotations.json`:
//!
//! ```json
//! {
//!   "classes": ["scratch", ...],
//!   "samples": [
//!     { "id": "train_00000", "width": 64, "height": 64,
//!       "boxes": [ { "x1": 1.0, "y1": 2.0, "x2": 9.0, "y2": 11.0, "class": 0 } ] }
//!   ]
//! }
//! ```
//!
//! Coordinates are pixels, origin top-left, inclusive corners as real
//! numbers. A `meta.json` sidecar per split records generator seeds so
//! write→load roundtrips losslessly; externally produced datasets without
//! it load with seed 0.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::BBox;
use crate::error::{Error, Result};
use crate::synth::{SampleRecord, Split};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationFile {
    classes: Vec<String>,
    samples: Vec<AnnotationSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationSample {
    id: String,
    width: usize,
    height: usize,
    boxes: Vec<AnnotationBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    class: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct SplitMeta {
    seeds: BTreeMap<String, u64>,
}

/// An in-memory dataset: the ordered class list plus all records.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn available_splits(&self) -> Vec<Split> {
        Split::all()
            .into_iter()
            .filter(|s| self.records.iter().any(|r| r.split == *s))
            .collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes records grouped by split under `root`, creating directories.
pub fn write_dataset(root: &Path, classes: &[String], records: &[SampleRecord]) -> Result<()> {
    for split in Split::all() {
        let split_records: Vec<&SampleRecord> = records.iter().filter(|r| r.split == split).collect();
        if split_records.is_empty() {
            continue;
        }
        let split_dir = root.join(split.name());
        let images_dir = split_dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| Error::io(images_dir.display().to_string(), e))?;

        let mut samples = Vec::with_capacity(split_records.len());
        let mut meta = SplitMeta::default();
        for rec in &split_records {
            let img = image::GrayImage::from_raw(rec.width as u32, rec.height as u32, rec.image.clone())
                .ok_or_else(|| Error::Contract(format!("sample {}: image buffer size mismatch", rec.id)))?;
            let img_path = images_dir.join(format!("{}.png", rec.id));
            img.save(&img_path)
                .map_err(|e| Error::Parse {
                    path: img_path.display().to_string(),
                    msg: e.to_string(),
                })?;
            samples.push(AnnotationSample {
                id: rec.id.clone(),
                width: rec.width,
                height: rec.height,
                boxes: rec
                    .annotations
                    .iter()
                    .map(|b| AnnotationBox {
                        x1: b.x1,
                        y1: b.y1,
                        x2: b.x2,
                        y2: b.y2,
                        class: b.class_id.unwrap_or(0),
                    })
                    .collect(),
            });
            meta.seeds.insert(rec.id.clone(), rec.seed);
        }
        let ann = AnnotationFile {
            classes: classes.to_vec(),
            samples,
        };
        let ann_json = serde_json::to_vec_pretty(&ann)
            .map_err(|e| Error::parse("annotations.json", e.to_string()))?;
        write_file(&split_dir.join("annotations.json"), &ann_json)?;
        let meta_json = serde_json::to_vec_pretty(&meta)
            .map_err(|e| Error::parse("meta.json", e.to_string()))?;
        write_file(&split_dir.join("meta.json"), &meta_json)?;
    }
    Ok(())
}

fn load_split(root: &Path, split: Split, classes_out: &mut Option<Vec<String>>) -> Result<Vec<SampleRecord>> {
    let split_dir = root.join(split.name());
    let ann_path = split_dir.join("annotations.json");
    if !ann_path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(ann_path.display().to_string(), e))?;
    let ann: AnnotationFile = serde_json::from_str(&text)
        .map_err(|e| Error::parse(ann_path.display().to_string(), e.to_string()))?;

    match classes_out {
        Some(existing) => {
            if *existing != ann.classes {
                return Err(Error::parse(
                    ann_path.display().to_string(),
                    format!("class list {:?} differs from other splits {:?}", ann.classes, existing),
                ));
            }
        }
        None => *classes_out = Some(ann.classes.clone()),
    }

    let meta: SplitMeta = {
        let meta_path = split_dir.join("meta.json");
        if meta_path.exists() {
            let text = fs::read_to_string(&meta_path)
                .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::parse(meta_path.display().to_string(), e.to_string()))?
        } else {
            SplitMeta::default()
        }
    };

    let num_classes = ann.classes.len();
    let mut records = Vec::with_capacity(ann.samples.len());
    for sample in ann.samples {
        for (bi, b) in sample.boxes.iter().enumerate() {
            if b.class >= num_classes {
                return Err(Error::parse(
                    ann_path.display().to_string(),
                    format!(
                        "sample '{}' box {} references class {} but only {} classes are declared",
                        sample.id, bi, b.class, num_classes
                    ),
                ));
            }
            if !(b.x1 < b.x2 && b.y1 < b.y2) {
                return Err(Error::parse(
                    ann_path.display().to_string(),
                    format!("sample '{}' box {} has non-positive extent", sample.id, bi),
                ));
            }
        }
        let img_path = split_dir.join("images").join(format!("{}.png", sample.id));
        let img = image::open(&img_path)
            .map_err(|e| Error::Parse {
                path: img_path.display().to_string(),
                msg: e.to_string(),
            })?
            .into_luma8();
        if img.width() as usize != sample.width || img.height() as usize != sample.height {
            return Err(Error::parse(
                img_path.display().to_string(),
                format!(
                    "image is {}x{} but annotations declare {}x{}",
                    img.width(),
                    img.height(),
                    sample.width,
                    sample.height
                ),
            ));
        }
        let seed = meta.seeds.get(&sample.id).copied().unwrap_or(0);
        records.push(SampleRecord {
            id: sample.id,
            width: sample.width,
            height: sample.height,
            image: img.into_raw(),
            annotations: sample
                .boxes
                .iter()
                .map(|b| BBox::with_class(b.x1, b.y1, b.x2, b.y2, b.class))
                .collect(),
            seed,
            split,
        });
    }
    Ok(records)
}

/// Loads every split present under `root`. An empty or split-less directory
/// yields an empty dataset.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.exists() {
        return Err(Error::io(
            root.display().to_string(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let mut classes = None;
    let mut records = Vec::new();
    for split in Split::all() {
        records.extend(load_split(root, split, &mut classes)?);
    }
    Ok(Dataset {
        classes: classes.unwrap_or_default(),
        records,
    })
}

/// Split directories that contain annotations under `root`.
pub fn splits_on_disk(root: &Path) -> Vec<&'static str> {
    Split::all()
        .into_iter()
        .filter(|s| root.join(s.name()).join("annotations.json").exists())
        .map(|s| s.name())
        .collect()
}

pub fn annotations_path(root: &Path, split: Split) -> PathBuf {
    root.join(split.name()).join("annotations.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_split, GenConfig};

    fn toy_dataset(seed: u64) -> Dataset {
        let cfg = GenConfig {
            seed,
            ..Default::default()
        };
        let mut records = generate_split(&cfg, Split::Train, 6).unwrap();
        records.extend(generate_split(&cfg, Split::Val, 3).unwrap());
        records.extend(generate_split(&cfg, Split::Test, 2).unwrap());
        Dataset {
            classes: cfg.classes.clone(),
            records,
        }
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(11);
        write_dataset(dir.path(), &ds.classes, &ds.records).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.classes, ds.classes);
        assert_eq!(loaded.records.len(), ds.records.len());
        for (a, b) in ds.records.iter().zip(&loaded.records) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_directory_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.records.is_empty());
        assert!(ds.classes.is_empty());
    }

    #[test]
    fn missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert!(matches!(load_dataset(&missing), Err(Error::Io { .. })));
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let split_dir = dir.path().join("train");
        std::fs::create_dir_all(split_dir.join("images")).unwrap();
        let bad = r#"{
            "classes": ["scratch"],
            "samples": [
                { "id": "x", "width": 8, "height": 8,
                  "boxes": [ { "x1": 0.0, "y1": 0.0, "x2": 4.0, "y2": 4.0, "class": 3 } ] }
            ]
        }"#;
        std::fs::write(split_dir.join("annotations.json"), bad).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("class 3"), "{err}");
    }

    #[test]
    fn malformed_json_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let split_dir = dir.path().join("val");
        std::fs::create_dir_all(&split_dir).unwrap();
        std::fs::write(split_dir.join("annotations.json"), "{ not json").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("annotations.json"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn determinism_same_seed_same_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = toy_dataset(5);
        let b = toy_dataset(5);
        write_dataset(dir_a.path(), &a.classes, &a.records).unwrap();
        write_dataset(dir_b.path(), &b.classes, &b.records).unwrap();
        let ann_a = std::fs::read(dir_a.path().join("train/annotations.json")).unwrap();
        let ann_b = std::fs::read(dir_b.path().join("train/annotations.json")).unwrap();
        assert_eq!(ann_a, ann_b);
    }

    #[test]
    fn loader_accepts_external_schema_without_meta() {
        // hand-written dataset in the documented schema, no meta.json
        let dir = tempfile::tempdir().unwrap();
        let split_dir = dir.path().join("test");
        std::fs::create_dir_all(split_dir.join("images")).unwrap();
        let img = image::GrayImage::from_raw(8, 8, vec![100u8; 64]).unwrap();
        img.save(split_dir.join("images/ext_0.png")).unwrap();
        let ann = r#"{
            "classes": ["scratch", "inclusion"],
            "samples": [
                { "id": "ext_0", "width": 8, "height": 8,
                  "boxes": [ { "x1": 1.0, "y1": 1.5, "x2": 5.0, "y2": 6.0, "class": 1 } ] }
            ]
        }"#;
        std::fs::write(split_dir.join("annotations.json"), ann).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.records.len(), 1);
        let rec = &ds.records[0];
        assert_eq!(rec.split, Split::Test);
        assert_eq!(rec.seed, 0);
        assert_eq!(rec.annotations[0].class_id, Some(1));
        assert_eq!(rec.annotations[0].y1, 1.5);
    }

    #[test]
    fn split_membership_is_exclusive() {
        let ds = toy_dataset(3);
        let train = ds.split(Split::Train);
        let val = ds.split(Split::Val);
        for t in &train {
            assert!(!val.iter().any(|v| v.id == t.id && v.split == t.split));
        }
        let total = ds.split(Split::Train).len() + ds.split(Split::Val).len() + ds.split(Split::Test).len();
        assert_eq!(total, ds.records.len());
    }
}
