//! Dataset manifest and the per-image feature bundles built from it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{self, BoxRecord, FeatureMatrix, GroundTruthObject, SegScoreRecord};
use crate::geometry::{BoxF, ImageDims};
use crate::mask::SegmentMask;
use crate::segfeat::{largest_segment_area, Segment};

/// Segments smaller than this are dropped at ingest unless overridden.
pub const DEFAULT_MIN_SEGMENT_PIXELS: u64 = 1500;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub boxes: PathBuf,
    pub masks: PathBuf,
    pub segment_scores: PathBuf,
    pub ground_truth: PathBuf,
    pub appearance: PathBuf,
    pub context: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl ImageEntry {
    pub fn dims(&self) -> ImageDims {
        ImageDims::new(self.width, self.height)
    }
}

/// Index of a dataset: class names, image sizes and the files holding
/// everything else. Relative file paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    /// Dataset-specific ingest threshold; a configured value takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_segment_pixels: Option<u64>,
    pub files: ManifestFiles,
    pub images: Vec<ImageEntry>,
}

impl DatasetManifest {
    /// Accepts the manifest file itself, a directory holding `manifest.toml`,
    /// or a path missing its `.toml` extension.
    pub fn resolve(path: &Path) -> PathBuf {
        if path.is_dir() {
            return path.join(MANIFEST_FILE);
        }
        if !path.exists() {
            let with_ext = path.with_extension("toml");
            if with_ext.exists() {
                return with_ext;
            }
        }
        path.to_path_buf()
    }

    pub fn read(path: &Path) -> Result<(Self, PathBuf)> {
        let path = Self::resolve(path);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = toml::from_str(&text).map_err(|e| toml_error(&path, &text, e))?;
        m.validate(&path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, dir))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::parse(path, 0, "class_names is empty"));
        }
        let mut seen = HashSet::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::parse(path, 0, format!("image {} has zero size", img.id)));
            }
            if !seen.insert(img.id.as_str()) {
                return Err(Error::parse(path, 0, format!("duplicate image id {}", img.id)));
            }
        }
        Ok(())
    }
}

pub(crate) fn toml_error(path: &Path, text: &str, e: toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::parse(path, line, e.message().to_string())
}

/// Every record of a dataset as it appears on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub manifest: DatasetManifest,
    pub boxes: Vec<BoxRecord>,
    pub masks: Vec<SegmentMask>,
    pub scores: Vec<SegScoreRecord>,
    pub ground_truth: Vec<GroundTruthObject>,
    pub appearance: FeatureMatrix,
    pub context: FeatureMatrix,
    pub regression: Option<FeatureMatrix>,
}

impl RawDataset {
    pub fn read(manifest_path: &Path) -> Result<Self> {
        let (manifest, dir) = DatasetManifest::read(manifest_path)?;
        let f = &manifest.files;
        let at = |p: &Path| dir.join(p);
        Ok(Self {
            boxes: formats::read_boxes(&at(&f.boxes))?,
            masks: formats::read_masks(&at(&f.masks))?,
            scores: formats::read_segment_scores(&at(&f.segment_scores))?,
            ground_truth: formats::read_ground_truth(&at(&f.ground_truth))?,
            appearance: FeatureMatrix::read(&at(&f.appearance))?,
            context: FeatureMatrix::read(&at(&f.context))?,
            regression: f
                .regression
                .as_ref()
                .map(|p| FeatureMatrix::read(&at(p)))
                .transpose()?,
            manifest,
        })
    }

    /// Writes the manifest (as `manifest.toml`) and every file it names into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let f = &self.manifest.files;
        formats::write_boxes(&dir.join(&f.boxes), &self.boxes)?;
        formats::write_masks(&dir.join(&f.masks), &self.masks)?;
        formats::write_segment_scores(&dir.join(&f.segment_scores), &self.scores)?;
        formats::write_ground_truth(&dir.join(&f.ground_truth), &self.ground_truth)?;
        self.appearance.write(&dir.join(&f.appearance))?;
        self.context.write(&dir.join(&f.context))?;
        if let (Some(p), Some(m)) = (&f.regression, &self.regression) {
            m.write(&dir.join(p))?;
        }
        self.manifest.write(&dir.join(MANIFEST_FILE))
    }
}

/// One candidate box of an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateBox {
    pub box_id: u32,
    pub bbox: BoxF,
}

/// Everything needed to score the candidates of one image.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub image_id: String,
    pub dims: ImageDims,
    pub split: Option<String>,
    pub boxes: Vec<CandidateBox>,
    pub appearance: FeatureMatrix,
    pub context: FeatureMatrix,
    pub regression: Option<FeatureMatrix>,
    /// Sorted by segment id.
    pub segments: Vec<Segment>,
    /// Area of the largest segment, `None` when the image has no segments.
    pub largest: Option<u64>,
}

impl FeatureBundle {
    pub fn new(
        image_id: impl Into<String>,
        dims: ImageDims,
        boxes: Vec<CandidateBox>,
        appearance: FeatureMatrix,
        context: FeatureMatrix,
        mut segments: Vec<Segment>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        for (name, m) in [("appearance", &appearance), ("context", &context)] {
            if m.rows() != boxes.len() {
                return Err(Error::Dimension(format!(
                    "image {image_id}: {name} matrix has {} rows for {} boxes",
                    m.rows(),
                    boxes.len()
                )));
            }
        }
        segments.sort_by_key(Segment::id);
        let largest = largest_segment_area(&image_id, &segments).ok();
        Ok(Self {
            image_id,
            dims,
            split: None,
            boxes,
            appearance,
            context,
            regression: None,
            segments,
            largest,
        })
    }

    pub fn with_regression(mut self, reg: FeatureMatrix) -> Result<Self> {
        if reg.rows() != self.boxes.len() {
            return Err(Error::Dimension(format!(
                "image {}: regression matrix has {} rows for {} boxes",
                self.image_id,
                reg.rows(),
                self.boxes.len()
            )));
        }
        self.regression = Some(reg);
        Ok(self)
    }

    /// A copy without segments, which scores as if every `h_c` were NONE.
    pub fn without_segments(&self) -> Self {
        Self {
            segments: Vec::new(),
            largest: None,
            ..self.clone()
        }
    }
}

/// A loaded dataset: one bundle per image plus ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub bundles: Vec<FeatureBundle>,
    pub ground_truth: Vec<GroundTruthObject>,
}

impl Dataset {
    /// Loads a dataset; `min_pixels` overrides the manifest's ingest threshold.
    pub fn load(manifest_path: &Path, min_pixels: Option<u64>) -> Result<Self> {
        Self::from_raw(RawDataset::read(manifest_path)?, min_pixels)
    }

    pub fn from_raw(raw: RawDataset, min_pixels: Option<u64>) -> Result<Self> {
        let RawDataset {
            manifest,
            boxes,
            masks,
            scores,
            ground_truth,
            appearance,
            context,
            regression,
        } = raw;
        let n_classes = manifest.class_names.len();
        let threshold = min_pixels
            .or(manifest.min_segment_pixels)
            .unwrap_or(DEFAULT_MIN_SEGMENT_PIXELS)
            .max(1);

        for (name, m) in [
            ("appearance", Some(&appearance)),
            ("context", Some(&context)),
            ("regression", regression.as_ref()),
        ] {
            if let Some(m) = m {
                if m.rows() != boxes.len() {
                    return Err(Error::Dimension(format!(
                        "{name} matrix has {} rows, boxes file has {} boxes",
                        m.rows(),
                        boxes.len()
                    )));
                }
            }
        }

        let index: HashMap<&str, usize> = manifest
            .images
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect();
        let lookup = |id: &str, what: &str| -> Result<usize> {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("{what} refers to unknown image {id}")))
        };

        let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); manifest.images.len()];
        let mut box_ids: Vec<HashSet<u32>> = vec![HashSet::new(); manifest.images.len()];
        for (row, b) in boxes.iter().enumerate() {
            let img = lookup(&b.image_id, "box")?;
            if !box_ids[img].insert(b.box_id) {
                return Err(Error::Invalid(format!(
                    "duplicate box id {} in image {}",
                    b.box_id, b.image_id
                )));
            }
            rows_of[img].push(row);
        }

        let mut score_map: HashMap<(&str, u32), Vec<Option<f64>>> = HashMap::new();
        for s in &scores {
            if s.class >= n_classes {
                return Err(Error::Invalid(format!(
                    "segment score for class {} but only {n_classes} classes",
                    s.class + 1
                )));
            }
            score_map
                .entry((s.image_id.as_str(), s.segment_id))
                .or_insert_with(|| vec![None; n_classes])[s.class] = Some(s.score);
        }

        let mut segs_of: Vec<Vec<Segment>> = vec![Vec::new(); manifest.images.len()];
        let mut seg_ids: Vec<HashSet<u32>> = vec![HashSet::new(); manifest.images.len()];
        for m in masks {
            let img = lookup(&m.image_id, "mask")?;
            let entry = &manifest.images[img];
            if m.height != entry.height || m.width != entry.width {
                return Err(Error::Invalid(format!(
                    "mask {} of image {} is {}x{}, image is {}x{}",
                    m.segment_id, m.image_id, m.height, m.width, entry.height, entry.width
                )));
            }
            if !seg_ids[img].insert(m.segment_id) {
                return Err(Error::Invalid(format!(
                    "duplicate segment id {} in image {}",
                    m.segment_id, m.image_id
                )));
            }
            if m.pixel_count() < threshold {
                continue;
            }
            let s = score_map
                .get(&(m.image_id.as_str(), m.segment_id))
                .and_then(|v| v.iter().copied().collect::<Option<Vec<f64>>>())
                .ok_or_else(|| {
                    Error::Invalid(format!(
                        "segment {} of image {} lacks scores for some of the {n_classes} classes",
                        m.segment_id, m.image_id
                    ))
                })?;
            segs_of[img].push(Segment::new(m, s));
        }

        for g in &ground_truth {
            let img = lookup(&g.image_id, "ground truth")?;
            if g.class >= n_classes {
                return Err(Error::Invalid(format!(
                    "ground truth class {} out of range",
                    g.class + 1
                )));
            }
            if !g.bbox.is_inside(manifest.images[img].dims()) {
                return Err(Error::Invalid(format!(
                    "ground truth box in image {} exceeds the image bounds",
                    g.image_id
                )));
            }
        }

        let gather = |m: &FeatureMatrix, rows: &[usize]| -> FeatureMatrix {
            let mut out = FeatureMatrix::zeros(0, m.cols());
            for &r in rows {
                out.push_row(m.row(r).unwrap()).unwrap();
            }
            out
        };

        let mut bundles = Vec::with_capacity(manifest.images.len());
        for ((entry, rows), segs) in manifest.images.iter().zip(rows_of).zip(segs_of) {
            let cands = rows
                .iter()
                .map(|&r| CandidateBox {
                    box_id: boxes[r].box_id,
                    bbox: boxes[r].bbox,
                })
                .collect();
            let mut bundle = FeatureBundle::new(
                entry.id.clone(),
                entry.dims(),
                cands,
                gather(&appearance, &rows),
                gather(&context, &rows),
                segs,
            )?;
            bundle.split = entry.split.clone();
            if let Some(reg) = &regression {
                bundle = bundle.with_regression(gather(reg, &rows))?;
            }
            bundles.push(bundle);
        }

        Ok(Self {
            class_names: manifest.class_names,
            bundles,
            ground_truth,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn appearance_dim(&self) -> usize {
        self.bundles.first().map_or(0, |b| b.appearance.cols())
    }

    pub fn context_dim(&self) -> usize {
        self.bundles.first().map_or(0, |b| b.context.cols())
    }

    /// Keeps only the images tagged with `split`.
    pub fn split(&self, split: &str) -> Dataset {
        let bundles: Vec<FeatureBundle> = self
            .bundles
            .iter()
            .filter(|b| b.split.as_deref() == Some(split))
            .cloned()
            .collect();
        let keep: HashSet<&str> = bundles.iter().map(|b| b.image_id.as_str()).collect();
        let ground_truth = self
            .ground_truth
            .iter()
            .filter(|g| keep.contains(g.image_id.as_str()))
            .cloned()
            .collect();
        Dataset {
            class_names: self.class_names.clone(),
            bundles,
            ground_truth,
        }
    }

    /// Candidate boxes grouped by image id.
    pub fn candidates(&self) -> BTreeMap<String, Vec<BoxF>> {
        self.bundles
            .iter()
            .map(|b| (b.image_id.clone(), b.boxes.iter().map(|c| c.bbox).collect()))
            .collect()
    }

    /// Ground truth grouped by image id.
    pub fn gt_by_image(&self) -> BTreeMap<&str, Vec<&GroundTruthObject>> {
        let mut map: BTreeMap<&str, Vec<&GroundTruthObject>> = BTreeMap::new();
        for g in &self.ground_truth {
            map.entry(g.image_id.as_str()).or_default().push(g);
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelRect;

    fn tiny_raw() -> RawDataset {
        let dims = ImageDims::new(20, 10);
        let mask = |id, r| SegmentMask::from_rect("a", id, dims, r).unwrap();
        RawDataset {
            manifest: DatasetManifest {
                class_names: vec!["cat".into(), "dog".into()],
                min_segment_pixels: Some(10),
                files: ManifestFiles {
                    boxes: "boxes.csv".into(),
                    masks: "masks.txt".into(),
                    segment_scores: "scores.csv".into(),
                    ground_truth: "gt.csv".into(),
                    appearance: "app.sdmf".into(),
                    context: "ctx.sdmf".into(),
                    regression: None,
                },
                images: vec![ImageEntry {
                    id: "a".into(),
                    width: 20,
                    height: 10,
                    split: Some("train".into()),
                }],
            },
            boxes: vec![
                BoxRecord {
                    image_id: "a".into(),
                    box_id: 0,
                    bbox: BoxF {
                        x1: 0.0,
                        y1: 0.0,
                        x2: 4.0,
                        y2: 4.0,
                    },
                },
                BoxRecord {
                    image_id: "a".into(),
                    box_id: 1,
                    bbox: BoxF {
                        x1: 5.0,
                        y1: 0.0,
                        x2: 9.0,
                        y2: 9.0,
                    },
                },
            ],
            masks: vec![
                mask(
                    7,
                    PixelRect {
                        x1: 0,
                        y1: 0,
                        x2: 4,
                        y2: 4,
                    },
                ),
                mask(
                    3,
                    PixelRect {
                        x1: 0,
                        y1: 0,
                        x2: 2,
                        y2: 2,
                    },
                ),
            ],
            scores: (0..2)
                .flat_map(|c| {
                    [7u32, 3].map(|s| SegScoreRecord {
                        image_id: "a".into(),
                        segment_id: s,
                        class: c,
                        score: 0.5,
                    })
                })
                .collect(),
            ground_truth: vec![GroundTruthObject {
                image_id: "a".into(),
                class: 1,
                bbox: BoxF {
                    x1: 0.0,
                    y1: 0.0,
                    x2: 4.0,
                    y2: 4.0,
                },
                difficult: false,
            }],
            appearance: FeatureMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            context: FeatureMatrix::new(2, 1, vec![5.0, 6.0]).unwrap(),
            regression: None,
        }
    }

    #[test]
    fn ingest_filters_small_segments() {
        let ds = Dataset::from_raw(tiny_raw(), None).unwrap();
        let b = &ds.bundles[0];
        assert_eq!(b.segments.len(), 1);
        assert_eq!(b.segments[0].id(), 7);
        assert_eq!(b.largest, Some(25));
        let all = Dataset::from_raw(tiny_raw(), Some(0)).unwrap();
        // sorted by id, and a 9 px segment survives threshold 0
        let ids: Vec<u32> = all.bundles[0].segments.iter().map(Segment::id).collect();
        assert_eq!(ids, vec![3, 7]);
        let none = Dataset::from_raw(tiny_raw(), Some(1500)).unwrap();
        assert!(none.bundles[0].segments.is_empty());
        assert_eq!(none.bundles[0].largest, None);
    }

    #[test]
    fn ingest_rejects_inconsistencies() {
        let mut r = tiny_raw();
        r.boxes[1].image_id = "zz".into();
        assert!(Dataset::from_raw(r, None).is_err());

        let mut r = tiny_raw();
        r.appearance = FeatureMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(Dataset::from_raw(r, None), Err(Error::Dimension(_))));

        let mut r = tiny_raw();
        r.scores.pop();
        assert!(Dataset::from_raw(r, Some(0)).is_err());

        let mut r = tiny_raw();
        r.ground_truth[0].bbox.x2 = 25.0;
        assert!(Dataset::from_raw(r, None).is_err());

        let mut r = tiny_raw();
        r.boxes[1].box_id = 0;
        assert!(Dataset::from_raw(r, None).is_err());
    }

    #[test]
    fn raw_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let raw = tiny_raw();
        raw.write(dir.path()).unwrap();
        let back = RawDataset::read(dir.path()).unwrap();
        assert_eq!(back, raw);
        // manifest path without extension resolves
        let again = RawDataset::read(&dir.path().join("manifest")).unwrap();
        assert_eq!(again.manifest, raw.manifest);
    }

    #[test]
    fn manifest_roundtrip_is_semantic_identity() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_raw().manifest;
        let p = dir.path().join("m.toml");
        m.write(&p).unwrap();
        let (back, base) = DatasetManifest::read(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(base, dir.path());
    }

    #[test]
    fn manifest_errors_are_positioned() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        std::fs::write(&p, "class_names = [\"a\"]\n\n[files]\nboxes = 3\n").unwrap();
        match DatasetManifest::read(&p) {
            Err(Error::Parse { line, .. }) => assert!(line >= 3, "line {line}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_filters_images_and_gt() {
        let ds = Dataset::from_raw(tiny_raw(), None).unwrap();
        assert_eq!(ds.split("train").bundles.len(), 1);
        let test = ds.split("test");
        assert!(test.bundles.is_empty() && test.ground_truth.is_empty());
    }
}
