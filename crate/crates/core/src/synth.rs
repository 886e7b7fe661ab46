//! Seeded synthetic worlds.
//!
//! Every image holds a few rectangular objects. Candidate boxes are jittered
//! copies of the objects plus random background boxes; segments are
//! perturbed copies of the objects, random distractor rectangles and, last,
//! the whole image. The whole-image segment is the largest one and has no
//! background pixels, which keeps every background normalizer at least the
//! size of the complement of a segment.
//!
//! Randomness: image `i` draws its layout from ChaCha8 seeded with `seed`
//! on stream `i`. The feature noise of a box is drawn from ChaCha8 keyed by
//! `(seed, image, box coordinates at 1/16 px)`, so the features of any box,
//! candidate or not, are a pure function of the world. Segment scores draw
//! from the layout stream after the boxes.
//!
//! Features of a box `b` whose best-overlapping object has class `k` and
//! IoU `u`:
//! - appearance: `u` on dimension `k`, `1 − u` on dimension `C`, plus noise;
//! - context: dimension `c` is 1 when an object of class `c` has its center
//!   inside `b` expanded by `context_rho`, plus noise;
//! - regression: the exact regression targets from `b` to that object (zero
//!   when `u = 0`), plus noise.
//!
//! A segment's score for class `c` is the logit of its best IoU with a class
//! `c` object (clamped to [0.01, 0.99]) plus noise.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bboxreg::{BoxFeatures, FeatureProvider, RegTargets};
use crate::dataset::{DatasetManifest, FeatureBundle, ImageEntry, ManifestFiles, RawDataset};
use crate::error::{Error, Result};
use crate::formats::{BoxRecord, FeatureMatrix, GroundTruthObject, SegScoreRecord};
use crate::geometry::{expand_box, iou, rect_iou, BoxF, ImageDims, PixelRect};
use crate::mask::SegmentMask;

pub const REG_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: usize,
    pub n_classes: usize,
    /// Objects per image are drawn uniformly from `1..=max_objects`.
    pub max_objects: usize,
    pub boxes_per_image: usize,
    /// Jittered candidate copies of every object.
    pub copies_per_object: usize,
    pub segments_per_image: usize,
    pub width: u32,
    pub height: u32,
    /// Std-dev of candidate corner jitter, relative to object size.
    pub box_jitter: f64,
    /// Std-dev of segment side erosion/dilation, relative to object size.
    pub segment_noise: f64,
    /// Std-dev of the segment score noise (in logits).
    pub score_noise: f64,
    pub appearance_noise: f64,
    pub context_noise: f64,
    pub regression_noise: f64,
    pub appearance_dim: usize,
    pub context_dim: usize,
    pub context_rho: f64,
    /// Leading fraction of images assigned to the `train` split.
    pub train_fraction: f64,
    /// Probability that an object is marked difficult.
    pub difficult_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 200,
            n_classes: 3,
            max_objects: 2,
            boxes_per_image: 24,
            copies_per_object: 3,
            segments_per_image: 8,
            width: 96,
            height: 96,
            box_jitter: 0.05,
            segment_noise: 0.05,
            score_noise: 0.5,
            appearance_noise: 0.3,
            context_noise: 0.3,
            regression_noise: 0.0,
            appearance_dim: 8,
            context_dim: 4,
            context_rho: 0.5,
            train_fraction: 0.5,
            difficult_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("synth config: {m}")));
        let counts = [
            ("n_images", self.n_images),
            ("n_classes", self.n_classes),
            ("max_objects", self.max_objects),
            ("boxes_per_image", self.boxes_per_image),
            ("segments_per_image", self.segments_per_image),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.width < 8 || self.height < 8 {
            return bad("images must be at least 8x8".into());
        }
        let noises = [
            self.box_jitter,
            self.segment_noise,
            self.score_noise,
            self.appearance_noise,
            self.context_noise,
            self.regression_noise,
            self.context_rho,
        ];
        if noises.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("noise levels and context_rho must be finite and non-negative".into());
        }
        if self.appearance_dim < self.n_classes + 1 {
            return bad(format!(
                "appearance_dim must be at least n_classes + 1 = {}",
                self.n_classes + 1
            ));
        }
        if self.context_dim < self.n_classes {
            return bad(format!(
                "context_dim must be at least n_classes = {}",
                self.n_classes
            ));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) || !(0.0..=1.0).contains(&self.difficult_fraction) {
            return bad("train_fraction and difficult_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (1..=self.n_classes).map(|c| format!("class{c}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub class: usize,
    pub bbox: BoxF,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub dims: ImageDims,
    pub split: String,
    pub objects: Vec<SynthObject>,
    pub boxes: Vec<BoxF>,
    pub segments: Vec<PixelRect>,
    /// `scores[segment][class]`.
    pub scores: Vec<Vec<f64>>,
}

/// A generated world. It also serves as the feature provider for boxes
/// that are not among the candidates.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub images: Vec<SynthImage>,
    index: HashMap<String, usize>,
}

fn normal(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(0.01, 0.99);
    (p / (1.0 - p)).ln()
}

/// A random box with sides between `lo` and `hi` of the image size.
fn random_box(rng: &mut impl Rng, dims: ImageDims, lo: f64, hi: f64) -> BoxF {
    let (w, h) = (dims.width as f64, dims.height as f64);
    let bw = (rng.random_range(lo..hi) * w).round().max(2.0);
    let bh = (rng.random_range(lo..hi) * h).round().max(2.0);
    let x1 = rng.random_range(0..=(w - bw) as u32) as f64;
    let y1 = rng.random_range(0..=(h - bh) as u32) as f64;
    BoxF {
        x1,
        y1,
        x2: x1 + bw - 1.0,
        y2: y1 + bh - 1.0,
    }
}

/// Perturbs every side by `N(0, sigma·size)`, rounds and clips; falls back
/// to the original when the result would be empty.
fn perturb(rng: &mut impl Rng, b: &BoxF, sigma: f64, dims: ImageDims) -> BoxF {
    let (w, h) = (b.width(), b.height());
    let out = BoxF {
        x1: (b.x1 + normal(rng, sigma * w)).round(),
        y1: (b.y1 + normal(rng, sigma * h)).round(),
        x2: (b.x2 + normal(rng, sigma * w)).round(),
        y2: (b.y2 + normal(rng, sigma * h)).round(),
    };
    if out.x1 > out.x2 || out.y1 > out.y2 {
        return *b;
    }
    out.clip(dims)
}

fn quantize(v: f64) -> [u8; 4] {
    ((v * 16.0).round() as i32).to_le_bytes()
}

impl SynthWorld {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let n_train = (config.train_fraction * config.n_images as f64).round() as usize;
        let images: Vec<SynthImage> = (0..config.n_images)
            .into_par_iter()
            .map(|i| Self::layout(config, i, i < n_train))
            .collect();
        let index = images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.id.clone(), i))
            .collect();
        Ok(Self {
            config: config.clone(),
            images,
            index,
        })
    }

    fn layout(cfg: &SynthConfig, i: usize, train: bool) -> SynthImage {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let dims = ImageDims::new(cfg.width, cfg.height);
        let n_obj = rng.random_range(1..=cfg.max_objects);
        let objects: Vec<SynthObject> = (0..n_obj)
            .map(|_| SynthObject {
                class: rng.random_range(0..cfg.n_classes),
                bbox: random_box(&mut rng, dims, 0.25, 0.6),
                difficult: rng.random_bool(cfg.difficult_fraction),
            })
            .collect();

        let mut boxes = Vec::with_capacity(cfg.boxes_per_image);
        'copies: for o in &objects {
            for _ in 0..cfg.copies_per_object {
                if boxes.len() == cfg.boxes_per_image {
                    break 'copies;
                }
                boxes.push(perturb(&mut rng, &o.bbox, cfg.box_jitter, dims));
            }
        }
        while boxes.len() < cfg.boxes_per_image {
            boxes.push(random_box(&mut rng, dims, 0.15, 0.6));
        }

        let mut segments = Vec::with_capacity(cfg.segments_per_image);
        for o in objects.iter().take(cfg.segments_per_image) {
            segments.push(perturb(&mut rng, &o.bbox, cfg.segment_noise, dims).round());
        }
        while segments.len() + 1 < cfg.segments_per_image {
            segments.push(random_box(&mut rng, dims, 0.1, 0.6).round());
        }
        if segments.len() < cfg.segments_per_image {
            segments.push(dims.full_box().round());
        }
        let scores = segments
            .iter()
            .map(|s| {
                (0..cfg.n_classes)
                    .map(|c| {
                        let best = objects
                            .iter()
                            .filter(|o| o.class == c)
                            .map(|o| rect_iou(s, &o.bbox.round()))
                            .fold(0.0, f64::max);
                        logit(best) + normal(&mut rng, cfg.score_noise)
                    })
                    .collect()
            })
            .collect();

        SynthImage {
            id: format!("img{i:05}"),
            dims,
            split: if train { "train" } else { "test" }.to_string(),
            objects,
            boxes,
            segments,
            scores,
        }
    }

    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Features of an arbitrary box of image `image`.
    pub fn box_features(&self, image: usize, b: &BoxF) -> BoxFeatures {
        let cfg = &self.config;
        let im = &self.images[image];
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&cfg.seed.to_le_bytes());
        key[8..12].copy_from_slice(&(image as u32).to_le_bytes());
        for (k, v) in [b.x1, b.y1, b.x2, b.y2].into_iter().enumerate() {
            key[16 + 4 * k..20 + 4 * k].copy_from_slice(&quantize(v));
        }
        let mut rng = ChaCha8Rng::from_seed(key);

        let mut best: Option<(&SynthObject, f64)> = None;
        for o in &im.objects {
            let v = iou(b, &o.bbox);
            if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((o, v));
            }
        }
        let c = cfg.n_classes;
        let mut appearance = vec![0.0f64; cfg.appearance_dim];
        let mut regression = [0.0f64; REG_DIM];
        match best {
            Some((o, u)) => {
                appearance[o.class] = u;
                appearance[c] = 1.0 - u;
                regression = RegTargets::new(b, &o.bbox).to_array();
            }
            None => appearance[c] = 1.0,
        }
        let expanded = expand_box(b, cfg.context_rho, im.dims);
        let mut context = vec![0.0f64; cfg.context_dim];
        for o in &im.objects {
            let (cx, cy) = o.bbox.center();
            if cx >= expanded.x1 && cx <= expanded.x2 + 1.0 && cy >= expanded.y1 && cy <= expanded.y2 + 1.0 {
                context[o.class] = 1.0;
            }
        }
        let mut noisy = |v: &[f64], sigma: f64| -> Vec<f32> {
            v.iter().map(|x| (x + normal(&mut rng, sigma)) as f32).collect()
        };
        BoxFeatures {
            appearance: noisy(&appearance, cfg.appearance_noise),
            context: noisy(&context, cfg.context_noise),
            regression: noisy(&regression, cfg.regression_noise),
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            class_names: self.config.class_names(),
            min_segment_pixels: Some(0),
            files: ManifestFiles {
                boxes: PathBuf::from("boxes.csv"),
                masks: PathBuf::from("masks.txt"),
                segment_scores: PathBuf::from("segment_scores.csv"),
                ground_truth: PathBuf::from("ground_truth.csv"),
                appearance: PathBuf::from("appearance.sdmf"),
                context: PathBuf::from("context.sdmf"),
                regression: Some(PathBuf::from("regression.sdmf")),
            },
            images: self
                .images
                .iter()
                .map(|im| ImageEntry {
                    id: im.id.clone(),
                    width: im.dims.width,
                    height: im.dims.height,
                    split: Some(im.split.clone()),
                })
                .collect(),
        }
    }

    /// The world as dataset files in memory.
    pub fn to_raw(&self) -> Result<RawDataset> {
        let cfg = &self.config;
        let feats: Vec<Vec<BoxFeatures>> = self
            .images
            .par_iter()
            .enumerate()
            .map(|(i, im)| im.boxes.iter().map(|b| self.box_features(i, b)).collect())
            .collect();
        let n_boxes: usize = self.images.iter().map(|im| im.boxes.len()).sum();
        let mut appearance = Vec::with_capacity(n_boxes * cfg.appearance_dim);
        let mut context = Vec::with_capacity(n_boxes * cfg.context_dim);
        let mut regression = Vec::with_capacity(n_boxes * REG_DIM);
        for f in feats.iter().flatten() {
            appearance.extend_from_slice(&f.appearance);
            context.extend_from_slice(&f.context);
            regression.extend_from_slice(&f.regression);
        }

        let mut boxes = Vec::with_capacity(n_boxes);
        let mut masks = Vec::new();
        let mut scores = Vec::new();
        let mut ground_truth = Vec::new();
        for im in &self.images {
            for (j, b) in im.boxes.iter().enumerate() {
                boxes.push(BoxRecord {
                    image_id: im.id.clone(),
                    box_id: j as u32,
                    bbox: *b,
                });
            }
            for (j, (s, sc)) in im.segments.iter().zip(&im.scores).enumerate() {
                masks.push(SegmentMask::from_rect(&im.id, j as u32, im.dims, *s)?);
                for (c, v) in sc.iter().enumerate() {
                    scores.push(SegScoreRecord {
                        image_id: im.id.clone(),
                        segment_id: j as u32,
                        class: c,
                        score: *v,
                    });
                }
            }
            for o in &im.objects {
                ground_truth.push(GroundTruthObject {
                    image_id: im.id.clone(),
                    class: o.class,
                    bbox: o.bbox,
                    difficult: o.difficult,
                });
            }
        }
        Ok(RawDataset {
            manifest: self.manifest(),
            boxes,
            masks,
            scores,
            ground_truth,
            appearance: FeatureMatrix::new(n_boxes, cfg.appearance_dim, appearance)?,
            context: FeatureMatrix::new(n_boxes, cfg.context_dim, context)?,
            regression: Some(FeatureMatrix::new(n_boxes, REG_DIM, regression)?),
        })
    }
}

impl FeatureProvider for SynthWorld {
    fn features(&self, bundle: &FeatureBundle, bbox: &BoxF) -> Result<BoxFeatures> {
        let i = self
            .image_index(&bundle.image_id)
            .ok_or_else(|| Error::Provider {
                image_id: bundle.image_id.clone(),
                x1: bbox.x1,
                y1: bbox.y1,
                x2: bbox.x2,
                y2: bbox.y2,
            })?;
        Ok(self.box_features(i, bbox))
    }
}

/// Generates a world and writes it as a dataset into `out`.
pub fn gen_synthetic(config: &SynthConfig, out: &Path) -> Result<SynthWorld> {
    let world = SynthWorld::generate(config)?;
    world.to_raw()?.write(out)?;
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::eval::mabo;
    use std::collections::BTreeMap;

    fn small() -> SynthConfig {
        SynthConfig {
            n_images: 12,
            ..SynthConfig::default()
        }
    }

    fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_synthetic(&small(), a.path()).unwrap();
        gen_synthetic(&small(), b.path()).unwrap();
        let ta = tree(a.path());
        assert_eq!(ta.len(), 8);
        assert_eq!(ta, tree(b.path()));
        let c = tempfile::tempdir().unwrap();
        gen_synthetic(&SynthConfig { seed: 1, ..small() }, c.path()).unwrap();
        assert_ne!(ta, tree(c.path()));
    }

    #[test]
    fn zero_jitter_gives_exact_candidates() {
        let cfg = SynthConfig {
            box_jitter: 0.0,
            ..small()
        };
        let world = SynthWorld::generate(&cfg).unwrap();
        let raw = world.to_raw().unwrap();
        let mut cands: BTreeMap<String, Vec<BoxF>> = BTreeMap::new();
        for b in &raw.boxes {
            cands.entry(b.image_id.clone()).or_default().push(b.bbox);
        }
        let abo = mabo(&cands, &raw.ground_truth, cfg.n_classes);
        assert_eq!(abo.mean, Some(1.0));
    }

    #[test]
    fn dataset_loads_and_features_match_provider() {
        let dir = tempfile::tempdir().unwrap();
        let world = gen_synthetic(&small(), dir.path()).unwrap();
        let ds = Dataset::load(dir.path(), None).unwrap();
        assert_eq!(ds.bundles.len(), 12);
        assert_eq!(ds.split("train").bundles.len(), 6);
        for b in &ds.bundles {
            assert_eq!(b.segments.len(), 8);
            for (row, c) in b.boxes.iter().enumerate() {
                let f = world.features(b, &c.bbox).unwrap();
                assert_eq!(f, BoxFeatures::from_bundle(b, row).unwrap());
            }
        }
    }

    #[test]
    fn noiseless_features_separate_classes() {
        let cfg = SynthConfig {
            appearance_noise: 0.0,
            context_noise: 0.0,
            ..small()
        };
        let world = SynthWorld::generate(&cfg).unwrap();
        for (i, im) in world.images.iter().enumerate() {
            for o in &im.objects {
                let f = world.box_features(i, &o.bbox);
                assert_eq!(f.appearance[o.class], 1.0);
                assert_eq!(f.appearance[cfg.n_classes], 0.0);
                assert_eq!(f.regression, vec![0.0; 4]);
            }
        }
    }

    #[test]
    fn true_segments_score_high() {
        let cfg = SynthConfig {
            segment_noise: 0.0,
            score_noise: 0.0,
            ..small()
        };
        let world = SynthWorld::generate(&cfg).unwrap();
        for im in &world.images {
            for (j, o) in im.objects.iter().enumerate() {
                assert_eq!(im.segments[j], o.bbox.round());
                assert!((im.scores[j][o.class] - logit(1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_config_rejected() {
        assert!(SynthConfig {
            n_images: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            appearance_dim: 3,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            box_jitter: -1.0,
            ..small()
        }
        .validate()
        .is_err());
    }
}
