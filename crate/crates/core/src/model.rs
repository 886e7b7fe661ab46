//! Box scoring with per-class segment selection, and per-image detection.
//!
//! A detector for class `d` scores a box `p` as
//!
//! ```text
//! f(p) = w_app·φ_app(p) + w_ctx·φ_ctx(p) + Σ_c max_{h_c} w_seg,c·φ_seg(p, h_c) + b
//! ```
//!
//! Segment features carry no pairwise terms between classes, so maximizing
//! each `h_c` independently maximizes the joint sum exactly.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureBundle;
use crate::error::{Error, Result};
use crate::formats::create;
use crate::geometry::{iou, BoxF};
use crate::segfeat::{geometry_features, segclass_feat, GridSpec, Segment};

pub const DEFAULT_NMS_IOU: f64 = 0.3;
pub const DEFAULT_TOP_K: usize = 100;

/// Weights of one detector class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub name: String,
    /// False when training skipped the class for lack of positives.
    pub trained: bool,
    pub bias: f64,
    pub app: Vec<f64>,
    pub ctx: Vec<f64>,
    /// `n_classes` blocks of `2K² + 4` values.
    pub seg: Vec<f64>,
}

/// A complete model: hyperparameters plus one weight set per detector class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub grid: u32,
    pub lambda: f64,
    pub n_classes: usize,
    pub app_dim: usize,
    pub ctx_dim: usize,
    pub classes: Vec<ClassWeights>,
}

impl ModelWeights {
    pub fn zeros(
        class_names: &[String],
        grid: GridSpec,
        lambda: f64,
        app_dim: usize,
        ctx_dim: usize,
    ) -> Self {
        let n = class_names.len();
        Self {
            grid: grid.k(),
            lambda,
            n_classes: n,
            app_dim,
            ctx_dim,
            classes: class_names
                .iter()
                .map(|name| ClassWeights {
                    name: name.clone(),
                    trained: false,
                    bias: 0.0,
                    app: vec![0.0; app_dim],
                    ctx: vec![0.0; ctx_dim],
                    seg: vec![0.0; n * grid.block_len()],
                })
                .collect(),
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid_spec()?;
        if !self.lambda.is_finite() {
            return Err(Error::Invalid("lambda must be finite".into()));
        }
        if self.classes.len() != self.n_classes {
            return Err(Error::Dimension(format!(
                "{} weight sets for {} classes",
                self.classes.len(),
                self.n_classes
            )));
        }
        for (i, c) in self.classes.iter().enumerate() {
            let checks = [
                ("app", c.app.len(), self.app_dim),
                ("ctx", c.ctx.len(), self.ctx_dim),
                ("seg", c.seg.len(), self.n_classes * grid.block_len()),
            ];
            for (name, have, want) in checks {
                if have != want {
                    return Err(Error::Dimension(format!(
                        "class {}: {name} has {have} weights, expected {want}",
                        i + 1
                    )));
                }
            }
            let finite =
                c.bias.is_finite() && c.app.iter().chain(&c.ctx).chain(&c.seg).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Invalid(format!("class {} has non-finite weights", i + 1)));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = toml::from_str(&text).map_err(|e| crate::dataset::toml_error(path, &text, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

/// Sequential dot product, accumulated in index order.
pub(crate) fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).fold(0.0, |acc, (a, b)| acc + a * b)
}

pub(crate) fn dot_f32(w: &[f64], x: &[f32]) -> f64 {
    w.iter().zip(x).fold(0.0, |acc, (a, b)| acc + a * *b as f64)
}

/// Geometry features of one box against every segment of the image.
pub(crate) fn segment_geometries(
    p: &BoxF,
    segments: &[Segment],
    largest: Option<u64>,
    grid: GridSpec,
    lambda: f64,
) -> Result<Vec<Vec<f64>>> {
    match largest {
        None => Ok(Vec::new()),
        Some(m) => segments
            .iter()
            .map(|s| geometry_features(p, s, grid, lambda, m))
            .collect(),
    }
}

/// `w·block` for one segment and class, summed in block order.
fn contribution(block_w: &[f64], geometry: &[f64], segment: &Segment, class: usize) -> f64 {
    let n = geometry.len();
    dot(&block_w[..n], geometry) + block_w[n] * segclass_feat(segment.scores[class])
}

/// Best segment for class `c` among precomputed geometries. NONE scores
/// exactly 0 and wins ties; among segments the first (lowest id) wins.
fn select_from(
    block_w: &[f64],
    geometries: &[Vec<f64>],
    segments: &[Segment],
    class: usize,
) -> (Option<usize>, f64) {
    let mut best = (None, 0.0);
    for (i, (geo, s)) in geometries.iter().zip(segments).enumerate() {
        let v = contribution(block_w, geo, s, class);
        if v > best.1 {
            best = (Some(i), v);
        }
    }
    best
}

/// Picks the segment (or NONE) maximizing class `c`'s block contribution.
/// Returns the index into `segments` and the contribution.
pub fn select_segment(
    p: &BoxF,
    class: usize,
    block_w: &[f64],
    segments: &[Segment],
    largest: Option<u64>,
    grid: GridSpec,
    lambda: f64,
) -> Result<(Option<usize>, f64)> {
    let geos = segment_geometries(p, segments, largest, grid, lambda)?;
    Ok(select_from(block_w, &geos, segments, class))
}

/// Per-class latent choice for one box under one detector's segment weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentChoice {
    /// Index into the bundle's segments for each class, `None` for NONE.
    pub segments: Vec<Option<usize>>,
    /// `Σ_c` contribution, summed in class order.
    pub value: f64,
}

/// Greedy maximization of the segmentation term over `h`.
pub fn infer_latent(
    p: &BoxF,
    bundle: &FeatureBundle,
    seg_w: &[f64],
    n_classes: usize,
    grid: GridSpec,
    lambda: f64,
) -> Result<LatentChoice> {
    let geos = segment_geometries(p, &bundle.segments, bundle.largest, grid, lambda)?;
    let len = grid.block_len();
    let mut segments = Vec::with_capacity(n_classes);
    let mut value = 0.0;
    for c in 0..n_classes {
        let (idx, v) = select_from(&seg_w[c * len..(c + 1) * len], &geos, &bundle.segments, c);
        segments.push(idx);
        value += v;
    }
    Ok(LatentChoice { segments, value })
}

/// Concatenated segmentation features `φ_seg(p, h)` for a fixed choice.
pub fn latent_features(
    p: &BoxF,
    bundle: &FeatureBundle,
    choice: &[Option<usize>],
    grid: GridSpec,
    lambda: f64,
) -> Result<Vec<f64>> {
    let len = grid.block_len();
    let mut out = vec![0.0; choice.len() * len];
    for (c, h) in choice.iter().enumerate() {
        if let (Some(i), Some(m)) = (h, bundle.largest) {
            let s = &bundle.segments[*i];
            let geo = geometry_features(p, s, grid, lambda, m)?;
            let block = &mut out[c * len..(c + 1) * len];
            block[..geo.len()].copy_from_slice(&geo);
            block[geo.len()] = segclass_feat(s.scores[c]);
        }
    }
    Ok(out)
}

/// Score of one box and the segments chosen for it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxScore {
    pub score: f64,
    pub latent: LatentChoice,
}

/// Appearance + context + bias, the part of the score independent of `h`.
pub fn linear_score(bundle: &FeatureBundle, row: usize, w: &ClassWeights) -> Result<f64> {
    let missing = || Error::MissingFeatures {
        image_id: bundle.image_id.clone(),
        row,
    };
    let app = bundle.appearance.row(row).ok_or_else(missing)?;
    let ctx = bundle.context.row(row).ok_or_else(missing)?;
    Ok(dot_f32(&w.app, app) + dot_f32(&w.ctx, ctx) + w.bias)
}

/// Scores box `row` of the bundle with detector `class`.
pub fn score_box(
    bundle: &FeatureBundle,
    row: usize,
    weights: &ModelWeights,
    class: usize,
) -> Result<BoxScore> {
    let grid = weights.grid_spec()?;
    let w = &weights.classes[class];
    let base = linear_score(bundle, row, w)?;
    let p = &bundle.boxes[row].bbox;
    let latent = infer_latent(p, bundle, &w.seg, weights.n_classes, grid, weights.lambda)?;
    Ok(BoxScore {
        score: base + latent.value,
        latent,
    })
}

/// A scored, kept box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class: usize,
    pub box_id: u32,
    pub bbox: BoxF,
    pub score: f64,
    /// Chosen segment id per class, `None` for NONE.
    pub chosen_segments: Vec<Option<u32>>,
}

/// Sorts by descending score, ties by ascending box id.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.box_id.cmp(&b.box_id)));
}

/// Greedy NMS over detections already sorted by [`sort_detections`]: a box is
/// dropped when its IoU with an already kept box exceeds `iou_thresh`.
pub fn nms(sorted: Vec<Detection>, iou_thresh: f64, top_k: usize) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Scores every box of the image for every detector class, then keeps at
/// most `top_k` boxes per class after NMS. Output is grouped by class.
pub fn detect_image(
    bundle: &FeatureBundle,
    weights: &ModelWeights,
    nms_iou: f64,
    top_k: usize,
) -> Result<Vec<Detection>> {
    let scored: Vec<Vec<BoxScore>> = (0..bundle.boxes.len())
        .into_par_iter()
        .map(|row| {
            (0..weights.n_classes)
                .map(|c| score_box(bundle, row, weights, c))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for class in 0..weights.n_classes {
        let mut dets: Vec<Detection> = bundle
            .boxes
            .iter()
            .zip(&scored)
            .map(|(b, s)| Detection {
                image_id: bundle.image_id.clone(),
                class,
                box_id: b.box_id,
                bbox: b.bbox,
                score: s[class].score,
                chosen_segments: s[class]
                    .latent
                    .segments
                    .iter()
                    .map(|h| h.map(|i| bundle.segments[i].id()))
                    .collect(),
            })
            .collect();
        sort_detections(&mut dets);
        out.extend(nms(dets, nms_iou, top_k));
    }
    Ok(out)
}

/// Runs [`detect_image`] on every bundle; output follows bundle order.
pub fn detect_all(
    bundles: &[FeatureBundle],
    weights: &ModelWeights,
    nms_iou: f64,
    top_k: usize,
) -> Result<Vec<Detection>> {
    let per_image: Vec<Vec<Detection>> = bundles
        .par_iter()
        .map(|b| detect_image(b, weights, nms_iou, top_k))
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

const DETECTION_HEADER: &str = "image_id,class_id,score,x1,y1,x2,y2,chosen_seg_ids";

/// Writes the detections dump; class ids are 1-based.
pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{DETECTION_HEADER}").map_err(io)?;
    for d in dets {
        let segs = d
            .chosen_segments
            .iter()
            .map(|s| s.map_or_else(|| "NONE".to_string(), |id| id.to_string()))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            d.image_id,
            d.class + 1,
            d.score,
            d.bbox.x1,
            d.bbox.y1,
            d.bbox.x2,
            d.bbox.y2,
            segs
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a detections dump. Box ids are assigned from the line order, which
/// preserves the within-image ranking the dump was written in.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == DETECTION_HEADER => {}
        _ => {
            return Err(Error::parse(
                path,
                1,
                format!("expected header `{DETECTION_HEADER}`"),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let err = |msg: String| Error::parse(path, lineno, msg);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, got {}", f.len())));
        }
        let num = |i: usize, name: &str| -> Result<f64> {
            f[i].trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad {name} `{}`", f[i])))
        };
        let class: usize = f[1]
            .trim()
            .parse()
            .ok()
            .filter(|c| *c >= 1)
            .ok_or_else(|| err(format!("bad class_id `{}`", f[1])))?;
        let bbox = BoxF::new(num(3, "x1")?, num(4, "y1")?, num(5, "x2")?, num(6, "y2")?)
            .map_err(|e| err(e.to_string()))?;
        let chosen = if f[7].trim().is_empty() {
            Vec::new()
        } else {
            f[7].split(';')
                .map(|t| match t.trim() {
                    "NONE" => Ok(None),
                    t => t
                        .parse()
                        .map(Some)
                        .map_err(|_| err(format!("bad segment id `{t}`"))),
                })
                .collect::<Result<_>>()?
        };
        out.push(Detection {
            image_id: f[0].trim().to_string(),
            class: class - 1,
            box_id: out.len() as u32,
            bbox,
            score: num(2, "score")?,
            chosen_segments: chosen,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CandidateBox;
    use crate::formats::FeatureMatrix;
    use crate::geometry::{ImageDims, PixelRect};
    use crate::mask::SegmentMask;
    use crate::segfeat::{assemble_block, DEFAULT_LAMBDA};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bundle_with(segs: Vec<Segment>, boxes: Vec<BoxF>, app: Vec<Vec<f32>>) -> FeatureBundle {
        let n = boxes.len();
        let cands = boxes
            .into_iter()
            .enumerate()
            .map(|(i, bbox)| CandidateBox {
                box_id: i as u32,
                bbox,
            })
            .collect();
        let cols = app.first().map_or(0, Vec::len);
        FeatureBundle::new(
            "img",
            ImageDims::new(32, 32),
            cands,
            FeatureMatrix::from_rows(cols, &app).unwrap(),
            FeatureMatrix::zeros(n, 1),
            segs,
        )
        .unwrap()
    }

    fn seg(id: u32, r: PixelRect, scores: Vec<f64>) -> Segment {
        Segment::new(
            SegmentMask::from_rect("img", id, ImageDims::new(32, 32), r).unwrap(),
            scores,
        )
    }

    /// Brute force over all joint assignments, each scored through full blocks.
    fn brute_force(p: &BoxF, b: &FeatureBundle, seg_w: &[f64], n: usize, grid: GridSpec) -> f64 {
        let len = grid.block_len();
        let options = b.segments.len() + 1;
        let mut best = f64::NEG_INFINITY;
        for code in 0..options.pow(n as u32) {
            let mut rest = code;
            let mut total = 0.0;
            for c in 0..n {
                let pick = rest % options;
                rest /= options;
                let s = (pick > 0).then(|| &b.segments[pick - 1]);
                let block = assemble_block(p, s, c, grid, DEFAULT_LAMBDA, b.largest.unwrap_or(0)).unwrap();
                total += dot(&seg_w[c * len..(c + 1) * len], &block.to_vec());
            }
            best = best.max(total);
        }
        best
    }

    #[test]
    fn zero_weights_pick_none() {
        let g = GridSpec::new(2).unwrap();
        let s = vec![seg(
            0,
            PixelRect {
                x1: 0,
                y1: 0,
                x2: 9,
                y2: 9,
            },
            vec![1.0],
        )];
        let p = BoxF {
            x1: 0.0,
            y1: 0.0,
            x2: 9.0,
            y2: 9.0,
        };
        let (h, v) =
            select_segment(&p, 0, &vec![0.0; g.block_len()], &s, Some(100), g, DEFAULT_LAMBDA).unwrap();
        assert_eq!((h, v), (None, 0.0));
    }

    #[test]
    fn single_positive_segment_is_chosen() {
        let g = GridSpec::new(1).unwrap();
        let s = vec![seg(
            4,
            PixelRect {
                x1: 0,
                y1: 0,
                x2: 9,
                y2: 9,
            },
            vec![0.0],
        )];
        let p = BoxF {
            x1: 0.0,
            y1: 0.0,
            x2: 9.0,
            y2: 9.0,
        };
        // only the seg_class weight is set: 0.6 * sigmoid(0) = 0.3
        let mut w = vec![0.0; g.block_len()];
        w[5] = 0.6;
        let (h, v) = select_segment(&p, 0, &w, &s, Some(200), g, DEFAULT_LAMBDA).unwrap();
        assert_eq!(h, Some(0));
        assert!((v - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let g = GridSpec::new(1).unwrap();
        let r = PixelRect {
            x1: 0,
            y1: 0,
            x2: 9,
            y2: 9,
        };
        let b = bundle_with(
            vec![seg(9, r, vec![0.0]), seg(2, r, vec![0.0])],
            vec![r.to_box()],
            vec![vec![0.0]],
        );
        let mut w = vec![0.0; g.block_len()];
        w[5] = 1.0;
        let l = infer_latent(&r.to_box(), &b, &w, 1, g, DEFAULT_LAMBDA).unwrap();
        assert_eq!(b.segments[l.segments[0].unwrap()].id(), 2);
    }

    #[test]
    fn greedy_matches_joint_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = GridSpec::new(2).unwrap();
        let n = 3;
        for _ in 0..20 {
            let segs: Vec<Segment> = (0..5)
                .map(|i| {
                    let x = rng.random_range(0..20);
                    let y = rng.random_range(0..20);
                    let r = PixelRect {
                        x1: x,
                        y1: y,
                        x2: x + rng.random_range(2..12),
                        y2: y + rng.random_range(2..12),
                    };
                    seg(i, r, (0..n).map(|_| rng.random_range(-3.0..3.0)).collect())
                })
                .collect();
            let p = BoxF {
                x1: 4.0,
                y1: 5.0,
                x2: 20.0,
                y2: 18.0,
            };
            let b = bundle_with(segs, vec![p], vec![vec![0.0]]);
            let w: Vec<f64> = (0..n * g.block_len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let greedy = infer_latent(&p, &b, &w, n, g, DEFAULT_LAMBDA).unwrap();
            assert_eq!(greedy.value, brute_force(&p, &b, &w, n, g));
            let feats = latent_features(&p, &b, &greedy.segments, g, DEFAULT_LAMBDA).unwrap();
            let again: f64 = (0..n)
                .map(|c| {
                    dot(
                        &w[c * g.block_len()..(c + 1) * g.block_len()],
                        &feats[c * g.block_len()..(c + 1) * g.block_len()],
                    )
                })
                .fold(0.0, |a, v| a + v);
            assert_eq!(again, greedy.value);
        }
    }

    fn weights(n: usize, app_dim: usize, grid: GridSpec) -> ModelWeights {
        let names: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        ModelWeights::zeros(&names, grid, DEFAULT_LAMBDA, app_dim, 1)
    }

    #[test]
    fn zero_model_scores_zero() {
        let g = GridSpec::new(1).unwrap();
        let r = PixelRect {
            x1: 0,
            y1: 0,
            x2: 9,
            y2: 9,
        };
        let b = bundle_with(
            vec![seg(0, r, vec![2.0, 1.0])],
            vec![r.to_box()],
            vec![vec![1.0, 2.0]],
        );
        let s = score_box(&b, 0, &weights(2, 2, g), 1).unwrap();
        assert_eq!(s.score, 0.0);
        assert_eq!(s.latent.segments, vec![None, None]);
    }

    #[test]
    fn no_segment_weights_give_linear_score() {
        let g = GridSpec::new(1).unwrap();
        let r = PixelRect {
            x1: 0,
            y1: 0,
            x2: 9,
            y2: 9,
        };
        let b = bundle_with(
            vec![seg(0, r, vec![2.0])],
            vec![r.to_box()],
            vec![vec![1.5, -2.0]],
        );
        let mut m = weights(1, 2, g);
        m.classes[0].app = vec![2.0, 0.5];
        m.classes[0].ctx = vec![3.0];
        m.classes[0].bias = 0.25;
        assert_eq!(
            score_box(&b, 0, &m, 0).unwrap().score,
            2.0 * 1.5 - 0.5 * 2.0 + 0.0 + 0.25
        );
        assert!(matches!(
            score_box(&b, 3, &m, 0),
            Err(Error::MissingFeatures { row: 3, .. })
        ));
    }

    #[test]
    fn negative_segments_never_change_scores() {
        let g = GridSpec::new(1).unwrap();
        let r = PixelRect {
            x1: 0,
            y1: 0,
            x2: 9,
            y2: 9,
        };
        let mut m = weights(1, 1, g);
        m.classes[0].seg = vec![0.0, -5.0, 0.0, 0.0, 0.0, 1.0];
        let good = seg(0, r, vec![0.0]);
        let before = bundle_with(vec![good.clone()], vec![r.to_box()], vec![vec![0.0]]);
        // entirely outside the box: -5 * 1 + sigmoid(-30) < 0
        let far = seg(
            1,
            PixelRect {
                x1: 20,
                y1: 20,
                x2: 29,
                y2: 29,
            },
            vec![-30.0],
        );
        let after = bundle_with(vec![good, far], vec![r.to_box()], vec![vec![0.0]]);
        assert_eq!(
            score_box(&before, 0, &m, 0).unwrap().score,
            score_box(&after, 0, &m, 0).unwrap().score
        );
    }

    fn det(id: u32, score: f64, b: BoxF) -> Detection {
        Detection {
            image_id: "i".into(),
            class: 0,
            box_id: id,
            bbox: b,
            score,
            chosen_segments: vec![],
        }
    }

    /// Quadratic reference: a box survives iff no higher-ranked survivor overlaps it.
    fn nms_reference(sorted: &[Detection], t: f64, k: usize) -> Vec<u32> {
        let mut alive = vec![true; sorted.len()];
        for i in 0..sorted.len() {
            if !alive[i] {
                continue;
            }
            for j in i + 1..sorted.len() {
                if iou(&sorted[i].bbox, &sorted[j].bbox) > t {
                    alive[j] = false;
                }
            }
        }
        sorted
            .iter()
            .zip(alive)
            .filter(|(_, a)| *a)
            .map(|(d, _)| d.box_id)
            .take(k)
            .collect()
    }

    #[test]
    fn nms_examples() {
        let b = BoxF {
            x1: 0.0,
            y1: 0.0,
            x2: 9.0,
            y2: 9.0,
        };
        for t in [0.0, 0.3, 0.99] {
            assert_eq!(nms(vec![det(0, 1.0, b), det(1, 0.5, b)], t, 10).len(), 1);
        }
        let far = BoxF {
            x1: 20.0,
            y1: 20.0,
            x2: 29.0,
            y2: 29.0,
        };
        assert_eq!(nms(vec![det(0, 1.0, b), det(1, 0.5, far)], 0.0, 10).len(), 2);

        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut dets: Vec<Detection> = (0..50)
            .map(|i| {
                let x = rng.random_range(0.0..40.0);
                let y = rng.random_range(0.0..40.0);
                det(
                    i,
                    rng.random_range(-1.0..1.0),
                    BoxF {
                        x1: x,
                        y1: y,
                        x2: x + rng.random_range(3.0..20.0),
                        y2: y + rng.random_range(3.0..20.0),
                    },
                )
            })
            .collect();
        sort_detections(&mut dets);
        let kept: Vec<u32> = nms(dets.clone(), 0.3, 100).iter().map(|d| d.box_id).collect();
        assert_eq!(kept, nms_reference(&dets, 0.3, 100));
        let kept5: Vec<u32> = nms(dets.clone(), 0.3, 5).iter().map(|d| d.box_id).collect();
        assert_eq!(kept5, nms_reference(&dets, 0.3, 5));

        // permutation of the input does not change the result
        let mut shuffled = dets.clone();
        shuffled.reverse();
        sort_detections(&mut shuffled);
        let again: Vec<u32> = nms(shuffled, 0.3, 100).iter().map(|d| d.box_id).collect();
        assert_eq!(again, kept);
    }

    #[test]
    fn model_file_roundtrip() {
        let g = GridSpec::new(2).unwrap();
        let mut m = weights(2, 3, g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in &mut m.classes {
            for v in c.app.iter_mut().chain(c.ctx.iter_mut()).chain(c.seg.iter_mut()) {
                *v = rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-12..6));
            }
            c.bias = -1.0 / 3.0;
            c.trained = true;
        }
        let text = m.to_toml().unwrap();
        let back: ModelWeights = toml::from_str(&text).unwrap();
        assert_eq!(back, m);
        back.validate().unwrap();
    }

    #[test]
    fn detections_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let dets = vec![Detection {
            image_id: "a".into(),
            class: 1,
            box_id: 0,
            bbox: BoxF {
                x1: 1.0,
                y1: 2.5,
                x2: 3.0,
                y2: 4.0,
            },
            score: 0.1 + 0.2,
            chosen_segments: vec![Some(3), None],
        }];
        write_detections(&p, &dets).unwrap();
        assert_eq!(read_detections(&p).unwrap(), dets);
    }
}
