//! Linear bounding-box regression and iterative box refinement.
//!
//! Targets use the R-CNN parameterization relative to a proposal `P`:
//! `t_x = (G_x − P_x)/P_w`, `t_y = (G_y − P_y)/P_h`, `t_w = ln(G_w/P_w)`,
//! `t_h = ln(G_h/P_h)`, with centers and sizes from [`BoxF::center`] and
//! [`BoxF::width`].

use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureBundle};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxF, ImageDims};
use crate::model::{dot_f32, infer_latent, nms, sort_detections, Detection, ModelWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BboxRegConfig {
    /// Ridge strength per training pair: the penalty is `ridge · N · ‖w‖²`.
    pub ridge: f64,
    /// Minimum IoU between a proposal and its GT to become a training pair.
    pub pair_iou: f64,
    pub max_iters: usize,
    /// Features are re-extracted when `1 − IoU(old, new)` exceeds this.
    pub change_thresh: f64,
}

impl Default for BboxRegConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-3,
            pair_iou: 0.6,
            max_iters: 2,
            change_thresh: 0.2,
        }
    }
}

/// Regression targets of one (proposal, ground truth) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegTargets {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RegTargets {
    pub fn new(proposal: &BoxF, gt: &BoxF) -> Self {
        let (px, py) = proposal.center();
        let (gx, gy) = gt.center();
        let (pw, ph) = (proposal.width(), proposal.height());
        Self {
            tx: (gx - px) / pw,
            ty: (gy - py) / ph,
            tw: (gt.width() / pw).ln(),
            th: (gt.height() / ph).ln(),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    /// The box these targets describe relative to `proposal` (unclipped).
    pub fn apply(&self, proposal: &BoxF) -> BoxF {
        let (px, py) = proposal.center();
        let (pw, ph) = (proposal.width(), proposal.height());
        BoxF::from_center(
            px + self.tx * pw,
            py + self.ty * ph,
            (pw * self.tw.exp()).max(1.0),
            (ph * self.th.exp()).max(1.0),
        )
    }
}

/// Regression weights of one class: rows are `t_x, t_y, t_w, t_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRegressor {
    pub name: String,
    /// False when the class had too few pairs; it then predicts zero targets.
    pub trained: bool,
    pub intercepts: [f64; 4],
    pub weights: Vec<Vec<f64>>,
}

impl ClassRegressor {
    pub fn identity(name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            trained: false,
            intercepts: [0.0; 4],
            weights: vec![vec![0.0; dim]; 4],
        }
    }

    pub fn predict(&self, features: &[f32]) -> RegTargets {
        let t: Vec<f64> = (0..4)
            .map(|k| dot_f32(&self.weights[k], features) + self.intercepts[k])
            .collect();
        RegTargets {
            tx: t[0],
            ty: t[1],
            tw: t[2],
            th: t[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegressor {
    pub ridge: f64,
    pub feature_dim: usize,
    pub classes: Vec<ClassRegressor>,
}

impl BoxRegressor {
    pub fn identity(class_names: &[String], dim: usize) -> Self {
        Self {
            ridge: 0.0,
            feature_dim: dim,
            classes: class_names
                .iter()
                .map(|n| ClassRegressor::identity(n, dim))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.classes.iter().enumerate() {
            if c.weights.len() != 4 || c.weights.iter().any(|w| w.len() != self.feature_dim) {
                return Err(Error::Dimension(format!(
                    "regressor class {}: expected 4 weight rows of {} values",
                    i + 1,
                    self.feature_dim
                )));
            }
            let finite = c
                .intercepts
                .iter()
                .chain(c.weights.iter().flatten())
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::Invalid(format!(
                    "regressor class {} has non-finite weights",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = toml::from_str(&text).map_err(|e| crate::dataset::toml_error(path, &text, e))?;
        r.validate()?;
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One training pair for the regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct RegPair {
    pub features: Vec<f32>,
    pub proposal: BoxF,
    pub gt: BoxF,
}

/// Ridge least squares for the four targets with unpenalized intercepts.
///
/// Features and targets are centered, then `(XᵀX + ridge·N·I) w = Xᵀt` is
/// solved by Cholesky (SVD when the system is singular).
pub fn fit_regressor(name: &str, pairs: &[RegPair], ridge: f64) -> Result<ClassRegressor> {
    let dim = pairs.first().map_or(0, |p| p.features.len());
    if pairs.len() < dim + 1 || pairs.is_empty() {
        return Err(Error::InsufficientPairs {
            have: pairs.len(),
            need: dim + 1,
        });
    }
    if pairs.iter().any(|p| p.features.len() != dim) {
        return Err(Error::Dimension(
            "regression pairs have differing feature lengths".into(),
        ));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Invalid(format!(
            "ridge must be a non-negative number, got {ridge}"
        )));
    }
    let n = pairs.len();
    let mut x = DMatrix::from_fn(n, dim, |i, j| pairs[i].features[j] as f64);
    let mut t = DMatrix::from_fn(n, 4, |i, k| {
        RegTargets::new(&pairs[i].proposal, &pairs[i].gt).to_array()[k]
    });
    let x_mean: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    let t_mean: Vec<f64> = t.column_iter().map(|c| c.mean()).collect();
    for (j, m) in x_mean.iter().enumerate() {
        x.column_mut(j).add_scalar_mut(-m);
    }
    for (k, m) in t_mean.iter().enumerate() {
        t.column_mut(k).add_scalar_mut(-m);
    }
    let mut a = x.transpose() * &x;
    for j in 0..dim {
        a[(j, j)] += ridge * n as f64;
    }
    let b = x.transpose() * &t;
    let w = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| Error::Invalid(format!("regression system is singular: {e}")))?,
    };
    let mut intercepts = [0.0; 4];
    let mut weights = vec![vec![0.0; dim]; 4];
    for k in 0..4 {
        weights[k] = w.column(k).iter().copied().collect();
        intercepts[k] = t_mean[k] - (0..dim).map(|j| x_mean[j] * w[(j, k)]).sum::<f64>();
    }
    let out = ClassRegressor {
        name: name.to_string(),
        trained: true,
        intercepts,
        weights,
    };
    if out
        .intercepts
        .iter()
        .chain(out.weights.iter().flatten())
        .any(|v| !v.is_finite())
    {
        return Err(Error::Invalid(format!(
            "class {name}: regression produced non-finite weights"
        )));
    }
    Ok(out)
}

/// Regresses `p` with `features` and clips the result to the image.
pub fn apply_regressor(reg: &ClassRegressor, features: &[f32], p: &BoxF, dims: ImageDims) -> BoxF {
    reg.predict(features).apply(p).clip(dims)
}

/// `1 − IoU(old, new)`.
pub fn box_change(old: &BoxF, new: &BoxF) -> f64 {
    1.0 - iou(old, new)
}

/// Training pairs of `class`: every box whose best same-class GT overlap
/// reaches `pair_iou`, paired with that GT (first one on ties).
pub fn regression_pairs(dataset: &Dataset, class: usize, pair_iou: f64) -> Result<Vec<RegPair>> {
    let by_image = dataset.gt_by_image();
    let mut pairs = Vec::new();
    for b in &dataset.bundles {
        let Some(gts) = by_image.get(b.image_id.as_str()) else {
            continue;
        };
        let gts: Vec<&BoxF> = gts.iter().filter(|g| g.class == class).map(|g| &g.bbox).collect();
        if gts.is_empty() {
            continue;
        }
        let reg = b
            .regression
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("image {} has no regression features", b.image_id)))?;
        for (row, cand) in b.boxes.iter().enumerate() {
            let mut best: Option<(&BoxF, f64)> = None;
            for g in &gts {
                let v = iou(&cand.bbox, g);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, v)) = best {
                if v >= pair_iou {
                    pairs.push(RegPair {
                        features: reg.row(row).unwrap().to_vec(),
                        proposal: cand.bbox,
                        gt: *g,
                    });
                }
            }
        }
    }
    Ok(pairs)
}

/// Fits one regressor per class. A class with too few pairs keeps the
/// identity regressor and is reported with a warning.
pub fn fit_all(dataset: &Dataset, cfg: &BboxRegConfig) -> Result<BoxRegressor> {
    let dim = dataset
        .bundles
        .first()
        .and_then(|b| b.regression.as_ref())
        .map(|r| r.cols())
        .ok_or_else(|| Error::Invalid("dataset has no regression features".into()))?;
    let classes: Vec<Result<ClassRegressor>> = (0..dataset.n_classes())
        .into_par_iter()
        .map(|c| {
            let name = &dataset.class_names[c];
            let pairs = regression_pairs(dataset, c, cfg.pair_iou)?;
            match fit_regressor(name, &pairs, cfg.ridge) {
                Err(e @ Error::InsufficientPairs { .. }) => {
                    warn!("class {}: {e}; using the identity regressor", c + 1);
                    Ok(ClassRegressor::identity(name, dim))
                }
                other => other,
            }
        })
        .collect();
    let classes = classes.into_iter().collect::<Result<Vec<_>>>()?;
    if classes.iter().all(|c| !c.trained) {
        let have = (0..dataset.n_classes())
            .map(|c| regression_pairs(dataset, c, cfg.pair_iou).map(|p| p.len()))
            .collect::<Result<Vec<_>>>()?;
        return Err(Error::InsufficientPairs {
            have: have.into_iter().max().unwrap_or(0),
            need: dim + 1,
        });
    }
    Ok(BoxRegressor {
        ridge: cfg.ridge,
        feature_dim: dim,
        classes,
    })
}

/// Features of one box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxFeatures {
    pub appearance: Vec<f32>,
    pub context: Vec<f32>,
    pub regression: Vec<f32>,
}

impl BoxFeatures {
    /// Features of candidate `row` as stored in the bundle.
    pub fn from_bundle(bundle: &FeatureBundle, row: usize) -> Result<Self> {
        let missing = || Error::MissingFeatures {
            image_id: bundle.image_id.clone(),
            row,
        };
        let reg = bundle.regression.as_ref().ok_or_else(missing)?;
        Ok(Self {
            appearance: bundle.appearance.row(row).ok_or_else(missing)?.to_vec(),
            context: bundle.context.row(row).ok_or_else(missing)?.to_vec(),
            regression: reg.row(row).ok_or_else(missing)?.to_vec(),
        })
    }
}

/// Supplies features for boxes that are not among the original candidates.
pub trait FeatureProvider: Sync {
    fn features(&self, bundle: &FeatureBundle, bbox: &BoxF) -> Result<BoxFeatures>;
}

/// Looks features up among the bundle's own candidates, falling back to the
/// candidate with the highest IoU (first on ties). Boxes overlapping no
/// candidate are misses.
#[derive(Debug, Clone, Copy, Default)]
pub struct LookupProvider;

impl FeatureProvider for LookupProvider {
    fn features(&self, bundle: &FeatureBundle, bbox: &BoxF) -> Result<BoxFeatures> {
        let mut best: Option<(usize, f64)> = None;
        for (row, c) in bundle.boxes.iter().enumerate() {
            let v = iou(&c.bbox, bbox);
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((row, v));
            }
        }
        match best {
            Some((row, _)) => BoxFeatures::from_bundle(bundle, row),
            None => Err(Error::Provider {
                image_id: bundle.image_id.clone(),
                x1: bbox.x1,
                y1: bbox.y1,
                x2: bbox.x2,
                y2: bbox.y2,
            }),
        }
    }
}

/// A candidate after refinement for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedBox {
    pub class: usize,
    pub box_id: u32,
    /// Where the current features were extracted.
    pub anchor: BoxF,
    pub bbox: BoxF,
    pub score: f64,
    pub chosen_segments: Vec<Option<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterStats {
    /// 1-based.
    pub iteration: usize,
    /// Boxes whose features were re-extracted.
    pub changed: usize,
    pub total: usize,
    pub changed_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct IterateOutcome {
    /// Every (class, candidate), class-major in candidate order.
    pub boxes: Vec<RefinedBox>,
    /// `boxes` after per-class NMS.
    pub detections: Vec<Detection>,
    pub stats: Vec<IterStats>,
}

/// Parameters of [`iterate_boxes`] besides the model and data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateParams {
    pub max_iters: usize,
    pub change_thresh: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

/// Iterative refinement of every candidate box of one image for every class.
///
/// Each box remembers the anchor where its features were last extracted. An
/// iteration regresses every anchor with its features. When the prediction
/// moved by more than `change_thresh` the provider re-extracts features
/// there and the prediction becomes the new anchor; otherwise only the output
/// box is updated. The loop stops after `max_iters` iterations or once no box
/// moved. Boxes are finally rescored (appearance and context from the anchor,
/// segmentation at the output box) and suppressed per class.
pub fn iterate_boxes(
    bundle: &FeatureBundle,
    reg: &BoxRegressor,
    weights: &ModelWeights,
    params: IterateParams,
    provider: &dyn FeatureProvider,
) -> Result<IterateOutcome> {
    if reg.classes.len() != weights.n_classes {
        return Err(Error::Dimension(format!(
            "regressor has {} classes, model has {}",
            reg.classes.len(),
            weights.n_classes
        )));
    }
    let grid = weights.grid_spec()?;
    let initial: Vec<BoxFeatures> = (0..bundle.boxes.len())
        .map(|row| BoxFeatures::from_bundle(bundle, row))
        .collect::<Result<_>>()?;
    if let Some(f) = initial.first() {
        if f.regression.len() != reg.feature_dim {
            return Err(Error::Dimension(format!(
                "regression features have {} columns, regressor expects {}",
                f.regression.len(),
                reg.feature_dim
            )));
        }
    }
    struct Track {
        class: usize,
        row: usize,
        anchor: BoxF,
        bbox: BoxF,
        feats: BoxFeatures,
    }
    let mut tracks: Vec<Track> = (0..weights.n_classes)
        .flat_map(|class| {
            bundle
                .boxes
                .iter()
                .enumerate()
                .map(move |(row, b)| (class, row, b.bbox))
        })
        .map(|(class, row, bbox)| Track {
            class,
            row,
            anchor: bbox,
            bbox,
            feats: initial[row].clone(),
        })
        .collect();

    let mut stats = Vec::new();
    for iteration in 1..=params.max_iters {
        let updates: Vec<(BoxF, Option<BoxFeatures>)> = tracks
            .par_iter()
            .map(|t| {
                let pred =
                    apply_regressor(&reg.classes[t.class], &t.feats.regression, &t.anchor, bundle.dims);
                if box_change(&t.anchor, &pred) > params.change_thresh {
                    Ok((pred, Some(provider.features(bundle, &pred)?)))
                } else {
                    Ok((pred, None))
                }
            })
            .collect::<Result<_>>()?;
        let mut changed = 0;
        for (t, (pred, feats)) in tracks.iter_mut().zip(updates) {
            t.bbox = pred;
            if let Some(f) = feats {
                t.anchor = pred;
                t.feats = f;
                changed += 1;
            }
        }
        let total = tracks.len();
        stats.push(IterStats {
            iteration,
            changed,
            total,
            changed_fraction: if total == 0 {
                0.0
            } else {
                changed as f64 / total as f64
            },
        });
        if changed == 0 {
            break;
        }
    }

    let boxes: Vec<RefinedBox> = tracks
        .par_iter()
        .map(|t| {
            let w = &weights.classes[t.class];
            let base = dot_f32(&w.app, &t.feats.appearance) + dot_f32(&w.ctx, &t.feats.context) + w.bias;
            let latent = infer_latent(&t.bbox, bundle, &w.seg, weights.n_classes, grid, weights.lambda)?;
            Ok(RefinedBox {
                class: t.class,
                box_id: bundle.boxes[t.row].box_id,
                anchor: t.anchor,
                bbox: t.bbox,
                score: base + latent.value,
                chosen_segments: latent
                    .segments
                    .iter()
                    .map(|h| h.map(|i| bundle.segments[i].id()))
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;

    let mut detections = Vec::new();
    for class in 0..weights.n_classes {
        let mut dets: Vec<Detection> = boxes
            .iter()
            .filter(|b| b.class == class)
            .map(|b| Detection {
                image_id: bundle.image_id.clone(),
                class,
                box_id: b.box_id,
                bbox: b.bbox,
                score: b.score,
                chosen_segments: b.chosen_segments.clone(),
            })
            .collect();
        sort_detections(&mut dets);
        detections.extend(nms(dets, params.nms_iou, params.top_k));
    }
    Ok(IterateOutcome {
        boxes,
        detections,
        stats,
    })
}
