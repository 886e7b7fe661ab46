//! Latent-SVM training of one detector per class.
//!
//! Each class alternates two steps for `outer_iters` rounds:
//!
//! 1. fix the latent segment choice of every positive box to the argmax
//!    under the current weights (the first round instead picks, for every
//!    class, the segment whose tight box best overlaps the candidate box);
//! 2. score every negative box with its own best latent choice, keep the
//!    highest-scoring margin violators up to the cache budget, and run
//!    stochastic subgradient descent on the hinge objective
//!    `‖w‖² + C Σ max(0, 1 − y f(x))` with every latent choice frozen.
//!
//! Segmentation features for the frozen choices are computed once per round
//! and cached on the instances.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureBundle};
use crate::error::{Error, Result};
use crate::formats::create;
use crate::geometry::{iou, BoxF};
use crate::model::{dot, dot_f32, infer_latent, latent_features, ClassWeights, ModelWeights};
use crate::segfeat::{overlap_feat, GridSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay: 1e-4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hinge-loss trade-off `C`.
    pub c_reg: f64,
    pub outer_iters: usize,
    pub sgd: SgdConfig,
    /// Maximum number of hard negatives cached per class.
    pub neg_cache_cap: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// When false every latent choice is NONE and `w_seg` stays zero.
    pub use_segmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c_reg: 1e-2,
            outer_iters: 3,
            sgd: SgdConfig::default(),
            neg_cache_cap: 10_000,
            pos_iou: 0.5,
            neg_iou: 0.3,
            use_segmentation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("train config: {m}")));
        if !(self.c_reg > 0.0 && self.c_reg.is_finite()) {
            return bad("c_reg must be positive");
        }
        if !(self.neg_iou > 0.0 && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return bad("need 0 < neg_iou <= pos_iou <= 1");
        }
        if self.sgd.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.sgd.learning_rate.is_nan() || self.sgd.learning_rate <= 0.0 || self.sgd.decay < 0.0 {
            return bad("learning_rate must be positive and decay non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Excluded,
}

/// Labels boxes against the same-class ground truth of their image:
/// positive at max IoU `>= pos_iou`, negative below `neg_iou`, else excluded.
pub fn assign_labels(boxes: &[BoxF], gts: &[BoxF], pos_iou: f64, neg_iou: f64) -> Vec<Label> {
    boxes
        .iter()
        .map(|b| {
            let best = gts.iter().map(|g| iou(b, g)).fold(0.0, f64::max);
            if best >= pos_iou {
                Label::Positive
            } else if best < neg_iou {
                Label::Negative
            } else {
                Label::Excluded
            }
        })
        .collect()
}

/// First-round latent choice: for every class, the segment with the largest
/// overlap feature (lowest id on ties), or NONE when there are no segments.
pub fn init_latent(
    p: &BoxF,
    bundle: &FeatureBundle,
    n_classes: usize,
    lambda: f64,
) -> Result<Vec<Option<usize>>> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in bundle.segments.iter().enumerate() {
        let v = overlap_feat(p, s, lambda)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    Ok(vec![best.map(|(i, _)| i); n_classes])
}

/// One cached training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainInstance {
    /// Index of the image's bundle.
    pub image: usize,
    /// Row of the box inside the bundle.
    pub row: usize,
    pub label: f64,
    pub latent: Vec<Option<usize>>,
    /// `φ_seg` for `latent`.
    pub seg: Vec<f64>,
}

/// The weights of one detector as a flat linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub app: Vec<f64>,
    pub ctx: Vec<f64>,
    pub seg: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(app: usize, ctx: usize, seg: usize) -> Self {
        Self {
            app: vec![0.0; app],
            ctx: vec![0.0; ctx],
            seg: vec![0.0; seg],
            bias: 0.0,
        }
    }

    pub fn from_weights(w: &ClassWeights) -> Self {
        Self {
            app: w.app.clone(),
            ctx: w.ctx.clone(),
            seg: w.seg.clone(),
            bias: w.bias,
        }
    }

    pub fn into_weights(self, name: &str, trained: bool) -> ClassWeights {
        ClassWeights {
            name: name.to_string(),
            trained,
            bias: self.bias,
            app: self.app,
            ctx: self.ctx,
            seg: self.seg,
        }
    }

    /// `‖w‖²`, bias excluded.
    pub fn norm_sq(&self) -> f64 {
        dot(&self.app, &self.app) + dot(&self.ctx, &self.ctx) + dot(&self.seg, &self.seg)
    }

    /// Decision value of a cached instance.
    pub fn decision(&self, inst: &TrainInstance, bundles: &[FeatureBundle]) -> f64 {
        let b = &bundles[inst.image];
        dot_f32(&self.app, b.appearance.row(inst.row).unwrap())
            + dot_f32(&self.ctx, b.context.row(inst.row).unwrap())
            + dot(&self.seg, &inst.seg)
            + self.bias
    }
}

/// `‖w‖² + C Σ max(0, 1 − y f)` over a frozen cache, summed in cache order.
pub fn objective(model: &LinearModel, cache: &[TrainInstance], bundles: &[FeatureBundle], c_reg: f64) -> f64 {
    let hinge = cache
        .iter()
        .map(|i| (1.0 - i.label * model.decision(i, bundles)).max(0.0))
        .fold(0.0, |a, v| a + v);
    model.norm_sq() + c_reg * hinge
}

#[derive(Debug, Clone)]
pub struct SgdOutcome {
    pub model: LinearModel,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Objective after every epoch.
    pub trace: Vec<f64>,
}

/// Minibatch stochastic subgradient descent on the frozen cache, starting
/// from `init`. The step size is `η₀ / (1 + decay·t)` with `t` counting
/// updates. The returned model is the best epoch-end iterate (or `init` if no
/// epoch improved on it), so the objective never increases.
///
/// Shuffling draws from ChaCha8 seeded with `sgd.seed` on stream `stream`.
pub fn sgd_fit(
    cache: &[TrainInstance],
    bundles: &[FeatureBundle],
    init: LinearModel,
    cfg: &TrainConfig,
    stream: u64,
) -> Result<SgdOutcome> {
    let initial = objective(&init, cache, bundles, cfg.c_reg);
    let mut best = (init.clone(), initial);
    let mut trace = Vec::with_capacity(cfg.sgd.epochs);
    if cache.is_empty() {
        return Ok(SgdOutcome {
            model: init,
            initial_objective: initial,
            final_objective: initial,
            trace,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sgd.seed);
    rng.set_stream(stream);
    let mut model = init;
    let mut order: Vec<usize> = (0..cache.len()).collect();
    let mut g_app = vec![0.0; model.app.len()];
    let mut g_ctx = vec![0.0; model.ctx.len()];
    let mut g_seg = vec![0.0; model.seg.len()];
    let n = cache.len() as f64;
    let mut t = 0u64;
    for _ in 0..cfg.sgd.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.sgd.batch_size) {
            let eta = cfg.sgd.learning_rate / (1.0 + cfg.sgd.decay * t as f64);
            let scale = cfg.c_reg * n / batch.len() as f64;
            for (g, w) in [
                (&mut g_app, &model.app),
                (&mut g_ctx, &model.ctx),
                (&mut g_seg, &model.seg),
            ] {
                for (gi, wi) in g.iter_mut().zip(w) {
                    *gi = 2.0 * wi;
                }
            }
            let mut g_bias = 0.0;
            for &i in batch {
                let inst = &cache[i];
                if inst.label * model.decision(inst, bundles) < 1.0 {
                    let step = scale * inst.label;
                    let b = &bundles[inst.image];
                    for (gi, x) in g_app.iter_mut().zip(b.appearance.row(inst.row).unwrap()) {
                        *gi -= step * *x as f64;
                    }
                    for (gi, x) in g_ctx.iter_mut().zip(b.context.row(inst.row).unwrap()) {
                        *gi -= step * *x as f64;
                    }
                    for (gi, x) in g_seg.iter_mut().zip(&inst.seg) {
                        *gi -= step * x;
                    }
                    g_bias -= step;
                }
            }
            for (w, g) in [
                (&mut model.app, &g_app),
                (&mut model.ctx, &g_ctx),
                (&mut model.seg, &g_seg),
            ] {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= eta * gi;
                }
            }
            model.bias -= eta * g_bias;
            t += 1;
        }
        let obj = objective(&model, cache, bundles, cfg.c_reg);
        if !obj.is_finite() || obj > 10.0 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged {
                initial,
                reached: obj,
            });
        }
        trace.push(obj);
        if obj < best.1 {
            best = (model.clone(), obj);
        }
    }
    Ok(SgdOutcome {
        model: best.0,
        initial_objective: initial,
        final_objective: best.1,
        trace,
    })
}

/// A scored negative box.
#[derive(Debug, Clone, PartialEq)]
pub struct NegCandidate {
    pub image: usize,
    pub row: usize,
    pub score: f64,
    pub latent: Vec<Option<usize>>,
}

/// Keeps the `cap` highest-scoring margin violators (score `> −1`), one entry
/// per `(image, row)`. Ties break by `(image, row)`.
pub fn mine_hard_negatives(mut scored: Vec<NegCandidate>, cap: usize) -> Vec<NegCandidate> {
    scored.retain(|c| c.score > -1.0);
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.image, a.row).cmp(&(b.image, b.row)))
    });
    let mut seen = HashSet::new();
    scored.retain(|c| seen.insert((c.image, c.row)));
    scored.truncate(cap);
    scored
}

/// Per-round training record.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// 0-based.
    pub class: usize,
    pub objective_before: f64,
    pub objective: f64,
    pub num_hard_negs: usize,
    pub num_latent_changed: usize,
}

pub fn write_train_log(path: &Path, log: &[RoundLog]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "round,class_id,objective,num_hard_negs,num_latent_changed").map_err(io)?;
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.round,
            r.class + 1,
            r.objective,
            r.num_hard_negs,
            r.num_latent_changed
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Everything `train` produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub log: Vec<RoundLog>,
}

struct ClassContext<'a> {
    bundles: &'a [FeatureBundle],
    class: usize,
    n_classes: usize,
    grid: GridSpec,
    lambda: f64,
    cfg: &'a TrainConfig,
}

impl ClassContext<'_> {
    fn seg_len(&self) -> usize {
        self.n_classes * self.grid.block_len()
    }

    fn features(&self, image: usize, row: usize, latent: &[Option<usize>]) -> Result<Vec<f64>> {
        let b = &self.bundles[image];
        latent_features(&b.boxes[row].bbox, b, latent, self.grid, self.lambda)
    }

    /// Best latent choice and total score of a box under `model`.
    fn score(&self, model: &LinearModel, image: usize, row: usize) -> Result<(f64, Vec<Option<usize>>)> {
        let b = &self.bundles[image];
        let base = dot_f32(&model.app, b.appearance.row(row).unwrap())
            + dot_f32(&model.ctx, b.context.row(row).unwrap())
            + model.bias;
        let latent = infer_latent(
            &b.boxes[row].bbox,
            b,
            &model.seg,
            self.n_classes,
            self.grid,
            self.lambda,
        )?;
        Ok((base + latent.value, latent.segments))
    }

    /// Re-solves every positive's latent choice; returns how many changed.
    fn relabel_positives(&self, model: &LinearModel, positives: &mut [TrainInstance]) -> Result<usize> {
        let updated: Vec<(Vec<Option<usize>>, Vec<f64>)> = positives
            .par_iter()
            .map(|p| {
                let (_, latent) = self.score(model, p.image, p.row)?;
                let seg = self.features(p.image, p.row, &latent)?;
                Ok((latent, seg))
            })
            .collect::<Result<_>>()?;
        let mut changed = 0;
        for (p, (latent, seg)) in positives.iter_mut().zip(updated) {
            if p.latent != latent {
                changed += 1;
            }
            p.latent = latent;
            p.seg = seg;
        }
        Ok(changed)
    }

    fn run(&self, gts: &[Vec<BoxF>]) -> Result<Option<(LinearModel, Vec<RoundLog>)>> {
        let cfg = self.cfg;
        let mut pos_keys = Vec::new();
        let mut neg_pool = Vec::new();
        for (image, b) in self.bundles.iter().enumerate() {
            let boxes: Vec<BoxF> = b.boxes.iter().map(|c| c.bbox).collect();
            for (row, label) in assign_labels(&boxes, &gts[image], cfg.pos_iou, cfg.neg_iou)
                .into_iter()
                .enumerate()
            {
                match label {
                    Label::Positive => pos_keys.push((image, row)),
                    Label::Negative => neg_pool.push((image, row)),
                    Label::Excluded => {}
                }
            }
        }
        if pos_keys.is_empty() {
            return Ok(None);
        }

        let none = vec![None; self.n_classes];
        let mut positives: Vec<TrainInstance> = pos_keys
            .par_iter()
            .map(|&(image, row)| {
                let b = &self.bundles[image];
                let latent = init_latent(&b.boxes[row].bbox, b, self.n_classes, self.lambda)?;
                let seg = self.features(image, row, &latent)?;
                Ok(TrainInstance {
                    image,
                    row,
                    label: 1.0,
                    latent,
                    seg,
                })
            })
            .collect::<Result<_>>()?;

        let b0 = &self.bundles[0];
        let mut model = LinearModel::zeros(b0.appearance.cols(), b0.context.cols(), self.seg_len());
        let mut log = Vec::with_capacity(cfg.outer_iters);
        for round in 0..cfg.outer_iters {
            let changed = if round == 0 {
                positives.iter().filter(|p| p.latent != none).count()
            } else {
                self.relabel_positives(&model, &mut positives)?
            };

            let scored: Vec<NegCandidate> = neg_pool
                .par_iter()
                .map(|&(image, row)| {
                    let (score, latent) = self.score(&model, image, row)?;
                    Ok(NegCandidate {
                        image,
                        row,
                        score,
                        latent,
                    })
                })
                .collect::<Result<_>>()?;
            let hard = mine_hard_negatives(scored, cfg.neg_cache_cap);
            let negatives: Vec<TrainInstance> = hard
                .par_iter()
                .map(|c| {
                    Ok(TrainInstance {
                        image: c.image,
                        row: c.row,
                        label: -1.0,
                        seg: self.features(c.image, c.row, &c.latent)?,
                        latent: c.latent.clone(),
                    })
                })
                .collect::<Result<_>>()?;

            let mut cache = positives.clone();
            cache.extend(negatives);
            let stream = ((self.class as u64) << 32) | round as u64;
            let fit = sgd_fit(&cache, self.bundles, model, cfg, stream)?;
            info!(
                "class {} round {round}: objective {:.6} -> {:.6}, {} positives, {} hard negatives, {changed} latent changes",
                self.class + 1,
                fit.initial_objective,
                fit.final_objective,
                positives.len(),
                hard.len()
            );
            log.push(RoundLog {
                round,
                class: self.class,
                objective_before: fit.initial_objective,
                objective: fit.final_objective,
                num_hard_negs: hard.len(),
                num_latent_changed: changed,
            });
            model = fit.model;
        }
        Ok(Some((model, log)))
    }
}

/// Trains one detector per class on every image of `dataset`.
type ClassFit = (LinearModel, Vec<RoundLog>);

pub fn train(dataset: &Dataset, cfg: &TrainConfig, grid: GridSpec, lambda: f64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.bundles.is_empty() {
        return Err(Error::Invalid("no training images".into()));
    }
    let stripped: Vec<FeatureBundle>;
    let bundles: &[FeatureBundle] = if cfg.use_segmentation {
        &dataset.bundles
    } else {
        stripped = dataset
            .bundles
            .iter()
            .map(FeatureBundle::without_segments)
            .collect();
        &stripped
    };
    let n_classes = dataset.n_classes();
    let mut weights = ModelWeights::zeros(
        &dataset.class_names,
        grid,
        lambda,
        dataset.appearance_dim(),
        dataset.context_dim(),
    );

    let by_image = dataset.gt_by_image();
    let per_class: Vec<Result<Option<ClassFit>>> = (0..n_classes)
        .into_par_iter()
        .map(|class| {
            let gts: Vec<Vec<BoxF>> = bundles
                .iter()
                .map(|b| {
                    by_image
                        .get(b.image_id.as_str())
                        .map(|v| v.iter().filter(|g| g.class == class).map(|g| g.bbox).collect())
                        .unwrap_or_default()
                })
                .collect();
            ClassContext {
                bundles,
                class,
                n_classes,
                grid,
                lambda,
                cfg,
            }
            .run(&gts)
        })
        .collect();

    let mut log = Vec::new();
    for (class, res) in per_class.into_iter().enumerate() {
        match res? {
            Some((model, class_log)) => {
                let name = dataset.class_names[class].clone();
                weights.classes[class] = model.into_weights(&name, true);
                log.extend(class_log);
            }
            None => warn!("{}; skipping it", Error::NoPositives(class + 1)),
        }
    }
    log.sort_by_key(|r| (r.round, r.class));
    Ok(TrainOutcome { weights, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CandidateBox;
    use crate::formats::FeatureMatrix;
    use crate::geometry::{ImageDims, PixelRect};
    use crate::mask::SegmentMask;
    use crate::segfeat::{Segment, DEFAULT_LAMBDA};

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxF {
        BoxF { x1, y1, x2, y2 }
    }

    #[test]
    fn label_rule() {
        let gt = vec![bx(0.0, 0.0, 9.0, 9.0)];
        let boxes = vec![
            bx(0.0, 0.0, 9.0, 9.0),
            bx(30.0, 30.0, 39.0, 39.0),
            // 40 / 100 overlap with a same-size box -> IoU 40/160 = 0.25; use a wider box
            bx(0.0, 0.0, 9.0, 24.0),
        ];
        let labels = assign_labels(&boxes, &gt, 0.5, 0.3);
        assert_eq!(labels[0], Label::Positive);
        assert_eq!(labels[1], Label::Negative);
        // IoU 100 / 250 = 0.4 -> excluded
        assert_eq!(labels[2], Label::Excluded);

        let mut rev = boxes.clone();
        rev.reverse();
        let mut back = assign_labels(&rev, &gt, 0.5, 0.3);
        back.reverse();
        assert_eq!(back, labels);
    }

    fn bundle(segs: Vec<Segment>, boxes: Vec<BoxF>, app: Vec<Vec<f32>>) -> FeatureBundle {
        let n = boxes.len();
        let cands = boxes
            .into_iter()
            .enumerate()
            .map(|(i, bbox)| CandidateBox {
                box_id: i as u32,
                bbox,
            })
            .collect();
        FeatureBundle::new(
            "img",
            ImageDims::new(40, 40),
            cands,
            FeatureMatrix::from_rows(app[0].len(), &app).unwrap(),
            FeatureMatrix::zeros(n, 1),
            segs,
        )
        .unwrap()
    }

    fn seg(id: u32, r: PixelRect, n: usize) -> Segment {
        Segment::new(
            SegmentMask::from_rect("img", id, ImageDims::new(40, 40), r).unwrap(),
            vec![0.0; n],
        )
    }

    #[test]
    fn init_latent_examples() {
        let p = bx(0.0, 0.0, 9.0, 9.0);
        let empty = bundle(vec![], vec![p], vec![vec![0.0]]);
        assert_eq!(
            init_latent(&p, &empty, 2, DEFAULT_LAMBDA).unwrap(),
            vec![None, None]
        );

        let one = bundle(
            vec![seg(
                5,
                PixelRect {
                    x1: 30,
                    y1: 30,
                    x2: 35,
                    y2: 35,
                },
                2,
            )],
            vec![p],
            vec![vec![0.0]],
        );
        assert_eq!(
            init_latent(&p, &one, 2, DEFAULT_LAMBDA).unwrap(),
            vec![Some(0); 2]
        );

        // IoUs with p: 20/100 = 0.2, 90/100 = 0.9, 40/100 = 0.4
        let three = bundle(
            vec![
                seg(
                    0,
                    PixelRect {
                        x1: 0,
                        y1: 0,
                        x2: 9,
                        y2: 1,
                    },
                    2,
                ),
                seg(
                    1,
                    PixelRect {
                        x1: 0,
                        y1: 0,
                        x2: 9,
                        y2: 8,
                    },
                    2,
                ),
                seg(
                    2,
                    PixelRect {
                        x1: 0,
                        y1: 0,
                        x2: 9,
                        y2: 3,
                    },
                    2,
                ),
            ],
            vec![p],
            vec![vec![0.0]],
        );
        assert_eq!(
            init_latent(&p, &three, 2, DEFAULT_LAMBDA).unwrap(),
            vec![Some(1); 2]
        );
    }

    fn neg(image: usize, row: usize, score: f64) -> NegCandidate {
        NegCandidate {
            image,
            row,
            score,
            latent: vec![],
        }
    }

    #[test]
    fn mining_examples() {
        assert!(mine_hard_negatives(vec![neg(0, 0, -1.5), neg(0, 1, -2.0)], 10).is_empty());
        let kept = mine_hard_negatives(vec![neg(0, 0, 0.2), neg(0, 1, -0.5), neg(1, 0, 0.5)], 2);
        let scores: Vec<f64> = kept.iter().map(|c| c.score).collect();
        assert_eq!(scores, vec![0.5, 0.2]);
        let dup = mine_hard_negatives(vec![neg(0, 0, 0.2), neg(0, 0, 0.2), neg(0, 1, 0.1)], 10);
        assert_eq!(dup.len(), 2);
    }

    /// One image whose boxes carry a single appearance feature: +2 for
    /// positives, -2 for negatives.
    fn toy_cache(n: usize) -> (Vec<FeatureBundle>, Vec<TrainInstance>) {
        let boxes: Vec<BoxF> = (0..2 * n).map(|i| bx(i as f64, 0.0, i as f64, 0.0)).collect();
        let app: Vec<Vec<f32>> = (0..2 * n).map(|i| vec![if i < n { 2.0 } else { -2.0 }]).collect();
        let b = bundle(vec![], boxes, app);
        let cache = (0..2 * n)
            .map(|row| TrainInstance {
                image: 0,
                row,
                label: if row < n { 1.0 } else { -1.0 },
                latent: vec![],
                seg: vec![],
            })
            .collect();
        (vec![b], cache)
    }

    #[test]
    fn separable_toy_is_learned() {
        let (bundles, cache) = toy_cache(20);
        let cfg = TrainConfig {
            c_reg: 10.0,
            sgd: SgdConfig {
                epochs: 30,
                ..SgdConfig::default()
            },
            ..TrainConfig::default()
        };
        let fit = sgd_fit(&cache, &bundles, LinearModel::zeros(1, 1, 0), &cfg, 0).unwrap();
        assert!(fit.model.app[0] > 0.0);
        for inst in &cache {
            assert!(inst.label * fit.model.decision(inst, &bundles) > 0.0);
        }
        assert!(fit.final_objective < fit.initial_objective);
    }

    #[test]
    fn tiny_c_shrinks_weights() {
        let (bundles, cache) = toy_cache(20);
        let start = LinearModel {
            app: vec![3.0],
            ctx: vec![1.0],
            seg: vec![],
            bias: 0.0,
        };
        let cfg = TrainConfig {
            c_reg: 1e-9,
            sgd: SgdConfig {
                learning_rate: 0.2,
                epochs: 50,
                decay: 0.0,
                ..SgdConfig::default()
            },
            ..TrainConfig::default()
        };
        let fit = sgd_fit(&cache, &bundles, start, &cfg, 0).unwrap();
        assert!(fit.model.app[0].abs() < 1e-6, "{:?}", fit.model);
        assert!(fit.model.ctx[0].abs() < 1e-6);
    }

    #[test]
    fn objective_never_increases_and_is_seeded() {
        let (bundles, cache) = toy_cache(15);
        for seed in 0..5 {
            let cfg = TrainConfig {
                sgd: SgdConfig {
                    seed,
                    ..SgdConfig::default()
                },
                ..TrainConfig::default()
            };
            let a = sgd_fit(&cache, &bundles, LinearModel::zeros(1, 1, 0), &cfg, 3).unwrap();
            assert!(a.final_objective < a.initial_objective);
            let recomputed = objective(&a.model, &cache, &bundles, cfg.c_reg);
            assert_eq!(recomputed, a.final_objective);
            let b = sgd_fit(&cache, &bundles, LinearModel::zeros(1, 1, 0), &cfg, 3).unwrap();
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (bundles, cache) = toy_cache(15);
        let cfg = TrainConfig {
            c_reg: 1.0,
            sgd: SgdConfig {
                learning_rate: 10.0,
                decay: 0.0,
                ..SgdConfig::default()
            },
            ..TrainConfig::default()
        };
        let err = sgd_fit(&cache, &bundles, LinearModel::zeros(1, 1, 0), &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
        assert!(err.is_numerical());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            c_reg: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            neg_iou: 0.6,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            neg_iou: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
