//! PASCAL-style detection evaluation: greedy matching, precision/recall
//! curves, average precision and average best overlap.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{create, GroundTruthObject};
use crate::geometry::{iou, BoxF};
use crate::model::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Use the 11-point interpolated AP instead of the all-point area.
    pub eleven_point: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            eleven_point: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    Tp,
    Fp,
    /// Matched only a difficult object: counts as neither TP nor FP.
    Ignored,
}

/// Orders detections of one class for matching: descending score, then
/// image id; the input order is kept for exact ties.
pub fn rank_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
}

fn coords(b: &BoxF) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

/// Greedy matching of ranked detections of one class against that class's
/// ground truth.
///
/// A detection is a TP when some unmatched non-difficult object overlaps it
/// by at least `iou_thresh`; it takes the one with the highest IoU (ties by
/// coordinates, then difficulty, so the result does not depend on file
/// order). Otherwise it is ignored when a difficult object reaches the
/// threshold, and a FP when nothing does.
pub fn match_detections(
    dets: &[Detection],
    gts: &[&GroundTruthObject],
    iou_thresh: f64,
) -> Vec<MatchOutcome> {
    let mut by_image: BTreeMap<&str, Vec<(&GroundTruthObject, bool)>> = BTreeMap::new();
    for g in gts {
        by_image.entry(g.image_id.as_str()).or_default().push((g, false));
    }
    for list in by_image.values_mut() {
        list.sort_by(|a, b| {
            coords(&a.0.bbox)
                .iter()
                .zip(coords(&b.0.bbox).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.difficult.cmp(&b.0.difficult))
        });
    }
    dets.iter()
        .map(|d| {
            let Some(list) = by_image.get_mut(d.image_id.as_str()) else {
                return MatchOutcome::Fp;
            };
            let mut best: Option<(usize, f64)> = None;
            let mut difficult_hit = false;
            for (i, (g, used)) in list.iter().enumerate() {
                let v = iou(&d.bbox, &g.bbox);
                if v < iou_thresh {
                    continue;
                }
                if g.difficult {
                    difficult_hit = true;
                } else if !used && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            match best {
                Some((i, _)) => {
                    list[i].1 = true;
                    MatchOutcome::Tp
                }
                None if difficult_hit => MatchOutcome::Ignored,
                None => MatchOutcome::Fp,
            }
        })
        .collect()
}

/// Precision/recall after each counted detection, in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub n_gt: usize,
    pub n_tp: usize,
    pub n_fp: usize,
}

impl PrCurve {
    /// Builds the curve from match outcomes; `n_gt` counts non-difficult
    /// objects only.
    pub fn new(outcomes: &[MatchOutcome], n_gt: usize) -> Self {
        let mut recall = Vec::new();
        let mut precision = Vec::new();
        let (mut tp, mut fp) = (0usize, 0usize);
        for o in outcomes {
            match o {
                MatchOutcome::Tp => tp += 1,
                MatchOutcome::Fp => fp += 1,
                MatchOutcome::Ignored => continue,
            }
            recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        Self {
            recall,
            precision,
            n_gt,
            n_tp: tp,
            n_fp: fp,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "recall,precision").map_err(io)?;
        for (r, p) in self.recall.iter().zip(&self.precision) {
            writeln!(w, "{r},{p}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Area under the monotone precision envelope (all-point interpolation), or
/// the mean of the envelope at recall 0, 0.1, …, 1 when `eleven_point`.
pub fn average_precision(curve: &PrCurve, eleven_point: bool) -> Result<f64> {
    if curve.n_gt == 0 {
        return Err(Error::ApUndefined);
    }
    let mut env = curve.precision.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    if eleven_point {
        let total: f64 = (0..=10)
            .map(|k| {
                let t = k as f64 / 10.0;
                curve
                    .recall
                    .iter()
                    .position(|&r| r >= t - 1e-12)
                    .map_or(0.0, |i| env[i])
            })
            .sum();
        return Ok(total / 11.0);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in curve.recall.iter().zip(&env) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Ok(ap)
}

/// Unweighted mean of the defined APs; `None` when no class has one.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    mean_defined(aps)
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Average best overlap per class and its mean over classes with objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Abo {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// For every object, the best IoU against the candidate boxes of its image
/// (0 when the image has none), averaged per class.
pub fn mabo(candidates: &BTreeMap<String, Vec<BoxF>>, gts: &[GroundTruthObject], n_classes: usize) -> Abo {
    let mut sums = vec![(0.0, 0usize); n_classes];
    for g in gts {
        let best = candidates
            .get(&g.image_id)
            .map_or(0.0, |c| c.iter().map(|b| iou(b, &g.bbox)).fold(0.0, f64::max));
        let s = &mut sums[g.class];
        s.0 += best;
        s.1 += 1;
    }
    let per_class: Vec<Option<f64>> = sums.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect();
    let mean = mean_defined(&per_class);
    Abo { per_class, mean }
}

/// Results for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub name: String,
    pub ap: Option<f64>,
    pub abo: Option<f64>,
    pub curve: PrCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassResult>,
    pub map: Option<f64>,
    pub mabo: Option<f64>,
    pub iou_thresh: f64,
    pub eleven_point: bool,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    iou_thresh: f64,
    eleven_point: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mabo: Option<f64>,
    classes: Vec<ReportClass<'a>>,
}

#[derive(Serialize)]
struct ReportClass<'a> {
    name: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    abo: Option<f64>,
    n_gt: usize,
    n_tp: usize,
    n_fp: usize,
}

/// Evaluates detections of every class. `candidates` feeds the ABO measure.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    candidates: &BTreeMap<String, Vec<BoxF>>,
    class_names: &[String],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let n_classes = class_names.len();
    if let Some(d) = dets.iter().find(|d| d.class >= n_classes) {
        return Err(Error::Invalid(format!(
            "detection has class {} of {n_classes}",
            d.class + 1
        )));
    }
    if let Some(g) = gts.iter().find(|g| g.class >= n_classes) {
        return Err(Error::Invalid(format!(
            "ground truth has class {} of {n_classes}",
            g.class + 1
        )));
    }
    let abo = mabo(candidates, gts, n_classes);
    let classes: Vec<ClassResult> = (0..n_classes)
        .into_par_iter()
        .map(|c| {
            let mut mine: Vec<Detection> = dets.iter().filter(|d| d.class == c).cloned().collect();
            rank_detections(&mut mine);
            let class_gts: Vec<&GroundTruthObject> = gts.iter().filter(|g| g.class == c).collect();
            let n_gt = class_gts.iter().filter(|g| !g.difficult).count();
            let curve = PrCurve::new(&match_detections(&mine, &class_gts, cfg.iou_thresh), n_gt);
            ClassResult {
                name: class_names[c].clone(),
                ap: average_precision(&curve, cfg.eleven_point).ok(),
                abo: abo.per_class[c],
                curve,
            }
        })
        .collect();
    let aps: Vec<Option<f64>> = classes.iter().map(|c| c.ap).collect();
    Ok(EvalReport {
        map: mean_ap(&aps),
        mabo: abo.mean,
        classes,
        iou_thresh: cfg.iou_thresh,
        eleven_point: cfg.eleven_point,
    })
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

impl EvalReport {
    /// Per-class table in percent, one column per class plus the mean.
    pub fn table(&self) -> String {
        let mut header = vec!["".to_string()];
        header.extend(self.classes.iter().map(|c| c.name.clone()));
        header.push("mean".into());
        let mut ap = vec!["AP".to_string()];
        ap.extend(self.classes.iter().map(|c| pct(c.ap)));
        ap.push(pct(self.map));
        let mut abo = vec!["ABO".to_string()];
        abo.extend(self.classes.iter().map(|c| pct(c.abo)));
        abo.push(pct(self.mabo));
        let widths: Vec<usize> = (0..header.len())
            .map(|i| [&header, &ap, &abo].iter().map(|r| r[i].len()).max().unwrap())
            .collect();
        let mut out = String::new();
        for row in [&header, &ap, &abo] {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        let file = ReportFile {
            iou_thresh: self.iou_thresh,
            eleven_point: self.eleven_point,
            map: self.map,
            mabo: self.mabo,
            classes: self
                .classes
                .iter()
                .map(|c| ReportClass {
                    name: &c.name,
                    ap: c.ap,
                    abo: c.abo,
                    n_gt: c.curve.n_gt,
                    n_tp: c.curve.n_tp,
                    n_fp: c.curve.n_fp,
                })
                .collect(),
        };
        toml::to_string(&file).map_err(|e| Error::Invalid(e.to_string()))
    }

    /// Writes `report.toml`, `report.txt` and one `pr_<class>.csv` per class
    /// into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report = dir.join("report.toml");
        std::fs::write(&report, self.to_toml()?).map_err(|e| Error::io(&report, e))?;
        let table = dir.join("report.txt");
        std::fs::write(&table, self.table()).map_err(|e| Error::io(&table, e))?;
        for c in &self.classes {
            c.curve
                .write_csv(&dir.join(format!("pr_{}.csv", file_stem(&c.name))))?;
        }
        Ok(())
    }
}
