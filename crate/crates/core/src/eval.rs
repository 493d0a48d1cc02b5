//! Role-mAP with IoU matching and the simple/complex scene split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::graph::{detection_scores, infer, ModelConfig, SceneInput};
use crate::math::{ParamStore, Tensor};
use crate::train::LabeledScene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiPrediction {
    pub image_id: String,
    pub human: BoundingBox,
    pub object: BoundingBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiGroundTruth {
    pub image_id: String,
    pub human: BoundingBox,
    pub object: BoundingBox,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub ground_truth: usize,
    pub predictions: usize,
    /// `None` for classes without ground truth.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: f64,
    pub ground_truth: usize,
    pub predictions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complex: Option<Box<EvalReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simple: Option<Box<EvalReport>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub iou_thresh: f64,
    /// Known-object mode: per class, the only images whose predictions count.
    pub known_object: Option<BTreeMap<usize, BTreeSet<String>>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { iou_thresh: 0.5, known_object: None }
    }
}

/// Area under the precision-recall curve with the precision envelope.
/// `tp` lists match outcomes in ranked order.
pub fn average_precision(tp: &[bool], ground_truth: usize) -> f64 {
    if ground_truth == 0 {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / ground_truth as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for k in (0..precision.len() - 1).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    (1..recall.len()).map(|k| (recall[k] - recall[k - 1]) * precision[k]).sum()
}

/// Ranks one class's predictions and marks each as matched or not.
/// Ties keep input order; each ground truth is used once, preferring the
/// one whose weaker box IoU is largest.
fn match_class(preds: &[&HoiPrediction], gt: &[&HoiGroundTruth], thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (g, t) in gt.iter().enumerate() {
        by_image.entry(t.image_id.as_str()).or_default().push(g);
    }
    let mut used = vec![false; gt.len()];
    order
        .into_iter()
        .map(|p| {
            let pred = preds[p];
            let mut best: Option<(usize, f64)> = None;
            for &g in by_image.get(pred.image_id.as_str()).into_iter().flatten() {
                if used[g] {
                    continue;
                }
                let q = iou(&pred.human, &gt[g].human).min(iou(&pred.object, &gt[g].object));
                if q > thresh && best.is_none_or(|(_, b)| q > b) {
                    best = Some((g, q));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            best.is_some()
        })
        .collect()
}

fn check_inputs(preds: &[HoiPrediction], gt: &[HoiGroundTruth], opts: &EvalOptions) -> Result<()> {
    if !(0.0..1.0).contains(&opts.iou_thresh) {
        return Err(Error::invalid("iou_thresh", format!("{} outside [0, 1)", opts.iou_thresh)));
    }
    for (i, p) in preds.iter().enumerate() {
        if !p.score.is_finite() {
            return Err(Error::invalid("predictions", format!("predictions[{i}].score is {}", p.score)));
        }
        for (field, b) in [("human", &p.human), ("object", &p.object)] {
            b.validate().map_err(|e| Error::invalid("predictions", format!("predictions[{i}].{field}: {e}")))?;
        }
    }
    for (i, g) in gt.iter().enumerate() {
        for (field, b) in [("human", &g.human), ("object", &g.object)] {
            b.validate().map_err(|e| Error::invalid("ground_truth", format!("ground_truth[{i}].{field}: {e}")))?;
        }
    }
    Ok(())
}

pub fn evaluate_map(preds: &[HoiPrediction], gt: &[HoiGroundTruth], iou_thresh: f64) -> Result<EvalReport> {
    evaluate_with(preds, gt, &EvalOptions { iou_thresh, ..EvalOptions::default() })
}

pub fn evaluate_with(preds: &[HoiPrediction], gt: &[HoiGroundTruth], opts: &EvalOptions) -> Result<EvalReport> {
    check_inputs(preds, gt, opts)?;
    if gt.is_empty() {
        return Err(Error::domain("evaluate_map", "no ground truth to evaluate"));
    }
    let classes: BTreeSet<usize> = preds.iter().map(|p| p.class).chain(gt.iter().map(|g| g.class)).collect();
    let mut reports = Vec::with_capacity(classes.len());
    let mut aps = Vec::new();
    let (mut n_preds, mut n_gt) = (0, 0);
    for class in classes {
        let allowed = opts.known_object.as_ref().map(|k| k.get(&class));
        let keep = |image: &str| match allowed {
            None => true,
            Some(None) => false,
            Some(Some(set)) => set.contains(image),
        };
        let p: Vec<&HoiPrediction> = preds.iter().filter(|p| p.class == class && keep(&p.image_id)).collect();
        let g: Vec<&HoiGroundTruth> = gt.iter().filter(|g| g.class == class && keep(&g.image_id)).collect();
        let ap = (!g.is_empty()).then(|| average_precision(&match_class(&p, &g, opts.iou_thresh), g.len()));
        aps.extend(ap);
        n_preds += p.len();
        n_gt += g.len();
        reports.push(ClassReport { class, ground_truth: g.len(), predictions: p.len(), ap });
    }
    if aps.is_empty() {
        return Err(Error::domain("evaluate_map", "no ground truth left after known-object filtering"));
    }
    Ok(EvalReport {
        classes: reports,
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        ground_truth: n_gt,
        predictions: n_preds,
        complex: None,
        simple: None,
    })
}

/// Evaluates everything, then the complex and simple image subsets
/// separately. A subset without ground truth gets no sub-report.
pub fn evaluate_split(
    preds: &[HoiPrediction],
    gt: &[HoiGroundTruth],
    opts: &EvalOptions,
    simple_images: &BTreeSet<String>,
) -> Result<EvalReport> {
    let mut report = evaluate_with(preds, gt, opts)?;
    let subset = |simple: bool| -> Option<Box<EvalReport>> {
        let p: Vec<_> = preds.iter().filter(|p| simple_images.contains(&p.image_id) == simple).cloned().collect();
        let g: Vec<_> = gt.iter().filter(|g| simple_images.contains(&g.image_id) == simple).cloned().collect();
        evaluate_with(&p, &g, opts).ok().map(Box::new)
    };
    report.complex = subset(false);
    report.simple = subset(true);
    Ok(report)
}

/// Anything with subject and object counts.
pub trait InstanceCounts {
    fn counts(&self) -> (usize, usize);
}

impl InstanceCounts for SceneInput {
    fn counts(&self) -> (usize, usize) {
        (self.n(), self.m())
    }
}

impl InstanceCounts for LabeledScene {
    fn counts(&self) -> (usize, usize) {
        self.input.counts()
    }
}

impl<T: InstanceCounts> InstanceCounts for &T {
    fn counts(&self) -> (usize, usize) {
        (**self).counts()
    }
}

/// Partitions into `(complex, simple)`; simple means one subject and one
/// object.
pub fn split_by_complexity<T: InstanceCounts + Clone>(scenes: &[T]) -> (Vec<T>, Vec<T>) {
    let (simple, complex): (Vec<T>, Vec<T>) = scenes.iter().cloned().partition(|s| s.counts() == (1, 1));
    (complex, simple)
}

/// One prediction per pair and class, scored `y * s_h * s_o`.
pub fn scene_predictions(image_id: &str, scene: &SceneInput, y: &Tensor) -> Result<Vec<HoiPrediction>> {
    let scores = detection_scores(y, scene)?;
    let a = y.shape()[1];
    Ok(scores
        .iter()
        .enumerate()
        .map(|(k, &score)| {
            let pair = k / a;
            HoiPrediction {
                image_id: image_id.to_string(),
                human: scene.subjects[pair / scene.m()].bbox,
                object: scene.objects[pair % scene.m()].bbox,
                class: k % a,
                score,
            }
        })
        .collect())
}

pub fn scene_ground_truth(scene: &LabeledScene) -> Vec<HoiGroundTruth> {
    let m = scene.input.m();
    let mut out = Vec::new();
    for (pair, row) in scene.labels.iter().enumerate() {
        for (class, _) in row.iter().enumerate().filter(|(_, &l)| l) {
            out.push(HoiGroundTruth {
                image_id: scene.id.clone(),
                human: scene.input.subjects[pair / m].bbox,
                object: scene.input.objects[pair % m].bbox,
                class,
            });
        }
    }
    out
}

/// Runs the model on labeled scenes and evaluates the predictions, with
/// the complexity split.
pub fn evaluate_model(params: &ParamStore, cfg: &ModelConfig, scenes: &[LabeledScene], opts: &EvalOptions) -> Result<EvalReport> {
    let mut preds = Vec::new();
    let mut gt = Vec::new();
    let mut simple = BTreeSet::new();
    for scene in scenes {
        let y = infer(params, cfg, &scene.input)?;
        preds.extend(scene_predictions(&scene.id, &scene.input, &y)?);
        gt.extend(scene_ground_truth(scene));
        if scene.counts() == (1, 1) {
            simple.insert(scene.id.clone());
        }
    }
    evaluate_split(&preds, &gt, opts, &simple)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn table(f: &mut fmt::Formatter<'_>, r: &EvalReport, title: &str) -> fmt::Result {
            writeln!(f, "{title}")?;
            writeln!(f, "{:>6} {:>6} {:>8} {:>8}", "class", "gt", "preds", "AP")?;
            for c in &r.classes {
                let ap = c.ap.map_or_else(|| "-".to_string(), |ap| format!("{:.4}", ap));
                writeln!(f, "{:>6} {:>6} {:>8} {:>8}", c.class, c.ground_truth, c.predictions, ap)?;
            }
            writeln!(f, "{:>6} {:>6} {:>8} {:>8.4}", "mAP", r.ground_truth, r.predictions, r.map)
        }
        table(f, self, "all")?;
        for (name, sub) in [("complex", &self.complex), ("simple", &self.simple)] {
            if let Some(sub) = sub {
                writeln!(f)?;
                table(f, sub, name)?;
            }
        }
        Ok(())
    }
}
