//! Quantitative evaluation: average precision over IoU thresholds and
//! object scales, anchor-quality tracking (average top-k distance of
//! matched anchors), duplicate-prediction counting, and the metrics CSV.

use crate::boxes::{iou, BoxCxCyWh};
use crate::denoise::atd;
use crate::error::{Error, Result};
use crate::hungarian::hungarian;
use crate::loss::{matching_cost, CostConfig, LossConfig};
use crate::model::Detector;

/// One detection in a shared evaluation pool.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub image_id: usize,
    pub label: usize,
    pub score: f64,
    pub bbox: BoxCxCyWh,
}

/// One ground-truth object.
#[derive(Debug, Clone, Copy)]
pub struct GtObject {
    pub image_id: usize,
    pub label: usize,
    pub bbox: BoxCxCyWh,
}

/// Evaluation summary. AP values are fractions in [0, 1]; the CSV reports
/// them scaled by 100.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub atd100: f64,
    pub atd100_small: f64,
    pub duplicate_rate: f64,
}

/// Area thresholds in normalized units. The defaults rescale the standard
/// 32^2 / 96^2 pixel cutoffs by a 640-pixel reference resolution.
#[derive(Debug, Clone, Copy)]
pub struct AreaRanges {
    pub small_max: f64,
    pub medium_max: f64,
}

impl Default for AreaRanges {
    fn default() -> Self {
        AreaRanges {
            small_max: (32.0 / 640.0) * (32.0 / 640.0),
            medium_max: (96.0 / 640.0) * (96.0 / 640.0),
        }
    }
}

impl AreaRanges {
    fn bucket(&self, range: AreaBucket) -> (f64, f64) {
        match range {
            AreaBucket::All => (0.0, f64::INFINITY),
            AreaBucket::Small => (0.0, self.small_max),
            AreaBucket::Medium => (self.small_max, self.medium_max),
            AreaBucket::Large => (self.medium_max, f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AreaBucket {
    All,
    Small,
    Medium,
    Large,
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Greedy score-descending matching at one IoU threshold and area range,
/// with out-of-range objects ignored rather than penalized. Returns the
/// 101-point interpolated AP, or `None` when the range holds no ground
/// truth for the class.
fn ap_single(
    dets: &[Detection],
    gts: &[GtObject],
    class: usize,
    iou_t: f64,
    range: (f64, f64),
) -> Option<f64> {
    // detections of this class sorted by score descending, stable on
    // (image, original order) for determinism
    let mut ds: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.label == class)
        .map(|(i, d)| (i, d))
        .collect();
    ds.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap()
            .then(a.1.image_id.cmp(&b.1.image_id))
            .then(a.0.cmp(&b.0))
    });

    let class_gts: Vec<(usize, &GtObject)> = gts
        .iter()
        .enumerate()
        .filter(|(_, g)| g.label == class)
        .collect();
    let gt_ignored: Vec<bool> = class_gts
        .iter()
        .map(|(_, g)| {
            let a = g.bbox.area();
            a < range.0 || a >= range.1
        })
        .collect();
    let npos = gt_ignored.iter().filter(|&&ig| !ig).count();
    if npos == 0 {
        return None;
    }

    let mut gt_taken = vec![false; class_gts.len()];
    let mut tps = Vec::with_capacity(ds.len());
    let mut fps = Vec::with_capacity(ds.len());
    for (_, d) in &ds {
        // best available GT in the same image; prefer non-ignored
        let mut best: Option<(usize, f64, bool)> = None;
        for (gi, (_, g)) in class_gts.iter().enumerate() {
            if g.image_id != d.image_id || gt_taken[gi] {
                continue;
            }
            let v = iou(d.bbox.to_xyxy(), g.bbox.to_xyxy());
            if v < iou_t {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bv, big)) => {
                    if big && !gt_ignored[gi] {
                        true // switch from an ignored match to a real one
                    } else if !big && gt_ignored[gi] {
                        false
                    } else {
                        v > bv
                    }
                }
            };
            if better {
                best = Some((gi, v, gt_ignored[gi]));
            }
        }
        match best {
            Some((gi, _, ignored)) => {
                gt_taken[gi] = true;
                if ignored {
                    // matched an out-of-range object: drop from the curve
                    continue;
                }
                tps.push(1.0);
                fps.push(0.0);
            }
            None => {
                let a = d.bbox.area();
                if a < range.0 || a >= range.1 {
                    continue; // unmatched and out of range: ignored
                }
                tps.push(0.0);
                fps.push(1.0);
            }
        }
    }

    // cumulative precision/recall, then the 101-point interpolated mean
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recalls = Vec::with_capacity(tps.len());
    let mut precisions = Vec::with_capacity(tps.len());
    for i in 0..tps.len() {
        tp += tps[i];
        fp += fps[i];
        recalls.push(tp / npos as f64);
        precisions.push(tp / (tp + fp));
    }
    // envelope: precision at recall >= r
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut total = 0.0;
    for ri in 0..=100 {
        let r = ri as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map_or(0.0, |idx| precisions[idx]);
        total += p;
    }
    Some(total / 101.0)
}

fn ap_over(
    dets: &[Detection],
    gts: &[GtObject],
    classes: &[usize],
    thresholds: &[f64],
    range: (f64, f64),
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &t in thresholds {
        for &c in classes {
            if let Some(ap) = ap_single(dets, gts, c, t, range) {
                sum += ap;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Average precision over the standard IoU thresholds and object scales.
/// Only the AP fields of [`EvalResult`] are filled here; the harness adds
/// the anchor-distance and duplicate metrics.
pub fn evaluate_ap(dets: &[Detection], gts: &[GtObject], areas: &AreaRanges) -> EvalResult {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.label).collect();
    classes.sort_unstable();
    classes.dedup();
    let all = areas.bucket(AreaBucket::All);
    EvalResult {
        ap: ap_over(dets, gts, &classes, &IOU_THRESHOLDS, all),
        ap50: ap_over(dets, gts, &classes, &[0.50], all),
        ap75: ap_over(dets, gts, &classes, &[0.75], all),
        ap_small: ap_over(dets, gts, &classes, &IOU_THRESHOLDS, areas.bucket(AreaBucket::Small)),
        ap_medium: ap_over(dets, gts, &classes, &IOU_THRESHOLDS, areas.bucket(AreaBucket::Medium)),
        ap_large: ap_over(dets, gts, &classes, &IOU_THRESHOLDS, areas.bucket(AreaBucket::Large)),
        ..EvalResult::default()
    }
}

/// Fraction of above-threshold predictions overlapping a higher-ranked
/// same-class same-image prediction at IoU >= `iou_thresh`. Equal scores
/// rank by insertion order, so an exact duplicate pair counts once.
pub fn duplicate_rate(dets: &[Detection], score_thresh: f64, iou_thresh: f64) -> f64 {
    let mut kept: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.score >= score_thresh)
        .collect();
    if kept.is_empty() {
        return 0.0;
    }
    kept.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap()
            .then(a.0.cmp(&b.0))
    });
    let mut duplicates = 0usize;
    for (i, (_, d)) in kept.iter().enumerate() {
        for (_, higher) in kept.iter().take(i) {
            if higher.image_id == d.image_id
                && higher.label == d.label
                && iou(higher.bbox.to_xyxy(), d.bbox.to_xyxy()) >= iou_thresh
            {
                duplicates += 1;
                break;
            }
        }
    }
    duplicates as f64 / kept.len() as f64
}

/// (gt, initial anchor) pairs over a dataset: the anchor is the decoder's
/// initial box whose final-layer refinement the matcher assigned to the GT.
pub fn matched_anchor_pairs(
    model: &Detector,
    images: &[(Vec<f64>, Vec<(usize, BoxCxCyWh)>)],
    cost_cfg: &CostConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<(BoxCxCyWh, BoxCxCyWh, bool)>> {
    let mut pairs = Vec::new();
    for (image, annotations) in images {
        if annotations.is_empty() {
            continue;
        }
        let out = model.forward(image, None, false)?;
        let last = out.matching.last().unwrap();
        let gt_labels: Vec<usize> = annotations.iter().map(|(c, _)| *c).collect();
        let gt_boxes: Vec<BoxCxCyWh> = annotations.iter().map(|(_, b)| *b).collect();
        let cost = matching_cost(
            &last.probs(),
            &last.box_values(),
            &gt_labels,
            &gt_boxes,
            last.num_classes(),
            cost_cfg,
            loss_cfg,
        );
        let assignment = hungarian(&cost)?;
        for &(p, g) in &assignment.pairs {
            pairs.push((gt_boxes[g], out.initial_anchors[p], false));
        }
    }
    Ok(pairs)
}

/// Average top-k distance between matched GTs and their initial anchors,
/// over all objects and restricted to small ones.
pub fn track_atd(
    model: &Detector,
    images: &[(Vec<f64>, Vec<(usize, BoxCxCyWh)>)],
    k: usize,
    areas: &AreaRanges,
    cost_cfg: &CostConfig,
    loss_cfg: &LossConfig,
) -> Result<(f64, Option<f64>)> {
    let mut pairs = matched_anchor_pairs(model, images, cost_cfg, loss_cfg)?;
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric(
            "anchor distance over a dataset with no matched ground truth".into(),
        ));
    }
    for p in &mut pairs {
        p.2 = p.0.area() < areas.small_max;
    }
    let all: Vec<(BoxCxCyWh, BoxCxCyWh)> = pairs.iter().map(|p| (p.0, p.1)).collect();
    let small: Vec<(BoxCxCyWh, BoxCxCyWh)> = pairs
        .iter()
        .filter(|p| p.2)
        .map(|p| (p.0, p.1))
        .collect();
    let atd_all = atd(&all, k)?;
    let atd_small = if small.is_empty() {
        None
    } else {
        Some(atd(&small, k)?)
    };
    Ok((atd_all, atd_small))
}

/// One metrics-CSV row. AP columns carry values scaled by 100.
#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_bbox: f64,
    pub loss_giou: f64,
    pub loss_dn: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub atd100: f64,
    pub atd100_small: f64,
    pub duplicate_rate: f64,
}

pub const CSV_HEADER: &str =
    "epoch,loss,loss_cls,loss_bbox,loss_giou,loss_dn,ap,ap50,ap75,ap_s,atd100,atd100_small,duplicate_rate";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{:.6}",
            self.epoch,
            self.loss,
            self.loss_cls,
            self.loss_bbox,
            self.loss_giou,
            self.loss_dn,
            self.ap,
            self.ap50,
            self.ap75,
            self.ap_s,
            self.atd100,
            self.atd100_small,
            self.duplicate_rate
        )
    }
}
