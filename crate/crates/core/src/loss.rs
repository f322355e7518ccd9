//! Bipartite matching cost, focal/L1/GIoU losses, and total loss assembly
//! across decoder layers, denoising groups, and the encoder's intermediate
//! head.
//!
//! Matching runs on plain values (the assignment is a discrete choice);
//! the losses on matched pairs are tensor composites so gradients flow to
//! every parameter behind them.

use crate::boxes::{giou, giou_tensor, l1_box_distance, BoxCxCyWh};
use crate::error::{Error, Result};
use crate::hungarian::{hungarian, CostMatrix, MatchAssignment};
use crate::tensor::Tensor;

const PROB_EPS: f64 = 1e-8;

/// Matching cost coefficients.
#[derive(Debug, Clone, Copy)]
pub struct CostConfig {
    pub cost_class: f64,
    pub cost_bbox: f64,
    pub cost_giou: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            cost_class: 2.0,
            cost_bbox: 5.0,
            cost_giou: 2.0,
        }
    }
}

/// Loss coefficients and focal parameters.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub cls_coef: f64,
    pub l1_coef: f64,
    pub giou_coef: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            cls_coef: 1.0,
            l1_coef: 5.0,
            giou_coef: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// One prediction set: boxes [Q, 4] in cxcywh and class logits [Q, C].
#[derive(Clone)]
pub struct LayerPred {
    pub boxes: Tensor,
    pub logits: Tensor,
}

impl LayerPred {
    pub fn num_queries(&self) -> usize {
        self.boxes.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Post-sigmoid probabilities as plain values, row-major [Q * C].
    pub fn probs(&self) -> Vec<f64> {
        self.logits
            .data()
            .iter()
            .map(|&l| crate::tensor::sigmoid(l))
            .collect()
    }

    /// Box values as structs.
    pub fn box_values(&self) -> Vec<BoxCxCyWh> {
        let d = self.boxes.data();
        d.chunks(4)
            .map(|c| BoxCxCyWh::new(c[0], c[1], c[2], c[3]))
            .collect()
    }
}

/// Binary focal term on a probability. `positive` selects the target.
pub fn focal_loss(prob: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Focal-style classification cost used inside matching: the positive term
/// minus the negative term, so confident correct classes price low.
pub fn focal_class_cost(prob: f64, alpha: f64, gamma: f64) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = alpha * (1.0 - p).powf(gamma) * (-p.ln());
    let neg = (1.0 - alpha) * p.powf(gamma) * (-(1.0 - p).ln());
    pos - neg
}

/// Build the P x G matching cost:
/// cost_class * focal_class_cost(prob of the GT class)
/// + cost_bbox * l1(boxes) + cost_giou * (1 - giou(boxes)).
pub fn matching_cost(
    pred_probs: &[f64],
    pred_boxes: &[BoxCxCyWh],
    gt_labels: &[usize],
    gt_boxes: &[BoxCxCyWh],
    num_classes: usize,
    cfg: &CostConfig,
    loss_cfg: &LossConfig,
) -> CostMatrix {
    let p = pred_boxes.len();
    let g = gt_boxes.len();
    debug_assert_eq!(pred_probs.len(), p * num_classes);
    debug_assert_eq!(gt_labels.len(), g);
    let mut data = vec![0.0; p * g];
    for (pi, pb) in pred_boxes.iter().enumerate() {
        for (gi, gb) in gt_boxes.iter().enumerate() {
            let prob = pred_probs[pi * num_classes + gt_labels[gi]];
            let cls = focal_class_cost(prob, loss_cfg.focal_alpha, loss_cfg.focal_gamma);
            let l1 = l1_box_distance(*pb, *gb);
            let overlap = giou(pb.to_xyxy(), gb.to_xyxy());
            data[pi * g + gi] =
                cfg.cost_class * cls + cfg.cost_bbox * l1 + cfg.cost_giou * (1.0 - overlap);
        }
    }
    CostMatrix::new(p, g, data)
}

/// Sum of focal terms over [Q, C] logits against one-hot targets
/// (`target_class[q] = None` means all-background).
fn focal_sum(logits: &Tensor, target_class: &[Option<usize>], cfg: &LossConfig) -> Result<Tensor> {
    let shape = logits.shape();
    let (q, c) = (shape[0], shape[1]);
    debug_assert_eq!(target_class.len(), q);
    let mut onehot = vec![0.0; q * c];
    for (qi, t) in target_class.iter().enumerate() {
        if let Some(cls) = t {
            onehot[qi * c + cls] = 1.0;
        }
    }
    let tape = logits.tape();
    let t = tape.constant(onehot, &[q, c])?;
    let one_minus_t = t.neg().add_scalar(1.0);
    let p = logits.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS);
    let one_minus_p = p.neg().add_scalar(1.0);
    // -alpha (1-p)^g log p for targets, -(1-alpha) p^g log(1-p) for background
    let pos = one_minus_p
        .pow_scalar(cfg.focal_gamma)
        .mul(&p.log())?
        .mul_scalar(-cfg.focal_alpha);
    let neg = p
        .pow_scalar(cfg.focal_gamma)
        .mul(&one_minus_p.log())?
        .mul_scalar(-(1.0 - cfg.focal_alpha));
    Ok(t.mul(&pos)?.add(&one_minus_t.mul(&neg)?)?.sum_all())
}

/// Per-layer loss values for reporting.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub cls: f64,
    pub bbox: f64,
    pub giou: f64,
}

impl LossComponents {
    fn add(&mut self, other: LossComponents) {
        self.cls += other.cls;
        self.bbox += other.bbox;
        self.giou += other.giou;
    }
}

pub struct SetLossOutput {
    pub total: Tensor,
    pub per_layer: Vec<f64>,
    pub assignments: Vec<MatchAssignment>,
    pub components: LossComponents,
}

/// Loss of one matched prediction set: focal over all queries (matched ones
/// against their GT class, the rest as background) plus L1 and GIoU over the
/// matched boxes, everything normalized by max(1, #GT).
fn layer_loss(
    pred: &LayerPred,
    gt_labels: &[usize],
    gt_boxes: &[BoxCxCyWh],
    assignment: &MatchAssignment,
    cfg: &LossConfig,
) -> Result<(Tensor, LossComponents)> {
    let q = pred.num_queries();
    let norm = 1.0 / gt_boxes.len().max(1) as f64;
    let mut target_class: Vec<Option<usize>> = vec![None; q];
    for &(p, g) in &assignment.pairs {
        target_class[p] = Some(gt_labels[g]);
    }
    let cls = focal_sum(&pred.logits, &target_class, cfg)?.mul_scalar(norm);

    let tape = pred.boxes.tape();
    let (l1, gi) = if assignment.pairs.is_empty() {
        (tape.scalar(0.0), tape.scalar(0.0))
    } else {
        let pred_idx: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
        let gt_flat: Vec<f64> = assignment
            .pairs
            .iter()
            .flat_map(|&(_, g)| gt_boxes[g].coords())
            .collect();
        let matched = pred.boxes.gather_rows(&pred_idx)?;
        let gt_t = tape.constant(gt_flat, &[assignment.pairs.len(), 4])?;
        let l1 = matched.sub(&gt_t)?.abs().sum_all().mul_scalar(norm);
        let gi = giou_tensor(&matched, &gt_t)?
            .neg()
            .add_scalar(1.0)
            .sum_all()
            .mul_scalar(norm);
        (l1, gi)
    };

    let components = LossComponents {
        cls: cls.item(),
        bbox: l1.item(),
        giou: gi.item(),
    };
    let total = cls
        .mul_scalar(cfg.cls_coef)
        .add(&l1.mul_scalar(cfg.l1_coef))?
        .add(&gi.mul_scalar(cfg.giou_coef))?;
    Ok((total, components))
}

/// Match every prediction set independently (decoder layers plus the
/// encoder's selection head, if the caller appends it) and sum the layer
/// losses.
pub fn set_loss(
    layers: &[LayerPred],
    gt_labels: &[usize],
    gt_boxes: &[BoxCxCyWh],
    cost_cfg: &CostConfig,
    cfg: &LossConfig,
) -> Result<SetLossOutput> {
    let assignments: Vec<MatchAssignment> = layers
        .iter()
        .map(|layer| {
            let cost = matching_cost(
                &layer.probs(),
                &layer.box_values(),
                gt_labels,
                gt_boxes,
                layer.num_classes(),
                cost_cfg,
                cfg,
            );
            hungarian(&cost)
        })
        .collect::<Result<_>>()?;
    set_loss_with_assignments(layers, gt_labels, gt_boxes, &assignments, cfg)
}

/// [`set_loss`] with externally supplied per-layer assignments.
pub fn set_loss_with_assignments(
    layers: &[LayerPred],
    gt_labels: &[usize],
    gt_boxes: &[BoxCxCyWh],
    assignments: &[MatchAssignment],
    cfg: &LossConfig,
) -> Result<SetLossOutput> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument {
            op: "set_loss",
            msg: "no prediction sets".into(),
        });
    }
    if layers.len() != assignments.len() {
        return Err(Error::Alignment(format!(
            "{} prediction sets vs {} assignments",
            layers.len(),
            assignments.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut components = LossComponents::default();
    let mut total: Option<Tensor> = None;
    for (layer, assignment) in layers.iter().zip(assignments) {
        let (loss, comp) = layer_loss(layer, gt_labels, gt_boxes, assignment, cfg)?;
        per_layer.push(loss.item());
        components.add(comp);
        total = Some(match total {
            None => loss,
            Some(t) => t.add(&loss)?,
        });
    }
    Ok(SetLossOutput {
        total: total.unwrap(),
        per_layer,
        assignments: assignments.to_vec(),
        components,
    })
}

pub struct DnLossOutput {
    pub total: Tensor,
    pub components: LossComponents,
}

/// Reconstruction loss for the denoising part. Assignment is the identity
/// through `gt_index` (no matching): positives take the full
/// class + L1 + GIoU loss against their source GT, negatives only the
/// background focal term. Per-group losses are normalized by the group's
/// GT count and summed over groups and layers.
pub fn dn_loss(
    dn_layers: &[LayerPred],
    batch: &crate::denoise::DnBatch,
    gt_labels: &[usize],
    gt_boxes: &[BoxCxCyWh],
    cfg: &LossConfig,
) -> Result<DnLossOutput> {
    let dn_q = batch.dn_queries();
    if dn_layers.is_empty() || dn_q == 0 {
        return Err(Error::InvalidArgument {
            op: "dn_loss",
            msg: "no denoising queries".into(),
        });
    }
    let n = batch.gt_per_group;
    let norm = 1.0 / n as f64;

    // layout per group: n positives then n negatives
    let mut target_class: Vec<Option<usize>> = Vec::with_capacity(dn_q);
    let mut pos_rows: Vec<usize> = Vec::new();
    let mut pos_gt: Vec<usize> = Vec::new();
    for (k, group) in batch.groups.iter().enumerate() {
        let base = k * 2 * n;
        for (i, &gi) in group.gt_index.iter().enumerate() {
            target_class.push(Some(gt_labels[gi]));
            pos_rows.push(base + i);
            pos_gt.push(gi);
        }
        for _ in 0..n {
            target_class.push(None);
        }
    }

    let mut components = LossComponents::default();
    let mut total: Option<Tensor> = None;
    for layer in dn_layers {
        if layer.num_queries() != dn_q {
            return Err(Error::Alignment(format!(
                "denoising predictions carry {} queries, batch defines {}",
                layer.num_queries(),
                dn_q
            )));
        }
        let cls = focal_sum(&layer.logits, &target_class, cfg)?.mul_scalar(norm);
        let tape = layer.boxes.tape();
        let matched = layer.boxes.gather_rows(&pos_rows)?;
        let gt_flat: Vec<f64> = pos_gt.iter().flat_map(|&g| gt_boxes[g].coords()).collect();
        let gt_t = tape.constant(gt_flat, &[pos_rows.len(), 4])?;
        let l1 = matched.sub(&gt_t)?.abs().sum_all().mul_scalar(norm);
        let gi = giou_tensor(&matched, &gt_t)?
            .neg()
            .add_scalar(1.0)
            .sum_all()
            .mul_scalar(norm);
        components.add(LossComponents {
            cls: cls.item(),
            bbox: l1.item(),
            giou: gi.item(),
        });
        let layer_total = cls
            .mul_scalar(cfg.cls_coef)
            .add(&l1.mul_scalar(cfg.l1_coef))?
            .add(&gi.mul_scalar(cfg.giou_coef))?;
        total = Some(match total {
            None => layer_total,
            Some(t) => t.add(&layer_total)?,
        });
    }
    Ok(DnLossOutput {
        total: total.unwrap(),
        components,
    })
}
