//! Contrastive denoising queries: noised copies of ground-truth objects fed
//! to the decoder alongside matching queries. Positive queries carry noise
//! inside the lambda1 bounds and must reconstruct their ground truth;
//! negative queries live in the (lambda1, lambda2] shell and must predict
//! "no object". Groups are isolated from each other and from the matching
//! part by the self-attention mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::{l1_box_distance, BoxCxCyWh, BoxDelta};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DnConfig {
    /// Inner noise scale; positive queries stay strictly inside these bounds.
    pub lambda1: f64,
    /// Outer noise scale; negative noise magnitudes fall in (lambda1, lambda2].
    pub lambda2: f64,
    /// Plain (non-contrastive) denoising scale. Carried for config
    /// completeness; the contrastive path is driven by lambda1/lambda2 only.
    pub box_noise_scale: f64,
    /// Each label flips to a random different class with probability ratio/2.
    pub label_noise_ratio: f64,
    /// Total positive/negative pair budget per image.
    pub cdn_pair_capacity: usize,
    pub num_classes: usize,
    /// Clamp for noised boxes: centers to [eps, 1-eps], sizes to [2eps, 1-eps].
    pub clamp_eps: f64,
}

impl Default for DnConfig {
    fn default() -> Self {
        DnConfig {
            lambda1: 1.0,
            lambda2: 2.0,
            box_noise_scale: 0.4,
            label_noise_ratio: 0.5,
            cdn_pair_capacity: 100,
            num_classes: 2,
            clamp_eps: 1e-3,
        }
    }
}

impl DnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda1 < self.lambda2) {
            return Err(Error::Config(format!(
                "need 0 < lambda1 < lambda2, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        if !(0.0..=1.0).contains(&self.label_noise_ratio) {
            return Err(Error::Config(format!(
                "label_noise_ratio must be in [0, 1], got {}",
                self.label_noise_ratio
            )));
        }
        if self.cdn_pair_capacity == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "cdn_pair_capacity and num_classes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One noised copy of all ground-truth objects of an image.
#[derive(Debug, Clone)]
pub struct DenoiseGroup {
    pub positive_boxes: Vec<BoxCxCyWh>,
    pub negative_boxes: Vec<BoxCxCyWh>,
    /// One label per query: positives first, then negatives.
    pub noised_labels: Vec<usize>,
    /// Source GT index for each positive (and its paired negative).
    pub gt_index: Vec<usize>,
}

/// Denoising groups plus the self-attention mask over
/// (dn queries + matching queries)^2. `true` means "may attend".
#[derive(Debug, Clone)]
pub struct DnBatch {
    pub groups: Vec<DenoiseGroup>,
    pub attention_mask: Vec<bool>,
    pub group_count: usize,
    /// GT count n; each group holds 2n queries (positives then negatives).
    pub gt_per_group: usize,
    pub num_matching: usize,
}

impl DnBatch {
    pub fn dn_queries(&self) -> usize {
        self.group_count * 2 * self.gt_per_group
    }

    pub fn total_queries(&self) -> usize {
        self.dn_queries() + self.num_matching
    }

    /// Noised anchor boxes in query-layout order (group-major).
    pub fn query_boxes(&self) -> Vec<BoxCxCyWh> {
        let mut out = Vec::with_capacity(self.dn_queries());
        for g in &self.groups {
            out.extend_from_slice(&g.positive_boxes);
            out.extend_from_slice(&g.negative_boxes);
        }
        out
    }

    /// Noised content labels in query-layout order.
    pub fn query_labels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dn_queries());
        for g in &self.groups {
            out.extend_from_slice(&g.noised_labels);
        }
        out
    }

    pub fn may_attend(&self, from: usize, to: usize) -> bool {
        self.attention_mask[from * self.total_queries() + to]
    }
}

/// Uniform draw from the open interval (-1, 1).
fn open_symmetric(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        if u != -1.0 {
            return u;
        }
    }
}

/// Uniform draw from the half-open interval (0, 1].
fn open_closed_unit(rng: &mut ChaCha8Rng) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Positive-query noise in coordinate space, uniform over the admissible
/// region: |dx| < l1*w/2, |dy| < l1*h/2, |dw| < l1*w, |dh| < l1*h,
/// all bounds strict.
pub fn sample_positive_noise(gt: BoxCxCyWh, lambda1: f64, rng: &mut ChaCha8Rng) -> BoxDelta {
    BoxDelta {
        dx: open_symmetric(rng) * lambda1 * gt.w / 2.0,
        dy: open_symmetric(rng) * lambda1 * gt.h / 2.0,
        dw: open_symmetric(rng) * lambda1 * gt.w,
        dh: open_symmetric(rng) * lambda1 * gt.h,
    }
}

/// Negative-query noise: per-coordinate magnitude uniform in the
/// (lambda1, lambda2] shell scaled by the same w/2, h/2, w, h factors,
/// sign uniform.
pub fn sample_negative_noise(
    gt: BoxCxCyWh,
    lambda1: f64,
    lambda2: f64,
    rng: &mut ChaCha8Rng,
) -> BoxDelta {
    let mut shell = |factor: f64| {
        let mag = lambda1 + open_closed_unit(rng) * (lambda2 - lambda1);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * mag * factor
    };
    BoxDelta {
        dx: shell(gt.w / 2.0),
        dy: shell(gt.h / 2.0),
        dw: shell(gt.w),
        dh: shell(gt.h),
    }
}

fn apply_noise(gt: BoxCxCyWh, d: BoxDelta, eps: f64) -> BoxCxCyWh {
    BoxCxCyWh::new(gt.cx + d.dx, gt.cy + d.dy, gt.w + d.dw, gt.h + d.dh).clamp_valid(eps)
}

pub fn noise_box_positive(
    gt: BoxCxCyWh,
    lambda1: f64,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> BoxCxCyWh {
    apply_noise(gt, sample_positive_noise(gt, lambda1, rng), eps)
}

pub fn noise_box_negative(
    gt: BoxCxCyWh,
    lambda1: f64,
    lambda2: f64,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> BoxCxCyWh {
    apply_noise(gt, sample_negative_noise(gt, lambda1, lambda2, rng), eps)
}

/// Flip each label to a uniformly random *different* class with
/// probability ratio/2. With fewer than two classes labels pass through.
pub fn noise_labels(
    labels: &[usize],
    ratio: f64,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| {
            let u: f64 = rng.gen();
            if u < ratio / 2.0 && num_classes >= 2 {
                let pick = rng.gen_range(0..num_classes - 1);
                if pick >= l {
                    pick + 1
                } else {
                    pick
                }
            } else {
                l
            }
        })
        .collect()
}

/// Assemble denoising groups for one image. The pair budget is fixed and
/// the group count adapts to the GT count: max(1, floor(capacity / n)).
/// An image without ground truth gets no denoising queries and an
/// all-permissive mask over the matching queries.
pub fn build_dn_batch(
    gt_boxes: &[BoxCxCyWh],
    gt_labels: &[usize],
    cfg: &DnConfig,
    num_matching: usize,
    rng: &mut ChaCha8Rng,
) -> DnBatch {
    assert_eq!(gt_boxes.len(), gt_labels.len());
    let n = gt_boxes.len();
    if n == 0 {
        return DnBatch {
            groups: Vec::new(),
            attention_mask: vec![true; num_matching * num_matching],
            group_count: 0,
            gt_per_group: 0,
            num_matching,
        };
    }
    let group_count = (cfg.cdn_pair_capacity / n).max(1);
    let mut groups = Vec::with_capacity(group_count);
    for _ in 0..group_count {
        let positive_boxes: Vec<BoxCxCyWh> = gt_boxes
            .iter()
            .map(|&b| noise_box_positive(b, cfg.lambda1, cfg.clamp_eps, rng))
            .collect();
        let negative_boxes: Vec<BoxCxCyWh> = gt_boxes
            .iter()
            .map(|&b| noise_box_negative(b, cfg.lambda1, cfg.lambda2, cfg.clamp_eps, rng))
            .collect();
        let doubled: Vec<usize> = gt_labels.iter().chain(gt_labels.iter()).copied().collect();
        let noised_labels = noise_labels(&doubled, cfg.label_noise_ratio, cfg.num_classes, rng);
        groups.push(DenoiseGroup {
            positive_boxes,
            negative_boxes,
            noised_labels,
            gt_index: (0..n).collect(),
        });
    }

    let dn = group_count * 2 * n;
    let total = dn + num_matching;
    let group_of = |q: usize| q / (2 * n);
    let mut mask = vec![false; total * total];
    for i in 0..total {
        for j in 0..total {
            let allowed = match (i < dn, j < dn) {
                (false, false) => true,                       // matching <-> matching
                (false, true) | (true, false) => false,       // blocked both directions
                (true, true) => group_of(i) == group_of(j),   // within one group only
            };
            mask[i * total + j] = allowed;
        }
    }
    DnBatch {
        groups,
        attention_mask: mask,
        group_count,
        gt_per_group: n,
        num_matching,
    }
}

/// Average top-k distance: the mean of the k largest L1 distances between
/// matched (gt, anchor) pairs. k exceeding the pair count averages over all.
pub fn atd(assignments: &[(BoxCxCyWh, BoxCxCyWh)], k: usize) -> Result<f64> {
    if assignments.is_empty() {
        return Err(Error::UndefinedMetric(
            "average top-k distance over an empty assignment list".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidArgument {
            op: "atd",
            msg: "k must be at least 1".into(),
        });
    }
    let mut dists: Vec<f64> = assignments
        .iter()
        .map(|&(gt, anchor)| l1_box_distance(gt, anchor))
        .collect();
    dists.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let take = k.min(dists.len());
    Ok(dists[..take].iter().sum::<f64>() / take as f64)
}
