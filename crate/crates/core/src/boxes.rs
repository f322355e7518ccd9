//! Normalized box representations, conversions, overlap metrics, and the
//! logit-space box update used by decoder refinement.
//!
//! Scalar functions here back the matching costs and evaluation metrics;
//! `update_boxes` and `giou_tensor` are the differentiable counterparts
//! used inside losses. The two routes are cross-checked in tests.

use crate::error::Result;
use crate::tensor::Tensor;

/// Center-size box with normalized coordinates in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCxCyWh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner box; `x0 <= x1`, `y0 <= y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXyXy {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Unbounded per-coordinate offset, either in logit space (decoder
/// refinement) or in coordinate space (denoising shifts).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxCxCyWh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCxCyWh { cx, cy, w, h }
    }

    pub fn to_xyxy(self) -> BoxXyXy {
        BoxXyXy {
            x0: self.cx - self.w / 2.0,
            y0: self.cy - self.h / 2.0,
            x1: self.cx + self.w / 2.0,
            y1: self.cy + self.h / 2.0,
        }
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    pub fn coords(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Clamp centers to [eps, 1-eps] and sizes to [2 eps, 1-eps] so a
    /// noised box stays a valid normalized box.
    pub fn clamp_valid(self, eps: f64) -> BoxCxCyWh {
        BoxCxCyWh {
            cx: self.cx.clamp(eps, 1.0 - eps),
            cy: self.cy.clamp(eps, 1.0 - eps),
            w: self.w.clamp(2.0 * eps, 1.0 - eps),
            h: self.h.clamp(2.0 * eps, 1.0 - eps),
        }
    }
}

impl BoxXyXy {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxXyXy { x0, y0, x1, y1 }
    }

    pub fn to_cxcywh(self) -> BoxCxCyWh {
        BoxCxCyWh {
            cx: (self.x0 + self.x1) / 2.0,
            cy: (self.y0 + self.y1) / 2.0,
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }

    pub fn area(self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn coords(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Intersection over union in [0, 1]; zero-area boxes score 0 against
/// anything, avoiding 0/0.
pub fn iou(a: BoxXyXy, b: BoxXyXy) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in [-1, 1]: IoU minus the enclosing-box penalty.
pub fn giou(a: BoxXyXy, b: BoxXyXy) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    let ex = a.x1.max(b.x1) - a.x0.min(b.x0);
    let ey = a.y1.max(b.y1) - a.y0.min(b.y0);
    let enclose = ex * ey;
    let iou_term = if union <= 0.0 { 0.0 } else { inter / union };
    if enclose <= 0.0 {
        iou_term
    } else {
        iou_term - (enclose - union) / enclose
    }
}

/// L1 distance between two boxes in (cx, cy, w, h) space.
pub fn l1_box_distance(a: BoxCxCyWh, b: BoxCxCyWh) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Refine a box by an offset in logit space:
/// sigmoid(inverse_sigmoid(coord) + delta), per coordinate.
pub fn box_update(b: BoxCxCyWh, d: BoxDelta, eps: f64) -> BoxCxCyWh {
    let upd = |v: f64, dv: f64| {
        let v = v.clamp(eps, 1.0 - eps);
        let logit = (v / (1.0 - v)).ln() + dv;
        1.0 / (1.0 + (-logit).exp())
    };
    BoxCxCyWh {
        cx: upd(b.cx, d.dx),
        cy: upd(b.cy, d.dy),
        w: upd(b.w, d.dw),
        h: upd(b.h, d.dh),
    }
}

/// Differentiable form of [`box_update`] over [N, 4] tensors.
pub fn update_boxes(boxes: &Tensor, deltas: &Tensor, eps: f64) -> Result<Tensor> {
    boxes.inverse_sigmoid(eps).add(deltas).map(|t| t.sigmoid())
}

/// Differentiable GIoU between row-aligned [N, 4] cxcywh tensors,
/// returning [N] scores. Mirrors [`giou`] for valid boxes.
pub fn giou_tensor(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let corners = |t: &Tensor| -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let cx = t.slice(1, 0, 1)?;
        let cy = t.slice(1, 1, 2)?;
        let w = t.slice(1, 2, 3)?;
        let h = t.slice(1, 3, 4)?;
        let hw = w.mul_scalar(0.5);
        let hh = h.mul_scalar(0.5);
        Ok((cx.sub(&hw)?, cy.sub(&hh)?, cx.add(&hw)?, cy.add(&hh)?))
    };
    let (ax0, ay0, ax1, ay1) = corners(pred)?;
    let (bx0, by0, bx1, by1) = corners(target)?;
    let zero = pred.tape().zeros(&ax0.shape());

    let ix = ax1.minimum(&bx1)?.sub(&ax0.maximum(&bx0)?)?.maximum(&zero)?;
    let iy = ay1.minimum(&by1)?.sub(&ay0.maximum(&by0)?)?.maximum(&zero)?;
    let inter = ix.mul(&iy)?;

    let area_a = ax1.sub(&ax0)?.mul(&ay1.sub(&ay0)?)?;
    let area_b = bx1.sub(&bx0)?.mul(&by1.sub(&by0)?)?;
    let union = area_a.add(&area_b)?.sub(&inter)?;

    let ex = ax1.maximum(&bx1)?.sub(&ax0.minimum(&bx0)?)?;
    let ey = ay1.maximum(&by1)?.sub(&ay0.minimum(&by0)?)?;
    let enclose = ex.mul(&ey)?;

    let iou_term = inter.div(&union)?;
    let penalty = enclose.sub(&union)?.div(&enclose)?;
    let n = pred.shape()[0];
    iou_term.sub(&penalty)?.reshape(&[n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::prelude::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn center_box_converts_to_quarter_corners() {
        let b = BoxCxCyWh::new(0.5, 0.5, 0.5, 0.5).to_xyxy();
        assert_eq!(b, BoxXyXy::new(0.25, 0.25, 0.75, 0.75));
    }

    #[test]
    fn degenerate_width_converts_without_nan() {
        let b = BoxCxCyWh::new(0.5, 0.5, 1e-12, 0.3).to_xyxy();
        assert!(b.x0.is_finite() && b.x1.is_finite());
        assert!(b.x1 >= b.x0);
    }

    #[test]
    fn iou_hand_case() {
        let a = BoxXyXy::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxXyXy::new(1.0, 1.0, 3.0, 3.0);
        assert!(approx(iou(a, b), 1.0 / 7.0, 1e-12));
        assert_eq!(iou(a, a), 1.0);
        let c = BoxXyXy::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(a, c), 0.0);
    }

    #[test]
    fn giou_hand_cases() {
        let a = BoxXyXy::new(0.0, 0.0, 1.0, 1.0);
        let b = BoxXyXy::new(2.0, 2.0, 3.0, 3.0);
        assert!(approx(giou(a, b), -7.0 / 9.0, 1e-9));
        assert!(approx(giou(a, a), 1.0, 1e-12));
    }

    #[test]
    fn zero_area_box_has_zero_iou() {
        let a = BoxXyXy::new(0.3, 0.3, 0.3, 0.8);
        let b = BoxXyXy::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(a, a), 0.0);
        assert_eq!(iou(a, b), 0.0);
    }

    #[test]
    fn box_update_zero_delta_is_identity() {
        let b = BoxCxCyWh::new(0.3, 0.6, 0.2, 0.4);
        let u = box_update(b, BoxDelta::default(), 1e-3);
        assert!(approx(u.cx, b.cx, 1e-9));
        assert!(approx(u.cy, b.cy, 1e-9));
        assert!(approx(u.w, b.w, 1e-9));
        assert!(approx(u.h, b.h, 1e-9));
    }

    #[test]
    fn box_update_unit_shift() {
        let b = BoxCxCyWh::new(0.5, 0.5, 0.5, 0.5);
        let d = BoxDelta {
            dx: 1.0,
            ..Default::default()
        };
        let u = box_update(b, d, 1e-3);
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!(approx(u.cx, sig1, 1e-12));
        assert!(approx(u.cx, 0.7311, 1e-4));
        assert_eq!(u.cy, 0.5);
    }

    #[test]
    fn l1_distance_cases() {
        let a = BoxCxCyWh::new(0.5, 0.5, 0.2, 0.2);
        let b = BoxCxCyWh::new(0.6, 0.5, 0.2, 0.2);
        assert!(approx(l1_box_distance(a, b), 0.1, 1e-12));
        assert_eq!(l1_box_distance(a, a), 0.0);
        assert_eq!(l1_box_distance(a, b), l1_box_distance(b, a));
    }

    #[test]
    fn tensor_giou_matches_scalar_route() {
        let tape = Tape::new();
        let preds = [
            BoxCxCyWh::new(0.3, 0.3, 0.2, 0.2),
            BoxCxCyWh::new(0.7, 0.6, 0.4, 0.3),
            BoxCxCyWh::new(0.5, 0.5, 0.1, 0.6),
        ];
        let gts = [
            BoxCxCyWh::new(0.32, 0.28, 0.25, 0.2),
            BoxCxCyWh::new(0.2, 0.2, 0.2, 0.2),
            BoxCxCyWh::new(0.5, 0.52, 0.12, 0.5),
        ];
        let flat = |bs: &[BoxCxCyWh]| bs.iter().flat_map(|b| b.coords()).collect::<Vec<_>>();
        let p = tape.constant(flat(&preds), &[3, 4]).unwrap();
        let g = tape.constant(flat(&gts), &[3, 4]).unwrap();
        let scores = giou_tensor(&p, &g).unwrap();
        for i in 0..3 {
            let expect = giou(preds[i].to_xyxy(), gts[i].to_xyxy());
            assert!(approx(scores.data()[i], expect, 1e-12));
        }
    }

    #[test]
    fn update_boxes_matches_scalar_and_detach_blocks_grad() {
        let tape = Tape::new();
        let b = BoxCxCyWh::new(0.4, 0.6, 0.3, 0.2);
        let d = BoxDelta {
            dx: 0.7,
            dy: -0.3,
            dw: 0.1,
            dh: 0.0,
        };
        let bt = tape.leaf(b.coords().to_vec(), &[1, 4], true).unwrap();
        let dt = tape
            .constant(vec![d.dx, d.dy, d.dw, d.dh], &[1, 4])
            .unwrap();
        let updated = update_boxes(&bt.detach(), &dt, 1e-3).unwrap();
        let scalar = box_update(b, d, 1e-3);
        let got = updated.data();
        assert!(approx(got[0], scalar.cx, 1e-12));
        assert!(approx(got[1], scalar.cy, 1e-12));
        assert!(approx(got[2], scalar.w, 1e-12));
        assert!(approx(got[3], scalar.h, 1e-12));
        updated.sum_all().backward().unwrap();
        assert_eq!(bt.grad(), vec![0.0; 4]);
    }

    fn arb_box() -> impl Strategy<Value = BoxCxCyWh> {
        (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.5, 0.01f64..0.5)
            .prop_map(|(cx, cy, w, h)| BoxCxCyWh::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn conversion_round_trip_is_exact(b in arb_box()) {
            let back = b.to_xyxy().to_cxcywh();
            prop_assert!((back.cx - b.cx).abs() < 1e-12);
            prop_assert!((back.cy - b.cy).abs() < 1e-12);
            prop_assert!((back.w - b.w).abs() < 1e-12);
            prop_assert!((back.h - b.h).abs() < 1e-12);
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (ax, bx) = (a.to_xyxy(), b.to_xyxy());
            let v = iou(ax, bx);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - iou(bx, ax)).abs() < 1e-15);
        }

        #[test]
        fn box_update_stays_in_unit_range(b in arb_box(), dx in -5.0f64..5.0, dw in -5.0f64..5.0) {
            let u = box_update(b, BoxDelta { dx, dy: -dx, dw, dh: dw }, 1e-3);
            for v in u.coords() {
                prop_assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn giou_bounded_and_below_iou(a in arb_box(), b in arb_box()) {
            let (ax, bx) = (a.to_xyxy(), b.to_xyxy());
            let g = giou(ax, bx);
            prop_assert!((-1.0..=1.0).contains(&g));
            prop_assert!(g <= iou(ax, bx) + 1e-15);
        }
    }
}
