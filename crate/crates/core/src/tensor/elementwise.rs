//! Elementwise primitives. Binary ops accept equal shapes or a scalar on
//! either side; anything else is a shape error.

use std::rc::Rc;

use super::{GradStore, Tensor};
use crate::error::{Error, Result};

enum Broadcast {
    None,
    LhsScalar,
    RhsScalar,
}

fn unary_impl(
    x: &Tensor,
    fwd: impl Fn(f64) -> f64,
    dydx: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let xd = x.data();
    let shape = x.shape();
    let out: Vec<f64> = xd.iter().map(|&v| fwd(v)).collect();
    if !x.requires_grad() {
        return x.tape().push(shape, out, false, None);
    }
    let xid = x.id();
    let out_rc = Rc::new(out);
    let out_cap = out_rc.clone();
    let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
        let buf = store.buf(xid);
        for i in 0..gout.len() {
            buf[i] += gout[i] * dydx(xd[i], out_cap[i]);
        }
    });
    x.tape().push_shared(shape, out_rc, true, Some(back))
}

fn binary_impl(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    fwd: impl Fn(f64, f64) -> f64,
    dda: impl Fn(f64, f64) -> f64 + 'static,
    ddb: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    a.check_same_tape(b, op)?;
    let (sa, sb) = (a.shape(), b.shape());
    let (ad, bd) = (a.data(), b.data());
    let mode = if sa == sb {
        Broadcast::None
    } else if ad.len() == 1 {
        Broadcast::LhsScalar
    } else if bd.len() == 1 {
        Broadcast::RhsScalar
    } else {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa,
            rhs: sb,
        });
    };
    let (out_shape, n) = match mode {
        Broadcast::LhsScalar => (sb, bd.len()),
        _ => (sa, ad.len()),
    };
    let at = |i: usize| match mode {
        Broadcast::LhsScalar => ad[0],
        _ => ad[i],
    };
    let bt = |i: usize| match mode {
        Broadcast::RhsScalar => bd[0],
        _ => bd[i],
    };
    let out: Vec<f64> = (0..n).map(|i| fwd(at(i), bt(i))).collect();
    let needs = a.requires_grad() || b.requires_grad();
    let backward: Option<super::BackwardFn> = if needs {
        let (aid, bid) = (a.id(), b.id());
        let (ag, bg) = (a.requires_grad(), b.requires_grad());
        let (ad, bd) = (ad.clone(), bd.clone());
        Some(Box::new(move |gout: &[f64], store: &mut GradStore| {
            let av = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
            let bv = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
            if ag {
                let buf = store.buf(aid);
                if ad.len() == 1 && gout.len() > 1 {
                    let mut acc = 0.0;
                    for i in 0..gout.len() {
                        acc += gout[i] * dda(av(i), bv(i));
                    }
                    buf[0] += acc;
                } else {
                    for i in 0..gout.len() {
                        buf[i] += gout[i] * dda(av(i), bv(i));
                    }
                }
            }
            if bg {
                let buf = store.buf(bid);
                if bd.len() == 1 && gout.len() > 1 {
                    let mut acc = 0.0;
                    for i in 0..gout.len() {
                        acc += gout[i] * ddb(av(i), bv(i));
                    }
                    buf[0] += acc;
                } else {
                    for i in 0..gout.len() {
                        buf[i] += gout[i] * ddb(av(i), bv(i));
                    }
                }
            }
        }))
    } else {
        None
    };
    Ok(a.tape().push(out_shape, out, needs, backward))
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_impl("add", self, rhs, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_impl("sub", self, rhs, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_impl("mul", self, rhs, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_impl(
            "div",
            self,
            rhs,
            |x, y| x / y,
            |_, y| 1.0 / y,
            |x, y| -x / (y * y),
        )
    }

    /// Elementwise minimum. Ties route the gradient to `self`.
    pub fn minimum(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_impl(
            "minimum",
            self,
            rhs,
            f64::min,
            |x, y| if x <= y { 1.0 } else { 0.0 },
            |x, y| if x <= y { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise maximum. Ties route the gradient to `self`.
    pub fn maximum(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_impl(
            "maximum",
            self,
            rhs,
            f64::max,
            |x, y| if x >= y { 1.0 } else { 0.0 },
            |x, y| if x >= y { 0.0 } else { 1.0 },
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary_impl(self, |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary_impl(self, move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        unary_impl(self, |x| -x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary_impl(self, f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        unary_impl(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Tensor {
        unary_impl(self, f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn sqrt(&self) -> Tensor {
        unary_impl(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sin(&self) -> Tensor {
        unary_impl(self, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        unary_impl(self, f64::cos, |x, _| -x.sin())
    }

    /// Elementwise x^p for a fixed exponent.
    pub fn pow_scalar(&self, p: f64) -> Tensor {
        unary_impl(self, move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    /// Clamp into [lo, hi]; the derivative is zero in the clamped region.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary_impl(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn relu(&self) -> Tensor {
        unary_impl(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_impl(self, sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// Logit with inputs clamped to `[eps, 1-eps]`, making the map total.
    /// The derivative is zero in the clamped region.
    pub fn inverse_sigmoid(&self, eps: f64) -> Tensor {
        unary_impl(
            self,
            move |p| {
                let p = p.clamp(eps, 1.0 - eps);
                (p / (1.0 - p)).ln()
            },
            move |p, _| {
                if p >= eps && p <= 1.0 - eps {
                    1.0 / (p * (1.0 - p))
                } else {
                    0.0
                }
            },
        )
    }
}

/// Numerically stable scalar sigmoid; shared by the tensor op and the
/// plain-value code paths so both routes agree bit for bit.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let tape = Tape::new();
        let x = tape.scalar(0.0);
        assert_eq!(x.sigmoid().item(), 0.5);
    }

    #[test]
    fn inverse_sigmoid_of_half_is_zero() {
        let tape = Tape::new();
        let x = tape.scalar(0.5);
        assert_eq!(x.inverse_sigmoid(1e-3).item(), 0.0);
    }

    #[test]
    fn sigmoid_round_trip() {
        let tape = Tape::new();
        let p = tape.scalar(0.9);
        let back = p.inverse_sigmoid(1e-3).sigmoid().item();
        assert!((back - 0.9).abs() < 1e-9, "round trip gave {back}");
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let c = tape.scalar(2.0);
        assert_eq!(*x.mul(&c).unwrap().data(), vec![2.0, 4.0, 6.0]);
        assert_eq!(*c.sub(&x).unwrap().data(), vec![1.0, 0.0, -1.0]);
    }

    #[test]
    fn mismatched_shapes_error() {
        let tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], &[2]).unwrap();
        let b = tape.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert!(a.add(&b).is_err());
    }
}
