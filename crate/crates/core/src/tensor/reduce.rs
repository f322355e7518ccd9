//! Reductions and normalizations over a single axis.

use super::{GradStore, Tensor};
use crate::error::{Error, Result};

fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

impl Tensor {
    /// Sum of all elements into a scalar.
    pub fn sum_all(&self) -> Tensor {
        let xd = self.data();
        let total: f64 = xd.iter().sum();
        if !self.requires_grad() {
            return self.tape().push(vec![1], vec![total], false, None);
        }
        let xid = self.id();
        let n = xd.len();
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            let g = gout[0];
            let buf = store.buf(xid);
            for v in buf.iter_mut().take(n) {
                *v += g;
            }
        });
        self.tape().push(vec![1], vec![total], true, Some(back))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        let (outer, len, inner) = axis_split(&shape, axis, "sum_axis")?;
        let xd = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        if !self.requires_grad() {
            return Ok(self.tape().push(out_shape, out, false, None));
        }
        let xid = self.id();
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            let buf = store.buf(xid);
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    for i in 0..inner {
                        buf[base + i] += gout[o * inner + i];
                    }
                }
            }
        });
        Ok(self.tape().push(out_shape, out, true, Some(back)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        let (_, len, _) = axis_split(&shape, axis, "mean_axis")?;
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / len.max(1) as f64))
    }

    /// Softmax along `axis`, numerically stabilized by the lane max.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        let (outer, len, inner) = axis_split(&shape, axis, "softmax")?;
        let xd = self.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(xd[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        if !self.requires_grad() {
            return Ok(self.tape().push(shape, out, false, None));
        }
        let xid = self.id();
        let out_rc = std::rc::Rc::new(out);
        let y = out_rc.clone();
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            let buf = store.buf(xid);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut dot = 0.0;
                    for j in 0..len {
                        dot += gout[at(j)] * y[at(j)];
                    }
                    for j in 0..len {
                        buf[at(j)] += y[at(j)] * (gout[at(j)] - dot);
                    }
                }
            }
        });
        Ok(self.tape().push_shared(shape, out_rc, true, Some(back)))
    }

    /// Row-wise softmax over a rank-2 tensor where `mask[q*cols + k] == false`
    /// excludes an entry entirely: it takes no part in the max or the
    /// normalizing sum, its output weight is exactly 0.0, and no gradient
    /// reaches its logit. A fully masked row yields all zeros.
    pub fn masked_softmax(&self, mask: &[bool]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "masked_softmax",
                msg: format!("expected rank-2 tensor, got {:?}", shape),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if mask.len() != rows * cols {
            return Err(Error::Alignment(format!(
                "masked_softmax: mask has {} entries for a {}x{} tensor",
                mask.len(),
                rows,
                cols
            )));
        }
        let xd = self.data();
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let base = r * cols;
            let mut mx = f64::NEG_INFINITY;
            for c in 0..cols {
                if mask[base + c] {
                    mx = mx.max(xd[base + c]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut sum = 0.0;
            for c in 0..cols {
                if mask[base + c] {
                    let e = (xd[base + c] - mx).exp();
                    out[base + c] = e;
                    sum += e;
                }
            }
            for c in 0..cols {
                if mask[base + c] {
                    out[base + c] /= sum;
                }
            }
        }
        if !self.requires_grad() {
            return Ok(self.tape().push(shape, out, false, None));
        }
        let xid = self.id();
        let mask = mask.to_vec();
        let out_rc = std::rc::Rc::new(out);
        let y = out_rc.clone();
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            let buf = store.buf(xid);
            for r in 0..rows {
                let base = r * cols;
                let mut dot = 0.0;
                for c in 0..cols {
                    if mask[base + c] {
                        dot += gout[base + c] * y[base + c];
                    }
                }
                for c in 0..cols {
                    if mask[base + c] {
                        buf[base + c] += y[base + c] * (gout[base + c] - dot);
                    }
                }
            }
        });
        Ok(self.tape().push_shared(shape, out_rc, true, Some(back)))
    }
}
