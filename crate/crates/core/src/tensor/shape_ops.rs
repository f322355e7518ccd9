//! Shape manipulation: reshape, concat, slice, row gather, explicit tiling.

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
    /// Reinterpret the row-major buffer under a new shape of equal size.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.data();
        if !self.requires_grad() {
            return Ok(self
                .tape()
                .push_shared(new_shape.to_vec(), data, false, None));
        }
        let xid = self.id();
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            let buf = store.buf(xid);
            for (b, g) in buf.iter_mut().zip(gout) {
                *b += g;
            }
        });
        Ok(self
            .tape()
            .push_shared(new_shape.to_vec(), data, true, Some(back)))
    }

    /// Concatenate tensors along `axis`. All other dimensions must match.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat",
                msg: "no tensors given".into(),
            });
        }
        let first = parts[0];
        for p in parts.iter().skip(1) {
            first.check_same_tape(p, "concat")?;
        }
        let base_shape = first.shape();
        let (_, _, inner) = axis_split(&base_shape, axis, "concat")?;
        let mut total_len = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != base_shape.len() {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape.clone(),
                    rhs: s,
                });
            }
            for (d, (&a, &b)) in s.iter().zip(base_shape.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: base_shape.clone(),
                        rhs: s.clone(),
                    });
                }
            }
            total_len += s[axis];
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total_len;
        let outer: usize = out_shape[..axis].iter().product();

        let mut out = vec![0.0; outer * total_len * inner];
        let mut offsets = Vec::with_capacity(parts.len());
        let mut off = 0usize;
        for p in parts {
            let len = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                for j in 0..len {
                    let src = (o * len + j) * inner;
                    let dst = (o * total_len + off + j) * inner;
                    out[dst..dst + inner].copy_from_slice(&pd[src..src + inner]);
                }
            }
            offsets.push((p.id(), off, len, p.requires_grad()));
            off += len;
        }
        let needs = parts.iter().any(|p| p.requires_grad());
        if !needs {
            return Ok(first.tape().push(out_shape, out, false, None));
        }
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            for &(pid, off, len, req) in &offsets {
                if !req {
                    continue;
                }
                let buf = store.buf(pid);
                for o in 0..outer {
                    for j in 0..len {
                        let dst = (o * len + j) * inner;
                        let src = (o * total_len + off + j) * inner;
                        for i in 0..inner {
                            buf[dst + i] += gout[src + i];
                        }
                    }
                }
            }
        });
        Ok(first.tape().push(out_shape, out, true, Some(back)))
    }

    /// Contiguous sub-range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let shape = self.shape();
        let (outer, len, inner) = axis_split(&shape, axis, "slice")?;
        if start > end || end > len {
            return Err(Error::InvalidArgument {
                op: "slice",
                msg: format!("range {}..{} out of bounds for axis length {}", start, end, len),
            });
        }
        let span = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = span;
        let xd = self.data();
        let mut out = vec![0.0; outer * span * inner];
        for o in 0..outer {
            for j in 0..span {
                let src = (o * len + start + j) * inner;
                let dst = (o * span + j) * inner;
                out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
            }
        }
        if !self.requires_grad() {
            return Ok(self.tape().push(out_shape, out, false, None));
        }
        let xid = self.id();
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            let buf = store.buf(xid);
            for o in 0..outer {
                for j in 0..span {
                    let dst = (o * len + start + j) * inner;
                    let src = (o * span + j) * inner;
                    for i in 0..inner {
                        buf[dst + i] += gout[src + i];
                    }
                }
            }
        });
        Ok(self.tape().push(out_shape, out, true, Some(back)))
    }

    /// Gather rows (leading-axis slices) by index; duplicates allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                msg: "rank-0 tensor".into(),
            });
        }
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        for &ix in indices {
            if ix >= rows {
                return Err(Error::InvalidArgument {
                    op: "gather_rows",
                    msg: format!("index {} out of range for {} rows", ix, rows),
                });
            }
        }
        let xd = self.data();
        let mut out = vec![0.0; indices.len() * inner];
        for (j, &ix) in indices.iter().enumerate() {
            out[j * inner..(j + 1) * inner].copy_from_slice(&xd[ix * inner..(ix + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        if !self.requires_grad() {
            return Ok(self.tape().push(out_shape, out, false, None));
        }
        let xid = self.id();
        let indices = indices.to_vec();
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            let buf = store.buf(xid);
            for (j, &ix) in indices.iter().enumerate() {
                for i in 0..inner {
                    buf[ix * inner + i] += gout[j * inner + i];
                }
            }
        });
        Ok(self.tape().push(out_shape, out, true, Some(back)))
    }

    /// Materialized broadcast: repeat a singleton axis `times` times.
    /// The axis must have size 1; gradients sum back over the copies.
    pub fn tile_axis(&self, axis: usize, times: usize) -> Result<Tensor> {
        let shape = self.shape();
        let (outer, len, inner) = axis_split(&shape, axis, "tile_axis")?;
        if len != 1 {
            return Err(Error::InvalidArgument {
                op: "tile_axis",
                msg: format!("axis {} has size {}, expected 1", axis, len),
            });
        }
        let xd = self.data();
        let mut out_shape = shape.clone();
        out_shape[axis] = times;
        let mut out = vec![0.0; outer * times * inner];
        for o in 0..outer {
            let src = o * inner;
            for j in 0..times {
                let dst = (o * times + j) * inner;
                out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
            }
        }
        if !self.requires_grad() {
            return Ok(self.tape().push(out_shape, out, false, None));
        }
        let xid = self.id();
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            let buf = store.buf(xid);
            for o in 0..outer {
                for j in 0..times {
                    let src = (o * times + j) * inner;
                    for i in 0..inner {
                        buf[o * inner + i] += gout[src + i];
                    }
                }
            }
        });
        Ok(self.tape().push(out_shape, out, true, Some(back)))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = tape.constant(vec![5.0, 6.0], &[1, 2]).unwrap();
        let cat = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(cat.shape(), vec![3, 2]);
        let back = cat.slice(0, 0, 2).unwrap();
        assert_eq!(*back.data(), *a.data());
    }

    #[test]
    fn concat_axis1() {
        let tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], &[2, 1]).unwrap();
        let b = tape.constant(vec![3.0, 4.0], &[2, 1]).unwrap();
        let cat = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(*cat.data(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn gather_rows_with_duplicates() {
        let tape = Tape::new();
        let a = tape
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2])
            .unwrap();
        let g = a.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(*g.data(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn tile_requires_singleton() {
        let tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], &[2, 1]).unwrap();
        assert!(a.tile_axis(0, 3).is_err());
        let t = a.tile_axis(1, 3).unwrap();
        assert_eq!(*t.data(), vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn reshape_preserves_data() {
        let tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let r = a.reshape(&[4]).unwrap();
        assert_eq!(*r.data(), *a.data());
        assert!(a.reshape(&[3]).is_err());
    }
}
