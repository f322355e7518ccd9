//! 2-D linear algebra primitives.

use super::{GradStore, Tensor};
use crate::error::{Error, Result};

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::InvalidArgument {
            op,
            msg: format!("expected rank-2 tensor, got shape {:?}", s),
        });
    }
    Ok((s[0], s[1]))
}

/// a[m,k] * b[k,n] -> [m,n]. Exact zeros in `a` are skipped so that entries
/// carrying zero attention weight contribute nothing, bit for bit.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

impl Tensor {
    /// Matrix product of rank-2 tensors; inner dimensions must agree.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_tape(rhs, "matmul")?;
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(rhs, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let ad = self.data();
        let bd = rhs.data();
        let out = matmul_raw(&ad, &bd, m, k, n);
        let needs = self.requires_grad() || rhs.requires_grad();
        if !needs {
            return Ok(self.tape().push(vec![m, n], out, false, None));
        }
        let (aid, bid) = (self.id(), rhs.id());
        let (ag, bg) = (self.requires_grad(), rhs.requires_grad());
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            if ag {
                // dA[i,p] += sum_j gout[i,j] * B[p,j]
                let buf = store.buf(aid);
                for i in 0..m {
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let grow = &gout[i * n..(i + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        buf[i * k + p] += acc;
                    }
                }
            }
            if bg {
                // dB[p,j] += sum_i A[i,p] * gout[i,j]
                let buf = store.buf(bid);
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let grow = &gout[i * n..(i + 1) * n];
                        let brow = &mut buf[p * n..(p + 1) * n];
                        for j in 0..n {
                            brow[j] += av * grow[j];
                        }
                    }
                }
            }
        });
        Ok(self.tape().push(vec![m, n], out, true, Some(back)))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "transpose")?;
        let xd = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let needs = self.requires_grad();
        if !needs {
            return Ok(self.tape().push(vec![n, m], out, false, None));
        }
        let xid = self.id();
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            let buf = store.buf(xid);
            for j in 0..n {
                for i in 0..m {
                    buf[i * n + j] += gout[j * m + i];
                }
            }
        });
        Ok(self.tape().push(vec![n, m], out, true, Some(back)))
    }
}
