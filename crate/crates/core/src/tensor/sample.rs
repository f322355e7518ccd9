//! Spatial sampling primitives: bilinear interpolation over a feature map
//! (differentiable in both the map and the sample locations) and patch
//! extraction for convolution-as-matmul.

use super::{GradStore, Tensor};
use crate::error::{Error, Result};

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument {
            op,
            msg: format!("expected rank-3 [H, W, C] tensor, got {:?}", s),
        });
    }
    Ok((s[0], s[1], s[2]))
}

#[inline]
fn read_map(map: &[f64], h: usize, w: usize, c: usize, yy: i64, xx: i64, ch: usize) -> f64 {
    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
        0.0
    } else {
        map[((yy as usize) * w + (xx as usize)) * c + ch]
    }
}

impl Tensor {
    /// Bilinear interpolation of `self` ([H, W, C]) at continuous grid
    /// coordinates `xs`/`ys` ([N] each, integer values land on cell centers).
    /// Locations outside the map read zeros. Returns [N, C].
    pub fn bilinear_sample(&self, xs: &Tensor, ys: &Tensor) -> Result<Tensor> {
        self.check_same_tape(xs, "bilinear_sample")?;
        self.check_same_tape(ys, "bilinear_sample")?;
        let (h, w, c) = dims3(self, "bilinear_sample")?;
        if xs.shape() != ys.shape() || xs.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                lhs: xs.shape(),
                rhs: ys.shape(),
            });
        }
        let n = xs.numel();
        let map = self.data();
        let xv = xs.data();
        let yv = ys.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let (x, y) = (xv[i], yv[i]);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..c {
                let v00 = read_map(&map, h, w, c, y0, x0, ch);
                let v01 = read_map(&map, h, w, c, y0, x0 + 1, ch);
                let v10 = read_map(&map, h, w, c, y0 + 1, x0, ch);
                let v11 = read_map(&map, h, w, c, y0 + 1, x0 + 1, ch);
                out[i * c + ch] = v00 * (1.0 - fx) * (1.0 - fy)
                    + v01 * fx * (1.0 - fy)
                    + v10 * (1.0 - fx) * fy
                    + v11 * fx * fy;
            }
        }
        let needs = self.requires_grad() || xs.requires_grad() || ys.requires_grad();
        if !needs {
            return Ok(self.tape().push(vec![n, c], out, false, None));
        }
        let (mid, xsid, ysid) = (self.id(), xs.id(), ys.id());
        let (mg, xg, yg) = (self.requires_grad(), xs.requires_grad(), ys.requires_grad());
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            for i in 0..n {
                let (x, y) = (xv[i], yv[i]);
                let (x0f, y0f) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0f, y - y0f);
                let (x0, y0) = (x0f as i64, y0f as i64);
                let (mut dx, mut dy) = (0.0, 0.0);
                for ch in 0..c {
                    let g = gout[i * c + ch];
                    if g == 0.0 {
                        continue;
                    }
                    let v00 = read_map(&map, h, w, c, y0, x0, ch);
                    let v01 = read_map(&map, h, w, c, y0, x0 + 1, ch);
                    let v10 = read_map(&map, h, w, c, y0 + 1, x0, ch);
                    let v11 = read_map(&map, h, w, c, y0 + 1, x0 + 1, ch);
                    if mg {
                        let buf = store.buf(mid);
                        let mut scatter = |yy: i64, xx: i64, wgt: f64| {
                            if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                                buf[((yy as usize) * w + (xx as usize)) * c + ch] += g * wgt;
                            }
                        };
                        scatter(y0, x0, (1.0 - fx) * (1.0 - fy));
                        scatter(y0, x0 + 1, fx * (1.0 - fy));
                        scatter(y0 + 1, x0, (1.0 - fx) * fy);
                        scatter(y0 + 1, x0 + 1, fx * fy);
                    }
                    dx += g * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                    dy += g * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                }
                if xg {
                    store.accum(xsid, i, dx);
                }
                if yg {
                    store.accum(ysid, i, dy);
                }
            }
        });
        Ok(self.tape().push(vec![n, c], out, true, Some(back)))
    }

    /// Extract k x k patches at the given stride with zero padding,
    /// flattened to [H_out * W_out, k * k * C]. Convolution is then a
    /// matmul against a [k * k * C, C_out] kernel.
    pub fn im2col(&self, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
        let (h, w, c) = dims3(self, "im2col")?;
        if k == 0 || stride == 0 {
            return Err(Error::InvalidArgument {
                op: "im2col",
                msg: "kernel and stride must be positive".into(),
            });
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::InvalidArgument {
                op: "im2col",
                msg: format!("map {}x{} smaller than kernel {} with pad {}", h, w, k, pad),
            });
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let cols = k * k * c;
        let map = self.data();
        let mut out = vec![0.0; ho * wo * cols];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (oy * wo + ox) * cols;
                for ky in 0..k {
                    for kx in 0..k {
                        let yy = (oy * stride + ky) as i64 - pad as i64;
                        let xx = (ox * stride + kx) as i64 - pad as i64;
                        let col = (ky * k + kx) * c;
                        if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                            let src = ((yy as usize) * w + (xx as usize)) * c;
                            out[row + col..row + col + c].copy_from_slice(&map[src..src + c]);
                        }
                    }
                }
            }
        }
        if !self.requires_grad() {
            return Ok(self.tape().push(vec![ho * wo, cols], out, false, None));
        }
        let xid = self.id();
        let back: super::BackwardFn = Box::new(move |gout: &[f64], store: &mut GradStore| {
            let buf = store.buf(xid);
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (oy * wo + ox) * cols;
                    for ky in 0..k {
                        for kx in 0..k {
                            let yy = (oy * stride + ky) as i64 - pad as i64;
                            let xx = (ox * stride + kx) as i64 - pad as i64;
                            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            let col = (ky * k + kx) * c;
                            let dst = ((yy as usize) * w + (xx as usize)) * c;
                            for ch in 0..c {
                                buf[dst + ch] += gout[row + col + ch];
                            }
                        }
                    }
                }
            }
        });
        Ok(self.tape().push(vec![ho * wo, cols], out, true, Some(back)))
    }
}
