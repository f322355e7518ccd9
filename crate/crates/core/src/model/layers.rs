//! Shared building blocks: linear layers, MLPs, layer normalization, and
//! the sinusoidal box encoding. Each block registers its parameters once
//! and binds them by name at forward time, so shapes and names live in a
//! single place.

use rand_chacha::ChaCha8Rng;

use super::params::{xavier_init, ParamCtx, ParamStore};
use crate::boxes::BoxCxCyWh;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, backbone: bool) {
        store.add(
            &format!("{}.w", self.name),
            &[self.in_dim, self.out_dim],
            xavier_init(rng, self.in_dim, self.out_dim),
            backbone,
        );
        store.add(
            &format!("{}.b", self.name),
            &[1, self.out_dim],
            vec![0.0; self.out_dim],
            backbone,
        );
    }

    /// Registration with explicit weight/bias values (zero-init heads,
    /// prior-bias classification heads, offset grids).
    pub fn register_with(
        &self,
        store: &mut ParamStore,
        weights: Vec<f64>,
        bias: Vec<f64>,
        backbone: bool,
    ) {
        store.add(
            &format!("{}.w", self.name),
            &[self.in_dim, self.out_dim],
            weights,
            backbone,
        );
        store.add(&format!("{}.b", self.name), &[1, self.out_dim], bias, backbone);
    }

    /// x [N, in] -> [N, out]
    pub fn forward(&self, ctx: &ParamCtx, x: &Tensor) -> Result<Tensor> {
        let w = ctx.get(&format!("{}.w", self.name))?;
        let b = ctx.get(&format!("{}.b", self.name))?;
        let y = x.matmul(&w)?;
        let n = y.shape()[0];
        if n == 0 {
            return Ok(y);
        }
        y.add(&b.tile_axis(0, n)?)
    }
}

/// Stack of linear layers with ReLU between (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, backbone: bool) {
        for l in &self.layers {
            l.register(store, rng, backbone);
        }
    }

    /// Register with the final layer zero-initialized, so the stack starts
    /// out predicting exactly zero.
    pub fn register_zero_final(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if i == last {
                l.register_with(
                    store,
                    vec![0.0; l.in_dim * l.out_dim],
                    vec![0.0; l.out_dim],
                    false,
                );
            } else {
                l.register(store, rng, false);
            }
        }
    }

    pub fn forward(&self, ctx: &ParamCtx, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(ctx, &h)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
            eps: 1e-5,
        }
    }

    pub fn register(&self, store: &mut ParamStore) {
        store.add(&format!("{}.g", self.name), &[1, self.dim], vec![1.0; self.dim], false);
        store.add(&format!("{}.b", self.name), &[1, self.dim], vec![0.0; self.dim], false);
    }

    /// Normalize each row of x [N, dim] to zero mean and unit variance,
    /// then scale and shift.
    pub fn forward(&self, ctx: &ParamCtx, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let mean = x.mean_axis(1)?.reshape(&[n, 1])?.tile_axis(1, self.dim)?;
        let centered = x.sub(&mean)?;
        let var = centered
            .pow_scalar(2.0)
            .mean_axis(1)?
            .reshape(&[n, 1])?
            .tile_axis(1, self.dim)?;
        let normed = centered.mul(&var.add_scalar(self.eps).pow_scalar(-0.5))?;
        let g = ctx.get(&format!("{}.g", self.name))?.tile_axis(0, n)?;
        let b = ctx.get(&format!("{}.b", self.name))?.tile_axis(0, n)?;
        normed.mul(&g)?.add(&b)
    }
}

/// Sinusoidal encoding of the 4 box coordinates, `dim/4` channels each,
/// alternating sin/cos with geometric frequencies.
pub fn box_encoding_values(boxes: &[BoxCxCyWh], dim: usize, temperature: f64) -> Vec<f64> {
    assert_eq!(dim % 8, 0, "encoding dim must be divisible by 8");
    let per_coord = dim / 4;
    let half = per_coord / 2;
    let mut out = Vec::with_capacity(boxes.len() * dim);
    for b in boxes {
        for v in b.coords() {
            let scaled = v * std::f64::consts::TAU;
            for i in 0..half {
                let freq = temperature.powf(2.0 * i as f64 / per_coord as f64);
                out.push((scaled / freq).sin());
                out.push((scaled / freq).cos());
            }
        }
    }
    out
}

/// Differentiable form of [`box_encoding_values`] over an [N, 4] tensor.
pub fn box_encoding_tensor(anchors: &Tensor, dim: usize, temperature: f64) -> Result<Tensor> {
    assert_eq!(dim % 8, 0, "encoding dim must be divisible by 8");
    let per_coord = dim / 4;
    let half = per_coord / 2;
    let mut pieces = Vec::with_capacity(4 * per_coord);
    for coord in 0..4 {
        let v = anchors
            .slice(1, coord, coord + 1)?
            .mul_scalar(std::f64::consts::TAU);
        for i in 0..half {
            let freq = temperature.powf(2.0 * i as f64 / per_coord as f64);
            let scaled = v.mul_scalar(1.0 / freq);
            pieces.push(scaled.sin());
            pieces.push(scaled.cos());
        }
    }
    let refs: Vec<&Tensor> = pieces.iter().collect();
    Tensor::concat(&refs, 1)
}
