//! Attention blocks: multi-scale deformable attention (a few interpolated
//! sampling points per head and level instead of dense keys) and a dense
//! masked multi-head self-attention for the query set.

use rand_chacha::ChaCha8Rng;

use super::layers::Linear;
use super::params::{ParamCtx, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

/// Multi-scale deformable attention. Per query, head, and level, an offset
/// head predicts `n_points` sampling locations relative to the query's
/// reference box (offsets scale with the box size), features are read by
/// bilinear interpolation, and a softmax over levels x points mixes them.
pub struct DeformableAttention {
    pub nheads: usize,
    pub n_points: usize,
    pub num_levels: usize,
    pub dim: usize,
    value_proj: Linear,
    output_proj: Linear,
    offset_head: Linear,
    weight_head: Linear,
}

impl DeformableAttention {
    pub fn new(name: &str, dim: usize, nheads: usize, num_levels: usize, n_points: usize) -> Self {
        let fan = nheads * num_levels * n_points;
        DeformableAttention {
            nheads,
            n_points,
            num_levels,
            dim,
            value_proj: Linear::new(format!("{name}.value"), dim, dim),
            output_proj: Linear::new(format!("{name}.out"), dim, dim),
            offset_head: Linear::new(format!("{name}.offset"), dim, fan * 2),
            weight_head: Linear::new(format!("{name}.weight"), dim, fan),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.value_proj.register(store, rng, false);
        self.output_proj.register(store, rng, false);
        // offsets start at a fixed radial pattern per head (weights zero),
        // attention weights start uniform
        let fan = self.nheads * self.num_levels * self.n_points;
        let mut offset_bias = vec![0.0; fan * 2];
        for h in 0..self.nheads {
            let angle = std::f64::consts::TAU * h as f64 / self.nheads as f64;
            for l in 0..self.num_levels {
                for p in 0..self.n_points {
                    let r = (p + 1) as f64 / self.n_points as f64;
                    let base = ((h * self.num_levels + l) * self.n_points + p) * 2;
                    offset_bias[base] = angle.cos() * r;
                    offset_bias[base + 1] = angle.sin() * r;
                }
            }
        }
        self.offset_head
            .register_with(store, vec![0.0; self.dim * fan * 2], offset_bias, false);
        self.weight_head
            .register_with(store, vec![0.0; self.dim * fan], vec![0.0; fan], false);
    }

    /// - `queries`: [Q, dim] content plus positional encoding
    /// - `ref_boxes`: [Q, 4] normalized cxcywh reference per query
    /// - `value_levels`: per level (h, w, tokens [h*w, dim])
    ///
    /// Returns [Q, dim].
    pub fn forward(
        &self,
        ctx: &ParamCtx,
        queries: &Tensor,
        ref_boxes: &Tensor,
        value_levels: &[(usize, usize, Tensor)],
    ) -> Result<Tensor> {
        assert_eq!(value_levels.len(), self.num_levels);
        let q = queries.shape()[0];
        let head_dim = self.dim / self.nheads;
        let p = self.n_points;

        // shared value projection, then per-level per-head maps
        let flat_refs: Vec<&Tensor> = value_levels.iter().map(|(_, _, t)| t).collect();
        let all_tokens = Tensor::concat(&flat_refs, 0)?;
        let values = self.value_proj.forward(ctx, &all_tokens)?;

        let offsets = self.offset_head.forward(ctx, queries)?; // [Q, H*L*P*2]
        let weights = self.weight_head.forward(ctx, queries)?; // [Q, H*L*P]

        // reference pieces tiled to one row per sampling point
        let tile_qp = |t: &Tensor| -> Result<Tensor> {
            // [Q, 1] -> [Q, P] -> [Q*P]
            t.tile_axis(1, p)?.reshape(&[q * p])
        };
        let cx = tile_qp(&ref_boxes.slice(1, 0, 1)?)?;
        let cy = tile_qp(&ref_boxes.slice(1, 1, 2)?)?;
        let bw = tile_qp(&ref_boxes.slice(1, 2, 3)?)?;
        let bh = tile_qp(&ref_boxes.slice(1, 3, 4)?)?;

        let mut head_outputs = Vec::with_capacity(self.nheads);
        let mut level_row_start = 0usize;
        let mut level_values = Vec::with_capacity(self.num_levels);
        for &(h, w, _) in value_levels {
            let rows = values.slice(0, level_row_start, level_row_start + h * w)?;
            level_row_start += h * w;
            level_values.push((h, w, rows));
        }

        for head in 0..self.nheads {
            let head_cols = (head * head_dim, (head + 1) * head_dim);
            // softmax over levels*points for this head
            let w_cols = (
                head * self.num_levels * p,
                (head + 1) * self.num_levels * p,
            );
            let head_weights = weights.slice(1, w_cols.0, w_cols.1)?.softmax(1)?; // [Q, L*P]

            let mut head_out: Option<Tensor> = None;
            for (li, &(lh, lw, ref rows)) in level_values.iter().enumerate() {
                let value_map =
                    rows.slice(1, head_cols.0, head_cols.1)?
                        .reshape(&[lh, lw, head_dim])?;
                // offsets for (head, level): [Q, P*2] laid out (p, xy)
                let ob = (head * self.num_levels + li) * p * 2;
                let off = offsets.slice(1, ob, ob + p * 2)?.reshape(&[q * p, 2])?;
                let off_x = off.slice(1, 0, 1)?.reshape(&[q * p])?;
                let off_y = off.slice(1, 1, 2)?.reshape(&[q * p])?;
                // normalized sampling location: center + offset * size/2
                let sx = cx.add(&off_x.mul(&bw)?.mul_scalar(0.5))?;
                let sy = cy.add(&off_y.mul(&bh)?.mul_scalar(0.5))?;
                // to this level's pixel grid (cell centers at half-pixels)
                let px = sx.mul_scalar(lw as f64).add_scalar(-0.5);
                let py = sy.mul_scalar(lh as f64).add_scalar(-0.5);
                let sampled = value_map.bilinear_sample(&px, &py)?; // [Q*P, head_dim]

                let wl = head_weights
                    .slice(1, li * p, (li + 1) * p)?
                    .reshape(&[q * p, 1])?
                    .tile_axis(1, head_dim)?;
                let mixed = sampled
                    .mul(&wl)?
                    .reshape(&[q, p, head_dim])?
                    .sum_axis(1)?; // [Q, head_dim]
                head_out = Some(match head_out {
                    None => mixed,
                    Some(acc) => acc.add(&mixed)?,
                });
            }
            head_outputs.push(head_out.unwrap());
        }
        let refs: Vec<&Tensor> = head_outputs.iter().collect();
        let merged = Tensor::concat(&refs, 1)?;
        self.output_proj.forward(ctx, &merged)
    }
}

/// Dense multi-head self-attention with a boolean attention mask
/// (true = may attend). Masked entries are excluded from the softmax
/// entirely, so masked keys cannot influence a query's output even at the
/// bit level.
pub struct SelfAttention {
    pub nheads: usize,
    pub dim: usize,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
}

impl SelfAttention {
    pub fn new(name: &str, dim: usize, nheads: usize) -> Self {
        SelfAttention {
            nheads,
            dim,
            q_proj: Linear::new(format!("{name}.q"), dim, dim),
            k_proj: Linear::new(format!("{name}.k"), dim, dim),
            v_proj: Linear::new(format!("{name}.v"), dim, dim),
            out_proj: Linear::new(format!("{name}.out"), dim, dim),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.q_proj.register(store, rng, false);
        self.k_proj.register(store, rng, false);
        self.v_proj.register(store, rng, false);
        self.out_proj.register(store, rng, false);
    }

    /// `qk_input` feeds queries and keys (content + positional encoding),
    /// `content` feeds values. `mask` is row-major [Q, Q] or `None` for
    /// all-permissive.
    pub fn forward(
        &self,
        ctx: &ParamCtx,
        qk_input: &Tensor,
        content: &Tensor,
        mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let n = content.shape()[0];
        let head_dim = self.dim / self.nheads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.q_proj.forward(ctx, qk_input)?;
        let k = self.k_proj.forward(ctx, qk_input)?;
        let v = self.v_proj.forward(ctx, content)?;
        let all_true;
        let mask: &[bool] = match mask {
            Some(m) => {
                assert_eq!(m.len(), n * n, "attention mask size mismatch");
                m
            }
            None => {
                all_true = vec![true; n * n];
                &all_true
            }
        };
        let mut heads = Vec::with_capacity(self.nheads);
        for h in 0..self.nheads {
            let cols = (h * head_dim, (h + 1) * head_dim);
            let qh = q.slice(1, cols.0, cols.1)?;
            let kh = k.slice(1, cols.0, cols.1)?;
            let vh = v.slice(1, cols.0, cols.1)?;
            let logits = qh.matmul(&kh.transpose()?)?.mul_scalar(scale);
            let probs = logits.masked_softmax(mask)?;
            heads.push(probs.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        let merged = Tensor::concat(&refs, 1)?;
        self.out_proj.forward(ctx, &merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};

    fn const_level(tape: &Tape, h: usize, w: usize, dim: usize, v: f64) -> (usize, usize, Tensor) {
        (h, w, tape.constant(vec![v; h * w * dim], &[h * w, dim]).unwrap())
    }

    #[test]
    fn constant_features_pass_through_unmixed() {
        // with identity-ish value path a constant map must yield a constant:
        // interpolation of a constant is that constant and the mix weights
        // sum to one
        let dim = 16;
        let attn = DeformableAttention::new("t", dim, 4, 2, 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        attn.register(&mut store, &mut rng);
        // value projection = identity, no bias; output projection = identity
        let eye: Vec<f64> = (0..dim * dim)
            .map(|i| if i / dim == i % dim { 1.0 } else { 0.0 })
            .collect();
        store.get_mut("t.value.w").unwrap().data = eye.clone();
        store.get_mut("t.out.w").unwrap().data = eye;
        let tape = Tape::new();
        let ctx = ParamCtx::bind(&tape, &store, false).unwrap();
        let levels = vec![
            const_level(&tape, 4, 4, dim, 2.5),
            const_level(&tape, 2, 2, dim, 2.5),
        ];
        let queries = tape
            .constant(
                (0..3 * dim).map(|i| (i as f64 * 0.37).sin()).collect(),
                &[3, dim],
            )
            .unwrap();
        // boxes chosen so every sampling point stays inside both maps
        // (outside samples read zero-padding and would dilute the constant)
        let refs = tape
            .constant(
                vec![0.5, 0.5, 0.3, 0.3, 0.45, 0.55, 0.2, 0.2, 0.55, 0.45, 0.25, 0.2],
                &[3, 4],
            )
            .unwrap();
        let out = attn.forward(&ctx, &queries, &refs, &levels).unwrap();
        for &v in out.data().iter() {
            assert!((v - 2.5).abs() < 1e-10, "got {v}");
        }
    }

    #[test]
    fn zero_weight_logits_give_uniform_mixing() {
        let dim = 8;
        let attn = DeformableAttention::new("t", dim, 2, 2, 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        attn.register(&mut store, &mut rng);
        // weight head is zero-registered: logits all equal -> uniform over
        // levels*points; make each level a distinct constant and check the
        // output mixes them evenly through an identity value/output path
        let eye: Vec<f64> = (0..dim * dim)
            .map(|i| if i / dim == i % dim { 1.0 } else { 0.0 })
            .collect();
        store.get_mut("t.value.w").unwrap().data = eye.clone();
        store.get_mut("t.out.w").unwrap().data = eye;
        let tape = Tape::new();
        let ctx = ParamCtx::bind(&tape, &store, false).unwrap();
        let levels = vec![
            const_level(&tape, 4, 4, dim, 1.0),
            const_level(&tape, 2, 2, dim, 3.0),
        ];
        let queries = tape.constant(vec![0.2; dim], &[1, dim]).unwrap();
        let refs = tape.constant(vec![0.5, 0.5, 0.4, 0.4], &[1, 4]).unwrap();
        let out = attn.forward(&ctx, &queries, &refs, &levels).unwrap();
        for &v in out.data().iter() {
            assert!((v - 2.0).abs() < 1e-10, "expected even level mix, got {v}");
        }
    }

    #[test]
    fn masked_keys_cannot_touch_output_bitwise() {
        let dim = 16;
        let attn = SelfAttention::new("sa", dim, 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        attn.register(&mut store, &mut rng);
        let n = 6;
        let blocked = 2usize; // first two rows form an isolated block
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let same_side = (i < blocked) == (j < blocked);
                mask[i * n + j] = same_side;
            }
        }
        let run = |noise: f64| {
            let tape = Tape::new();
            let ctx = ParamCtx::bind(&tape, &store, false).unwrap();
            let mut base: Vec<f64> = (0..n * dim).map(|i| (i as f64 * 0.1).cos()).collect();
            for v in base.iter_mut().take(blocked * dim) {
                *v += noise;
            }
            let x = tape.constant(base, &[n, dim]).unwrap();
            let out = attn.forward(&ctx, &x, &x, Some(&mask)).unwrap();
            out.data()[blocked * dim..]
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(0.0), run(123.456));
    }

    #[test]
    fn deformable_gradients_match_finite_differences() {
        use crate::tensor::gradcheck::rel_err;
        let dim = 8;
        let attn = DeformableAttention::new("t", dim, 2, 1, 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        attn.register(&mut store, &mut rng);
        // non-trivial offset weights so location gradients are exercised
        let fan = 2 * 1 * 2;
        store.get_mut("t.offset.w").unwrap().data =
            (0..dim * fan * 2).map(|_| rng.gen_range(-0.3..0.3)).collect();
        store.get_mut("t.weight.w").unwrap().data =
            (0..dim * fan).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let tokens: Vec<f64> = (0..16 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let queries: Vec<f64> = (0..2 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss_of = |store: &ParamStore, train: bool| {
            let tape = Tape::new();
            let ctx = ParamCtx::bind(&tape, store, train).unwrap();
            let level = (4usize, 4usize, tape.constant(tokens.clone(), &[16, dim]).unwrap());
            let qt = tape.constant(queries.clone(), &[2, dim]).unwrap();
            let refs = tape
                .constant(vec![0.53, 0.47, 0.31, 0.29, 0.72, 0.28, 0.21, 0.33], &[2, 4])
                .unwrap();
            let out = attn.forward(&ctx, &qt, &refs, &[level]).unwrap();
            let loss = out.pow_scalar(2.0).sum_all();
            if train {
                loss.backward().unwrap();
                (loss.item(), Some(ctx.collect_grads()))
            } else {
                (loss.item(), None)
            }
        };
        let mut store = store;
        let (_, grads) = loss_of(&store, true);
        store.apply_grads(grads.unwrap());
        for name in ["t.offset.w", "t.weight.w", "t.value.w", "t.offset.b"] {
            let analytic = store.get(name).unwrap().grad.clone();
            for j in (0..analytic.len()).step_by(11) {
                let orig = store.get(name).unwrap().data[j];
                store.get_mut(name).unwrap().data[j] = orig + 1e-5;
                let (fp, _) = loss_of(&store, false);
                store.get_mut(name).unwrap().data[j] = orig - 1e-5;
                let (fm, _) = loss_of(&store, false);
                store.get_mut(name).unwrap().data[j] = orig;
                let numeric = (fp - fm) / 2e-5;
                let e = rel_err(analytic[j], numeric);
                assert!(e < 1e-4, "{name}[{j}]: {} vs {numeric} (rel {e})", analytic[j]);
            }
        }
    }
}
