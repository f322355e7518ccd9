//! Strided convolution stack producing the multi-scale token pyramid.
//! Convolutions run as im2col + matmul so gradients come straight from the
//! tensor engine.

use rand_chacha::ChaCha8Rng;

use super::layers::Linear;
use super::params::{ParamCtx, ParamStore};
use crate::boxes::BoxCxCyWh;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One feature scale: `tokens` are the flattened [h*w, hidden] features,
/// `cell_boxes` the normalized reference box of each grid cell.
pub struct FeatureLevel {
    pub h: usize,
    pub w: usize,
    pub tokens: Tensor,
    pub cell_boxes: Vec<BoxCxCyWh>,
}

/// Coarse-to-fine ordered feature scales (index 0 = finest, stride 8).
pub struct MultiScaleFeatures {
    pub levels: Vec<FeatureLevel>,
}

impl MultiScaleFeatures {
    pub fn total_tokens(&self) -> usize {
        self.levels.iter().map(|l| l.h * l.w).sum()
    }

    /// All tokens concatenated level-major into [T, hidden].
    pub fn flat_tokens(&self) -> Result<Tensor> {
        let refs: Vec<&Tensor> = self.levels.iter().map(|l| &l.tokens).collect();
        Tensor::concat(&refs, 0)
    }

    pub fn all_cell_boxes(&self) -> Vec<BoxCxCyWh> {
        self.levels
            .iter()
            .flat_map(|l| l.cell_boxes.iter().copied())
            .collect()
    }
}

const STAGE_CHANNELS: [usize; 3] = [16, 32, 48];

pub struct Backbone {
    pub hidden_dim: usize,
    pub num_levels: usize,
    stages: Vec<Conv>,
    extra: Vec<Conv>,
    projections: Vec<Linear>,
}

struct Conv {
    name: String,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn kernel(&self) -> Linear {
        Linear::new(&self.name, self.k * self.k * self.in_ch, self.out_ch)
    }

    fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.kernel().register(store, rng, true);
    }

    /// [h, w, in_ch] -> [h/stride, w/stride, out_ch]
    fn forward(&self, ctx: &ParamCtx, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let (h, w) = (shape[0], shape[1]);
        let cols = x.im2col(self.k, self.stride, self.pad)?;
        let out = self.kernel().forward(ctx, &cols)?;
        out.reshape(&[h / self.stride, w / self.stride, self.out_ch])
    }
}

impl Backbone {
    pub fn new(hidden_dim: usize, num_levels: usize) -> Self {
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in STAGE_CHANNELS.iter().enumerate() {
            stages.push(Conv {
                name: format!("backbone.stage{i}"),
                in_ch,
                out_ch,
                k: 3,
                stride: 2,
                pad: 1,
            });
            in_ch = out_ch;
        }
        let mut extra = Vec::new();
        for i in 1..num_levels {
            extra.push(Conv {
                name: format!("backbone.down{i}"),
                in_ch,
                out_ch: in_ch,
                k: 3,
                stride: 2,
                pad: 1,
            });
        }
        let projections = (0..num_levels)
            .map(|i| Linear::new(format!("backbone.proj{i}"), in_ch, hidden_dim))
            .collect();
        Backbone {
            hidden_dim,
            num_levels,
            stages,
            extra,
            projections,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for s in &self.stages {
            s.register(store, rng);
        }
        for e in &self.extra {
            e.register(store, rng);
        }
        for p in &self.projections {
            // projections feed the transformer; they train at the full rate
            p.register(store, rng, false);
        }
    }

    /// image [H, W, 3] -> feature levels at strides 8, 16, ...
    pub fn forward(&self, ctx: &ParamCtx, image: &Tensor) -> Result<MultiScaleFeatures> {
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::InvalidArgument {
                op: "backbone",
                msg: format!("expected [H, W, 3] image, got {:?}", shape),
            });
        }
        let total_stride = 8usize << (self.num_levels - 1);
        if shape[0] % total_stride != 0 || shape[1] % total_stride != 0 {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: shape.clone(),
                rhs: vec![total_stride],
            });
        }
        let mut x = image.clone();
        for s in &self.stages {
            x = s.forward(ctx, &x)?.relu();
        }
        let mut levels = Vec::with_capacity(self.num_levels);
        let mut current = x;
        for li in 0..self.num_levels {
            if li > 0 {
                current = self.extra[li - 1].forward(ctx, &current)?.relu();
            }
            let s = current.shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            let flat = current.reshape(&[h * w, c])?;
            let tokens = self.projections[li].forward(ctx, &flat)?;
            let mut cell_boxes = Vec::with_capacity(h * w);
            for y in 0..h {
                for xcell in 0..w {
                    cell_boxes.push(BoxCxCyWh::new(
                        (xcell as f64 + 0.5) / w as f64,
                        (y as f64 + 0.5) / h as f64,
                        1.0 / w as f64,
                        1.0 / h as f64,
                    ));
                }
            }
            levels.push(FeatureLevel {
                h,
                w,
                tokens,
                cell_boxes,
            });
        }
        Ok(MultiScaleFeatures { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    fn build(num_levels: usize) -> (Backbone, ParamStore) {
        let bb = Backbone::new(32, num_levels);
        let mut store = ParamStore::new();
        bb.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        (bb, store)
    }

    #[test]
    fn stride_arithmetic_produces_expected_levels() {
        let (bb, store) = build(2);
        let tape = Tape::new();
        let ctx = ParamCtx::bind(&tape, &store, false).unwrap();
        let img = tape.constant(vec![0.3; 64 * 64 * 3], &[64, 64, 3]).unwrap();
        let feats = bb.forward(&ctx, &img).unwrap();
        assert_eq!(feats.levels.len(), 2);
        assert_eq!((feats.levels[0].h, feats.levels[0].w), (8, 8));
        assert_eq!((feats.levels[1].h, feats.levels[1].w), (4, 4));
        assert_eq!(feats.total_tokens(), 80);
        let b = feats.levels[0].cell_boxes[0];
        assert!((b.cx - 0.0625).abs() < 1e-12 && (b.w - 0.125).abs() < 1e-12);
    }

    #[test]
    fn zero_image_yields_finite_features() {
        let (bb, store) = build(2);
        let tape = Tape::new();
        let ctx = ParamCtx::bind(&tape, &store, false).unwrap();
        let img = tape.constant(vec![0.0; 64 * 64 * 3], &[64, 64, 3]).unwrap();
        let feats = bb.forward(&ctx, &img).unwrap();
        for level in &feats.levels {
            assert!(level.tokens.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn indivisible_image_rejected() {
        let (bb, store) = build(2);
        let tape = Tape::new();
        let ctx = ParamCtx::bind(&tape, &store, false).unwrap();
        let img = tape.constant(vec![0.0; 60 * 60 * 3], &[60, 60, 3]).unwrap();
        assert!(bb.forward(&ctx, &img).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        use crate::tensor::gradcheck::rel_err;
        let (bb, mut store) = build(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img: Vec<f64> = (0..16 * 16 * 3)
            .map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
            .collect();
        let loss_of = |store: &ParamStore, train: bool| {
            let tape = Tape::new();
            let ctx = ParamCtx::bind(&tape, store, train).unwrap();
            let img_t = tape.constant(img.clone(), &[16, 16, 3]).unwrap();
            let feats = bb.forward(&ctx, &img_t).unwrap();
            let loss = feats.levels[0].tokens.pow_scalar(2.0).sum_all();
            if train {
                loss.backward().unwrap();
                (loss.item(), Some(ctx.collect_grads()))
            } else {
                (loss.item(), None)
            }
        };
        let (_, grads) = loss_of(&store, true);
        store.apply_grads(grads.unwrap());
        for name in ["backbone.stage0.w", "backbone.stage2.w", "backbone.proj0.w"] {
            let analytic = store.get(name).unwrap().grad.clone();
            for j in (0..analytic.len()).step_by(37) {
                let orig = store.get(name).unwrap().data[j];
                store.get_mut(name).unwrap().data[j] = orig + 1e-5;
                let (fp, _) = loss_of(&store, false);
                store.get_mut(name).unwrap().data[j] = orig - 1e-5;
                let (fm, _) = loss_of(&store, false);
                store.get_mut(name).unwrap().data[j] = orig;
                let numeric = (fp - fm) / 2e-5;
                let e = rel_err(analytic[j], numeric);
                assert!(e < 1e-4, "{name}[{j}]: {} vs {} (rel {e})", analytic[j], numeric);
            }
        }
    }
}
