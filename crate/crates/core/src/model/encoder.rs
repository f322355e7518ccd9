//! Transformer encoder over the multi-scale token pyramid, and top-K query
//! selection for decoder anchor initialization.

use rand_chacha::ChaCha8Rng;

use super::attention::DeformableAttention;
use super::backbone::MultiScaleFeatures;
use super::config::{ModelConfig, QueryMode};
use super::layers::{box_encoding_values, LayerNorm, Linear, Mlp};
use super::params::{ParamCtx, ParamStore};
use crate::boxes::{update_boxes, BoxCxCyWh};
use crate::error::Result;
use crate::loss::LayerPred;
use crate::tensor::Tensor;

struct EncoderLayer {
    attn: DeformableAttention,
    norm1: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(idx: usize, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let p = format!("encoder.{idx}");
        EncoderLayer {
            attn: DeformableAttention::new(
                &format!("{p}.attn"),
                d,
                cfg.nheads,
                cfg.num_levels,
                cfg.enc_n_points,
            ),
            norm1: LayerNorm::new(format!("{p}.norm1"), d),
            ffn1: Linear::new(format!("{p}.ffn1"), d, cfg.ffn_dim),
            ffn2: Linear::new(format!("{p}.ffn2"), cfg.ffn_dim, d),
            norm2: LayerNorm::new(format!("{p}.norm2"), d),
        }
    }

    fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.attn.register(store, rng);
        self.norm1.register(store);
        self.ffn1.register(store, rng, false);
        self.ffn2.register(store, rng, false);
        self.norm2.register(store);
    }
}

pub struct Encoder {
    layers: Vec<EncoderLayer>,
    pe_proj: Linear,
    num_levels: usize,
    hidden_dim: usize,
    pe_temperature: f64,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        Encoder {
            layers: (0..cfg.enc_layers).map(|i| EncoderLayer::new(i, cfg)).collect(),
            pe_proj: Linear::new("encoder.pe_proj", cfg.hidden_dim, cfg.hidden_dim),
            num_levels: cfg.num_levels,
            hidden_dim: cfg.hidden_dim,
            pe_temperature: cfg.pe_temperature,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for l in &self.layers {
            l.register(store, rng);
        }
        self.pe_proj.register(store, rng, false);
        store.add(
            "encoder.level_embed",
            &[self.num_levels, self.hidden_dim],
            super::params::uniform_init(rng, self.num_levels * self.hidden_dim, 0.1),
            false,
        );
    }

    /// Positional input for every token: projected sinusoidal encoding of
    /// its grid cell box plus a learned per-level embedding.
    fn positional(&self, ctx: &ParamCtx, features: &MultiScaleFeatures) -> Result<Tensor> {
        let level_embed = ctx.get("encoder.level_embed")?;
        let mut parts = Vec::with_capacity(features.levels.len());
        for (li, level) in features.levels.iter().enumerate() {
            let enc = box_encoding_values(&level.cell_boxes, self.hidden_dim, self.pe_temperature);
            let enc_t = ctx
                .tape()
                .constant(enc, &[level.cell_boxes.len(), self.hidden_dim])?;
            let pe = self.pe_proj.forward(ctx, &enc_t)?;
            let le = level_embed
                .slice(0, li, li + 1)?
                .tile_axis(0, level.cell_boxes.len())?;
            parts.push(pe.add(&le)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// Enhance the token pyramid; returns the refined flat tokens [T, D].
    pub fn forward(&self, ctx: &ParamCtx, features: &MultiScaleFeatures) -> Result<Tensor> {
        let pos = self.positional(ctx, features)?;
        let cell_boxes = features.all_cell_boxes();
        let flat_boxes: Vec<f64> = cell_boxes.iter().flat_map(|b| b.coords()).collect();
        let ref_boxes = ctx.tape().constant(flat_boxes, &[cell_boxes.len(), 4])?;
        let level_dims: Vec<(usize, usize)> =
            features.levels.iter().map(|l| (l.h, l.w)).collect();

        let mut tokens = features.flat_tokens()?;
        for layer in &self.layers {
            let q = tokens.add(&pos)?;
            let value_levels = split_levels(&tokens, &level_dims)?;
            let a = layer.attn.forward(ctx, &q, &ref_boxes, &value_levels)?;
            tokens = layer.norm1.forward(ctx, &tokens.add(&a)?)?;
            let f = layer
                .ffn2
                .forward(ctx, &layer.ffn1.forward(ctx, &tokens)?.relu())?;
            tokens = layer.norm2.forward(ctx, &tokens.add(&f)?)?;
        }
        Ok(tokens)
    }
}

/// Slice flat level-major tokens back into per-level blocks.
pub fn split_levels(
    tokens: &Tensor,
    level_dims: &[(usize, usize)],
) -> Result<Vec<(usize, usize, Tensor)>> {
    let mut out = Vec::with_capacity(level_dims.len());
    let mut start = 0usize;
    for &(h, w) in level_dims {
        out.push((h, w, tokens.slice(0, start, start + h * w)?));
        start += h * w;
    }
    Ok(out)
}

/// Decoder query initialization from encoder output.
pub struct QuerySelector {
    pub cls_head: Linear,
    pub box_head: Mlp,
    content_proj: Linear,
    num_queries: usize,
    num_classes: usize,
    hidden_dim: usize,
}

pub struct SelectedQueries {
    /// [K, 4] anchor tensor (detached or not per config).
    pub anchors: Tensor,
    /// [K, D] content initialization.
    pub content: Tensor,
    /// Encoder-head predictions over every token, for the auxiliary loss.
    pub encoder_pred: Option<LayerPred>,
    /// Anchor values for diagnostics (initial decoder boxes).
    pub anchor_values: Vec<BoxCxCyWh>,
}

impl QuerySelector {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        QuerySelector {
            cls_head: Linear::new("qs.cls", d, cfg.num_classes),
            box_head: Mlp::new("qs.box", &[d, d, 4]),
            content_proj: Linear::new("qs.content", d, d),
            num_queries: cfg.num_queries,
            num_classes: cfg.num_classes,
            hidden_dim: d,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        // background-heavy prior for the class head keeps early background
        // loss bounded
        let cls_bias = vec![-2.0; self.num_classes];
        self.cls_head.register_with(
            store,
            super::params::xavier_init(rng, self.hidden_dim, self.num_classes),
            cls_bias,
            false,
        );
        self.box_head.register_zero_final(store, rng);
        self.content_proj.register(store, rng, false);
        store.add(
            "qs.query_embed",
            &[self.num_queries, self.hidden_dim],
            super::params::uniform_init(rng, self.num_queries * self.hidden_dim, 0.5),
            false,
        );
        // static anchors in logit space, spread over the unit square
        let mut anchor_logits = Vec::with_capacity(self.num_queries * 4);
        let side = (self.num_queries as f64).sqrt().ceil() as usize;
        for qi in 0..self.num_queries {
            let gx = (qi % side) as f64;
            let gy = (qi / side) as f64;
            let cx = (gx + 0.5) / side as f64;
            let cy = (gy + 0.5) / side as f64;
            let logit = |p: f64| (p / (1.0 - p)).ln();
            anchor_logits.extend_from_slice(&[logit(cx), logit(cy), logit(0.2), logit(0.2)]);
        }
        store.add("qs.static_anchors", &[self.num_queries, 4], anchor_logits, false);
    }

    /// Score every token, predict a box per token, and initialize decoder
    /// queries according to the selection mode.
    pub fn select(
        &self,
        ctx: &ParamCtx,
        memory: &Tensor,
        token_boxes: &[BoxCxCyWh],
        mode: QueryMode,
        detach_anchors: bool,
        eps: f64,
    ) -> Result<SelectedQueries> {
        let t = token_boxes.len();
        if mode == QueryMode::Static {
            let anchors = ctx.get("qs.static_anchors")?.sigmoid();
            let content = ctx.get("qs.query_embed")?;
            let anchor_values = tensor_boxes(&anchors);
            return Ok(SelectedQueries {
                anchors,
                content,
                encoder_pred: None,
                anchor_values,
            });
        }

        let logits = self.cls_head.forward(ctx, memory)?; // [T, C]
        let deltas = self.box_head.forward(ctx, memory)?; // [T, 4]
        let flat: Vec<f64> = token_boxes.iter().flat_map(|b| b.coords()).collect();
        let base = ctx.tape().constant(flat, &[t, 4])?;
        let proposals = update_boxes(&base, &deltas, eps)?; // [T, 4]

        let k = if self.num_queries > t {
            log::warn!(
                "query selection capped: {} queries requested, {} tokens available",
                self.num_queries,
                t
            );
            t
        } else {
            self.num_queries
        };
        // rank by the maximum class logit; ties break toward the lower index
        let ld = logits.data();
        let mut scored: Vec<(usize, f64)> = (0..t)
            .map(|i| {
                let row = &ld[i * self.num_classes..(i + 1) * self.num_classes];
                let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (i, best)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let top: Vec<usize> = scored[..k].iter().map(|&(i, _)| i).collect();

        let selected = proposals.gather_rows(&top)?;
        let anchors = if detach_anchors {
            selected.detach()
        } else {
            selected
        };
        let content = match mode {
            QueryMode::Mixed => ctx.get("qs.query_embed")?.slice(0, 0, k)?,
            QueryMode::Pure => {
                let feats = memory.gather_rows(&top)?;
                self.content_proj.forward(ctx, &feats)?
            }
            QueryMode::Static => unreachable!(),
        };
        let anchor_values = tensor_boxes(&anchors);
        Ok(SelectedQueries {
            anchors,
            content,
            encoder_pred: Some(LayerPred {
                boxes: proposals,
                logits,
            }),
            anchor_values,
        })
    }
}

pub fn tensor_boxes(t: &Tensor) -> Vec<BoxCxCyWh> {
    t.data()
        .chunks(4)
        .map(|c| BoxCxCyWh::new(c[0], c[1], c[2], c[3]))
        .collect()
}
