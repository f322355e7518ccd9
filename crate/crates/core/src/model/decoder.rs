//! Transformer decoder with anchor-box queries. Anchors refine layer by
//! layer through the logit-space update; the box passed to the next layer
//! is detached, and in look-forward-twice mode each layer's reported
//! prediction composes the *undetached* previous box with the current
//! offset so later losses reach earlier offset heads.

use rand_chacha::ChaCha8Rng;

use super::attention::{DeformableAttention, SelfAttention};
use super::config::ModelConfig;
use super::layers::{box_encoding_tensor, LayerNorm, Linear, Mlp};
use super::params::{ParamCtx, ParamStore};
use crate::boxes::update_boxes;
use crate::error::Result;
use crate::loss::LayerPred;
use crate::tensor::Tensor;

struct DecoderLayer {
    self_attn: SelfAttention,
    norm1: LayerNorm,
    cross_attn: DeformableAttention,
    norm2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn new(idx: usize, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let p = format!("decoder.{idx}");
        DecoderLayer {
            self_attn: SelfAttention::new(&format!("{p}.self"), d, cfg.nheads),
            norm1: LayerNorm::new(format!("{p}.norm1"), d),
            cross_attn: DeformableAttention::new(
                &format!("{p}.cross"),
                d,
                cfg.nheads,
                cfg.num_levels,
                cfg.dec_n_points,
            ),
            norm2: LayerNorm::new(format!("{p}.norm2"), d),
            ffn1: Linear::new(format!("{p}.ffn1"), d, cfg.ffn_dim),
            ffn2: Linear::new(format!("{p}.ffn2"), cfg.ffn_dim, d),
            norm3: LayerNorm::new(format!("{p}.norm3"), d),
        }
    }

    fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.self_attn.register(store, rng);
        self.norm1.register(store);
        self.cross_attn.register(store, rng);
        self.norm2.register(store);
        self.ffn1.register(store, rng, false);
        self.ffn2.register(store, rng, false);
        self.norm3.register(store);
    }
}

pub struct Decoder {
    layers: Vec<DecoderLayer>,
    box_heads: Vec<Mlp>,
    cls_heads: Vec<Linear>,
    pe_proj: Linear,
    shared_heads: bool,
    hidden_dim: usize,
    pe_temperature: f64,
    eps: f64,
    look_forward_twice: bool,
}

pub struct DecoderOutput {
    /// One prediction set per layer over the full query set (denoising
    /// queries first, then matching queries).
    pub layer_preds: Vec<LayerPred>,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let head_count = if cfg.share_prediction_heads {
            1
        } else {
            cfg.dec_layers
        };
        let box_heads = (0..head_count)
            .map(|i| Mlp::new(&format!("decoder.box_head{i}"), &[d, d, 4]))
            .collect();
        let cls_heads = (0..head_count)
            .map(|i| Linear::new(format!("decoder.cls_head{i}"), d, cfg.num_classes))
            .collect();
        Decoder {
            layers: (0..cfg.dec_layers).map(|i| DecoderLayer::new(i, cfg)).collect(),
            box_heads,
            cls_heads,
            pe_proj: Linear::new("decoder.pe_proj", d, d),
            shared_heads: cfg.share_prediction_heads,
            hidden_dim: d,
            pe_temperature: cfg.pe_temperature,
            eps: cfg.inverse_sigmoid_eps,
            look_forward_twice: cfg.look_forward_twice,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for l in &self.layers {
            l.register(store, rng);
        }
        for (bh, ch) in self.box_heads.iter().zip(&self.cls_heads) {
            bh.register_zero_final(store, rng);
            let out = ch.out_dim;
            ch.register_with(
                store,
                super::params::xavier_init(rng, ch.in_dim, out),
                vec![-2.0; out],
                false,
            );
        }
        self.pe_proj.register(store, rng, false);
    }

    fn head(&self, i: usize) -> (&Mlp, &Linear) {
        if self.shared_heads {
            (&self.box_heads[0], &self.cls_heads[0])
        } else {
            (&self.box_heads[i], &self.cls_heads[i])
        }
    }

    /// - `content`: [Q, D] initial content queries (denoising + matching)
    /// - `anchors`: [Q, 4] initial anchor boxes
    /// - `mask`: self-attention mask, true = may attend
    /// - `value_levels`: encoder tokens per level
    pub fn forward(
        &self,
        ctx: &ParamCtx,
        content: &Tensor,
        anchors: &Tensor,
        mask: Option<&[bool]>,
        value_levels: &[(usize, usize, Tensor)],
    ) -> Result<DecoderOutput> {
        let mut content = content.clone();
        let mut prev_detached = anchors.clone();
        let mut prev_undetached = anchors.clone();
        let mut layer_preds = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let pos = self.pe_proj.forward(
                ctx,
                &box_encoding_tensor(&prev_detached, self.hidden_dim, self.pe_temperature)?,
            )?;
            let qk = content.add(&pos)?;
            let sa = layer.self_attn.forward(ctx, &qk, &content, mask)?;
            content = layer.norm1.forward(ctx, &content.add(&sa)?)?;

            let q2 = content.add(&pos)?;
            let ca = layer
                .cross_attn
                .forward(ctx, &q2, &prev_detached, value_levels)?;
            content = layer.norm2.forward(ctx, &content.add(&ca)?)?;

            let f = layer
                .ffn2
                .forward(ctx, &layer.ffn1.forward(ctx, &content)?.relu())?;
            content = layer.norm3.forward(ctx, &content.add(&f)?)?;

            let (box_head, cls_head) = self.head(i);
            let delta = box_head.forward(ctx, &content)?;
            let logits = cls_head.forward(ctx, &content)?;

            let refined = update_boxes(&prev_detached, &delta, self.eps)?;
            let reported = if self.look_forward_twice {
                update_boxes(&prev_undetached, &delta, self.eps)?
            } else {
                refined.clone()
            };
            layer_preds.push(LayerPred {
                boxes: reported,
                logits,
            });
            prev_undetached = refined.clone();
            prev_detached = refined.detach();
        }
        Ok(DecoderOutput { layer_preds })
    }
}
