//! The detector: backbone, deformable-attention encoder, query selection,
//! and anchor-box decoder with denoising queries.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, QueryMode};
pub use params::{ParamCtx, ParamStore};

use crate::boxes::BoxCxCyWh;
use crate::denoise::DnBatch;
use crate::error::{Error, Result};
use crate::loss::LayerPred;
use crate::tensor::{Tape, Tensor};

use backbone::Backbone;
use decoder::Decoder;
use encoder::{split_levels, Encoder, QuerySelector};

pub struct Detector {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub selector: QuerySelector,
    pub decoder: Decoder,
}

/// Everything a training step needs from one forward pass. The tape and
/// parameter binding stay alive so a loss built on top can run backward.
pub struct ForwardOutput {
    pub tape: Tape,
    pub ctx: ParamCtx,
    /// Per decoder layer, matching-query predictions.
    pub matching: Vec<LayerPred>,
    /// Per decoder layer, denoising-query predictions (empty without DN).
    pub dn: Vec<LayerPred>,
    /// Encoder selection-head predictions over all tokens.
    pub encoder_pred: Option<LayerPred>,
    /// Initial anchor boxes of the matching queries.
    pub initial_anchors: Vec<BoxCxCyWh>,
}

impl Detector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Detector> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.hidden_dim, config.num_levels);
        let encoder = Encoder::new(&config);
        let selector = QuerySelector::new(&config);
        let decoder = Decoder::new(&config);
        let mut params = ParamStore::new();
        backbone.register(&mut params, &mut rng);
        encoder.register(&mut params, &mut rng);
        selector.register(&mut params, &mut rng);
        decoder.register(&mut params, &mut rng);
        params.add(
            "label_embed",
            &[config.num_classes, config.hidden_dim],
            params::uniform_init(&mut rng, config.num_classes * config.hidden_dim, 0.5),
            false,
        );
        Ok(Detector {
            config,
            params,
            backbone,
            encoder,
            selector,
            decoder,
        })
    }

    /// Run the pipeline on one image (row-major [H, W, 3] values in [0, 1]).
    /// `dn` carries the denoising queries during training; `trainable`
    /// binds parameters with gradient tracking.
    pub fn forward(
        &self,
        image: &[f64],
        dn: Option<&DnBatch>,
        trainable: bool,
    ) -> Result<ForwardOutput> {
        let s = self.config.image_size;
        if image.len() != s * s * 3 {
            return Err(Error::InvalidArgument {
                op: "forward",
                msg: format!("expected {} image values, got {}", s * s * 3, image.len()),
            });
        }
        let tape = Tape::new();
        let ctx = ParamCtx::bind(&tape, &self.params, trainable)?;
        let image_t = tape.constant(image.to_vec(), &[s, s, 3])?;

        let features = self.backbone.forward(&ctx, &image_t)?;
        let memory = self.encoder.forward(&ctx, &features)?;
        let selected = self.selector.select(
            &ctx,
            &memory,
            &features.all_cell_boxes(),
            self.config.query_mode,
            self.config.detach_selected_anchors,
            self.config.inverse_sigmoid_eps,
        )?;
        let num_matching = selected.anchors.shape()[0];

        let (content0, anchors0, mask, dn_queries) = match dn {
            Some(batch) if batch.dn_queries() > 0 => {
                if batch.num_matching != num_matching {
                    return Err(Error::Alignment(format!(
                        "denoising batch expects {} matching queries, model built {}",
                        batch.num_matching, num_matching
                    )));
                }
                let dn_boxes: Vec<f64> = batch
                    .query_boxes()
                    .iter()
                    .flat_map(|b| b.coords())
                    .collect();
                let dn_q = batch.dn_queries();
                let dn_anchor_t = tape.constant(dn_boxes, &[dn_q, 4])?;
                let labels = batch.query_labels();
                let dn_content = ctx.get("label_embed")?.gather_rows(&labels)?;
                (
                    Tensor::concat(&[&dn_content, &selected.content], 0)?,
                    Tensor::concat(&[&dn_anchor_t, &selected.anchors], 0)?,
                    Some(batch.attention_mask.clone()),
                    dn_q,
                )
            }
            _ => (selected.content.clone(), selected.anchors.clone(), None, 0),
        };

        let level_dims: Vec<(usize, usize)> =
            features.levels.iter().map(|l| (l.h, l.w)).collect();
        let value_levels = split_levels(&memory, &level_dims)?;
        let dec_out = self.decoder.forward(
            &ctx,
            &content0,
            &anchors0,
            mask.as_deref(),
            &value_levels,
        )?;

        let mut matching = Vec::with_capacity(dec_out.layer_preds.len());
        let mut dn_preds = Vec::new();
        for pred in &dec_out.layer_preds {
            let total = pred.num_queries();
            if dn_queries > 0 {
                dn_preds.push(LayerPred {
                    boxes: pred.boxes.slice(0, 0, dn_queries)?,
                    logits: pred.logits.slice(0, 0, dn_queries)?,
                });
            }
            matching.push(LayerPred {
                boxes: pred.boxes.slice(0, dn_queries, total)?,
                logits: pred.logits.slice(0, dn_queries, total)?,
            });
        }

        Ok(ForwardOutput {
            tape,
            ctx,
            matching,
            dn: dn_preds,
            encoder_pred: selected.encoder_pred,
            initial_anchors: selected.anchor_values,
        })
    }

    /// Detections from the final decoder layer: (box, label, score) per
    /// matching query.
    pub fn detections(output: &ForwardOutput) -> Vec<(BoxCxCyWh, usize, f64)> {
        let last = output.matching.last().expect("decoder has layers");
        let boxes = last.box_values();
        let probs = last.probs();
        let c = last.num_classes();
        boxes
            .into_iter()
            .enumerate()
            .map(|(q, b)| {
                let row = &probs[q * c..(q + 1) * c];
                let (label, score) = row
                    .iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |acc, (i, &p)| {
                        if p > acc.1 {
                            (i, p)
                        } else {
                            acc
                        }
                    });
                (b, label, score)
            })
            .collect()
    }
}
