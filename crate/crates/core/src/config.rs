//! Run configuration: a flat `key = value` text format carrying every
//! hyper-parameter under its conventional name. Unknown keys are hard
//! errors so a typo cannot silently fall back to a default.

use crate::data::GenConfig;
use crate::denoise::DnConfig;
use crate::error::{Error, Result};
use crate::loss::{CostConfig, LossConfig};
use crate::metrics::AreaRanges;
use crate::model::{ModelConfig, QueryMode};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // optimization
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub clip_max_norm: f64,
    pub epochs: usize,
    pub lr_drop_epoch: usize,
    pub seed: u64,
    // architecture
    pub pe_temperature: f64,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dim_feedforward: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub nheads: usize,
    pub num_queries: usize,
    pub enc_n_points: usize,
    pub dec_n_points: usize,
    pub transformer_activation: String,
    pub batch_norm_type: String,
    pub num_levels: usize,
    // matching and loss
    pub set_cost_class: f64,
    pub set_cost_bbox: f64,
    pub set_cost_giou: f64,
    pub cls_loss_coef: f64,
    pub bbox_loss_coef: f64,
    pub giou_loss_coef: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    // denoising
    pub dn_box_noise_scale: f64,
    pub dn_label_noise_ratio: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub cdn_pair_capacity: usize,
    // ablation toggles
    pub qs_mode: String,
    pub cdn_on: bool,
    pub lft_on: bool,
    pub detach_selected_anchors: bool,
    pub share_prediction_heads: bool,
    // data and desk-scale shapes
    pub image_size: usize,
    pub num_classes: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    // numerics and diagnostics
    pub inverse_sigmoid_eps: f64,
    pub box_clamp_eps: f64,
    pub duplicate_score_thresh: f64,
    pub duplicate_iou_thresh: f64,
    pub area_small: f64,
    pub area_medium: f64,
    pub atd_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lr: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            clip_max_norm: 0.1,
            epochs: 4,
            lr_drop_epoch: 3,
            seed: 0,
            pe_temperature: 20.0,
            enc_layers: 2,
            dec_layers: 2,
            dim_feedforward: 256,
            hidden_dim: 64,
            dropout: 0.0,
            nheads: 8,
            num_queries: 20,
            enc_n_points: 4,
            dec_n_points: 4,
            transformer_activation: "relu".into(),
            batch_norm_type: "none".into(),
            num_levels: 2,
            set_cost_class: 2.0,
            set_cost_bbox: 5.0,
            set_cost_giou: 2.0,
            cls_loss_coef: 1.0,
            bbox_loss_coef: 5.0,
            giou_loss_coef: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dn_box_noise_scale: 0.4,
            dn_label_noise_ratio: 0.5,
            lambda1: 1.0,
            lambda2: 2.0,
            cdn_pair_capacity: 10,
            qs_mode: "mixed".into(),
            cdn_on: true,
            lft_on: true,
            detach_selected_anchors: true,
            share_prediction_heads: true,
            image_size: 64,
            num_classes: 2,
            train_images: 500,
            val_images: 100,
            min_objects: 1,
            max_objects: 8,
            inverse_sigmoid_eps: 1e-3,
            box_clamp_eps: 1e-3,
            duplicate_score_thresh: 0.3,
            duplicate_iou_thresh: 0.9,
            area_small: (32.0 / 640.0) * (32.0 / 640.0),
            area_medium: (96.0 / 640.0) * (96.0 / 640.0),
            atd_k: 100,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $kind:ident),+ $(,)?) => {
        impl RunConfig {
            /// Apply one `key = value` pair.
            pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = parse_value!($kind, key, value)?;
                        Ok(())
                    })+
                    other => Err(Error::Config(format!("unknown config key: {other}"))),
                }
            }

            /// Serialize every key in a stable order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($key), self.$key));)+
                out
            }
        }
    };
}

macro_rules! parse_value {
    (f64, $key:ident, $value:ident) => {
        $value.parse::<f64>().map_err(|_| {
            Error::Config(format!("{}: expected a number, got {}", $key, $value))
        })
    };
    (usize, $key:ident, $value:ident) => {
        $value.parse::<usize>().map_err(|_| {
            Error::Config(format!("{}: expected a non-negative integer, got {}", $key, $value))
        })
    };
    (u64, $key:ident, $value:ident) => {
        $value.parse::<u64>().map_err(|_| {
            Error::Config(format!("{}: expected a non-negative integer, got {}", $key, $value))
        })
    };
    (bool, $key:ident, $value:ident) => {
        match $value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Error::Config(format!(
                "{}: expected true or false, got {}",
                $key, $value
            ))),
        }
    };
    (String, $key:ident, $value:ident) => {
        Ok::<String, Error>($value.to_string())
    };
}

config_keys! {
    lr: f64,
    lr_backbone: f64,
    weight_decay: f64,
    clip_max_norm: f64,
    epochs: usize,
    lr_drop_epoch: usize,
    seed: u64,
    pe_temperature: f64,
    enc_layers: usize,
    dec_layers: usize,
    dim_feedforward: usize,
    hidden_dim: usize,
    dropout: f64,
    nheads: usize,
    num_queries: usize,
    enc_n_points: usize,
    dec_n_points: usize,
    transformer_activation: String,
    batch_norm_type: String,
    num_levels: usize,
    set_cost_class: f64,
    set_cost_bbox: f64,
    set_cost_giou: f64,
    cls_loss_coef: f64,
    bbox_loss_coef: f64,
    giou_loss_coef: f64,
    focal_alpha: f64,
    focal_gamma: f64,
    dn_box_noise_scale: f64,
    dn_label_noise_ratio: f64,
    lambda1: f64,
    lambda2: f64,
    cdn_pair_capacity: usize,
    qs_mode: String,
    cdn_on: bool,
    lft_on: bool,
    detach_selected_anchors: bool,
    share_prediction_heads: bool,
    image_size: usize,
    num_classes: usize,
    train_images: usize,
    val_images: usize,
    min_objects: usize,
    max_objects: usize,
    inverse_sigmoid_eps: f64,
    box_clamp_eps: f64,
    duplicate_score_thresh: f64,
    duplicate_iou_thresh: f64,
    area_small: f64,
    area_medium: f64,
    atd_k: usize,
}

impl RunConfig {
    /// Parse the flat text format: `key = value` lines, `#` comments.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.set_key(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.dn_config().validate()?;
        if self.dropout != 0.0 {
            return Err(Error::Config(
                "dropout must be 0.0 (non-zero dropout is not supported at desk scale)".into(),
            ));
        }
        if self.transformer_activation != "relu" {
            return Err(Error::Config(format!(
                "transformer_activation must be relu, got {}",
                self.transformer_activation
            )));
        }
        if self.batch_norm_type != "none" && self.batch_norm_type != "FrozenBatchNorm2d" {
            return Err(Error::Config(format!(
                "batch_norm_type must be none or FrozenBatchNorm2d, got {}",
                self.batch_norm_type
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.min_objects > self.max_objects || self.max_objects == 0 {
            return Err(Error::Config(format!(
                "need 0 < min_objects <= max_objects, got {}..{}",
                self.min_objects, self.max_objects
            )));
        }
        if self.atd_k == 0 {
            return Err(Error::Config("atd_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            image_size: self.image_size,
            hidden_dim: self.hidden_dim,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            nheads: self.nheads,
            num_queries: self.num_queries,
            enc_n_points: self.enc_n_points,
            dec_n_points: self.dec_n_points,
            num_levels: self.num_levels,
            ffn_dim: self.dim_feedforward,
            num_classes: self.num_classes,
            look_forward_twice: self.lft_on,
            query_mode: QueryMode::parse(&self.qs_mode)?,
            pe_temperature: self.pe_temperature,
            inverse_sigmoid_eps: self.inverse_sigmoid_eps,
            detach_selected_anchors: self.detach_selected_anchors,
            share_prediction_heads: self.share_prediction_heads,
        })
    }

    pub fn dn_config(&self) -> DnConfig {
        DnConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            box_noise_scale: self.dn_box_noise_scale,
            label_noise_ratio: self.dn_label_noise_ratio,
            cdn_pair_capacity: self.cdn_pair_capacity,
            num_classes: self.num_classes,
            clamp_eps: self.box_clamp_eps,
        }
    }

    pub fn cost_config(&self) -> CostConfig {
        CostConfig {
            cost_class: self.set_cost_class,
            cost_bbox: self.set_cost_bbox,
            cost_giou: self.set_cost_giou,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            cls_coef: self.cls_loss_coef,
            l1_coef: self.bbox_loss_coef,
            giou_coef: self.giou_loss_coef,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            image_size: self.image_size,
            num_classes: self.num_classes,
            train_images: self.train_images,
            val_images: self.val_images,
            seed: self.seed,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
        }
    }

    pub fn area_ranges(&self) -> AreaRanges {
        AreaRanges {
            small_max: self.area_small,
            medium_max: self.area_medium,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("lr = 0.001\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn comments_and_overrides_parse() {
        let cfg = RunConfig::parse(
            "# a comment\nlr = 0.01  # inline\n\nqs_mode = pure\ncdn_on = false\n",
        )
        .unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.qs_mode, "pure");
        assert!(!cfg.cdn_on);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("dropout = 0.5\n").is_err());
        assert!(RunConfig::parse("lambda1 = 3\n").is_err()); // needs < lambda2
        assert!(RunConfig::parse("qs_mode = fancy\n").is_err());
        assert!(RunConfig::parse("hidden_dim = 63\n").is_err());
        assert!(RunConfig::parse("cdn_on = yes\n").is_err());
    }

    #[test]
    fn set_key_matches_parser() {
        let mut cfg = RunConfig::default();
        cfg.set_key("epochs", "9").unwrap();
        assert_eq!(cfg.epochs, 9);
        assert!(cfg.set_key("vibes", "high").is_err());
    }
}
