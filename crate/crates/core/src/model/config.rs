//! Architecture configuration for the detector.

use crate::error::{Error, Result};

/// Query initialization for the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    /// Anchors and content both learned embeddings; encoder features ignored.
    Static,
    /// Anchors and content both derived from selected encoder features.
    Pure,
    /// Anchors from selected encoder features, content stays learned.
    Mixed,
}

impl QueryMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(QueryMode::Static),
            "pure" => Ok(QueryMode::Pure),
            "mixed" => Ok(QueryMode::Mixed),
            other => Err(Error::Config(format!(
                "qs_mode must be static|pure|mixed, got {other}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            QueryMode::Static => "static",
            QueryMode::Pure => "pure",
            QueryMode::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Square input edge length in pixels.
    pub image_size: usize,
    pub hidden_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub nheads: usize,
    pub num_queries: usize,
    pub enc_n_points: usize,
    pub dec_n_points: usize,
    /// Feature scales, strides 8 * 2^i for i in 0..num_levels.
    pub num_levels: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    /// Route each layer's box gradient into the previous layer's offset.
    pub look_forward_twice: bool,
    pub query_mode: QueryMode,
    pub pe_temperature: f64,
    pub inverse_sigmoid_eps: f64,
    /// Detach selected anchors before the decoder uses them; the encoder
    /// head then trains only through its own auxiliary loss.
    pub detach_selected_anchors: bool,
    /// One box/class head shared across decoder layers.
    pub share_prediction_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            hidden_dim: 64,
            enc_layers: 2,
            dec_layers: 2,
            nheads: 8,
            num_queries: 20,
            enc_n_points: 4,
            dec_n_points: 4,
            num_levels: 2,
            ffn_dim: 256,
            num_classes: 2,
            look_forward_twice: true,
            query_mode: QueryMode::Mixed,
            pe_temperature: 20.0,
            inverse_sigmoid_eps: 1e-3,
            detach_selected_anchors: true,
            share_prediction_heads: true,
        }
    }
}

impl ModelConfig {
    pub fn total_stride(&self) -> usize {
        8 << (self.num_levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim % self.nheads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by nheads {}",
                self.hidden_dim, self.nheads
            )));
        }
        if self.hidden_dim % 8 != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by 8 for the box encoding",
                self.hidden_dim
            )));
        }
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be at least 1".into()));
        }
        if !(1..=4).contains(&self.num_levels) {
            return Err(Error::Config(format!(
                "num_levels must be in 1..=4, got {}",
                self.num_levels
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("need at least one encoder and decoder layer".into()));
        }
        if self.image_size % self.total_stride() != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by total stride {}",
                self.image_size,
                self.total_stride()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }
}
