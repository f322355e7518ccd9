//! One-to-one test-time-augmentation fusion. Each main-augmentation
//! prediction picks at most one partner per auxiliary augmentation (highest
//! IoU, same label, above threshold) and the accepted boxes merge by a
//! score-and-weight weighted average. Output size always equals the main
//! prediction count, so fusion can never remove a true positive.

use crate::boxes::{iou, BoxXyXy};
use crate::error::{Error, Result};

/// Predictions of one augmentation, mapped back to the main frame.
#[derive(Debug, Clone, Default)]
pub struct AugmentedPrediction {
    pub boxes: Vec<BoxXyXy>,
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
    pub weight: f64,
}

impl AugmentedPrediction {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.labels.len() || self.boxes.len() != self.scores.len() {
            return Err(Error::Alignment(format!(
                "augmented prediction lists disagree: {} boxes, {} labels, {} scores",
                self.boxes.len(),
                self.labels.len(),
                self.scores.len()
            )));
        }
        if self.weight <= 0.0 {
            return Err(Error::Config(format!(
                "augmentation weight must be positive, got {}",
                self.weight
            )));
        }
        Ok(())
    }
}

/// How fused coordinates are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Divide by the sum of accepted w*s terms: the fused box is a convex
    /// combination of its contributors.
    Normalized,
    /// Divide by the accepted-contributor count only, leaving the w*s
    /// scaling on the coordinates. Kept for comparison; with w*s far from
    /// one this can leave the valid box range.
    Literal,
}

impl EnsembleMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(EnsembleMode::Normalized),
            "literal" => Ok(EnsembleMode::Literal),
            other => Err(Error::Config(format!(
                "ensemble mode must be normalized|literal, got {other}"
            ))),
        }
    }
}

/// Fuse auxiliary predictions into the main set, one output per main
/// prediction. Fused score and label stay the main prediction's.
pub fn ensemble(
    main: &AugmentedPrediction,
    others: &[AugmentedPrediction],
    iou_threshold: f64,
    mode: EnsembleMode,
) -> Result<AugmentedPrediction> {
    main.validate()?;
    for o in others {
        o.validate()?;
    }
    let mut fused = AugmentedPrediction {
        boxes: Vec::with_capacity(main.len()),
        labels: main.labels.clone(),
        scores: main.scores.clone(),
        weight: main.weight,
    };
    for j in 0..main.len() {
        let mb = main.boxes[j];
        // (weight * score, box) per accepted contributor; the main
        // augmentation always participates
        let mut terms: Vec<(f64, BoxXyXy)> = vec![(main.weight * main.scores[j], mb)];
        for aug in others {
            let mut best: Option<(f64, usize)> = None;
            for i in 0..aug.len() {
                if aug.labels[i] != main.labels[j] {
                    continue;
                }
                let v = iou(mb, aug.boxes[i]);
                if v > iou_threshold && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, i));
                }
            }
            if let Some((_, i)) = best {
                terms.push((aug.weight * aug.scores[i], aug.boxes[i]));
            }
        }
        let denom = match mode {
            EnsembleMode::Normalized => terms.iter().map(|(ws, _)| ws).sum::<f64>(),
            EnsembleMode::Literal => terms.len() as f64,
        };
        let out = if denom <= 0.0 {
            mb // degenerate all-zero weights: keep the main box
        } else {
            let mut acc = [0.0f64; 4];
            for (ws, b) in &terms {
                acc[0] += ws * b.x0;
                acc[1] += ws * b.y0;
                acc[2] += ws * b.x1;
                acc[3] += ws * b.y1;
            }
            BoxXyXy::new(acc[0] / denom, acc[1] / denom, acc[2] / denom, acc[3] / denom)
        };
        fused.boxes.push(out);
    }
    Ok(fused)
}

/// Geometric test-time augmentation of the input image, as applied to
/// predicted boxes when mapping them back to the main frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugDescriptor {
    Identity,
    /// Horizontal flip of an image `width` pixels wide.
    HFlip { width: f64 },
    /// Uniform scale by `factor`.
    Scale { factor: f64 },
}

impl AugDescriptor {
    /// Parse "identity", "hflip:WIDTH", or "scale:FACTOR".
    pub fn parse(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(AugDescriptor::Identity);
        }
        if let Some(rest) = s.strip_prefix("hflip:") {
            let width: f64 = rest
                .parse()
                .map_err(|_| Error::Config(format!("bad hflip width in {s}")))?;
            return Ok(AugDescriptor::HFlip { width });
        }
        if let Some(rest) = s.strip_prefix("scale:") {
            let factor: f64 = rest
                .parse()
                .map_err(|_| Error::Config(format!("bad scale factor in {s}")))?;
            if factor <= 0.0 {
                return Err(Error::Config("scale factor must be positive".into()));
            }
            return Ok(AugDescriptor::Scale { factor });
        }
        Err(Error::Config(format!(
            "unknown augmentation descriptor {s}; expected identity, hflip:WIDTH, or scale:FACTOR"
        )))
    }
}

/// Map predictions made on an augmented image back to the main frame.
pub fn invert_augmentation(
    preds: &AugmentedPrediction,
    aug: &AugDescriptor,
) -> AugmentedPrediction {
    let boxes = preds
        .boxes
        .iter()
        .map(|b| match aug {
            AugDescriptor::Identity => *b,
            AugDescriptor::HFlip { width } => {
                BoxXyXy::new(width - b.x1, b.y0, width - b.x0, b.y1)
            }
            AugDescriptor::Scale { factor } => BoxXyXy::new(
                b.x0 / factor,
                b.y0 / factor,
                b.x1 / factor,
                b.y1 / factor,
            ),
        })
        .collect();
    AugmentedPrediction {
        boxes,
        labels: preds.labels.clone(),
        scores: preds.scores.clone(),
        weight: preds.weight,
    }
}
