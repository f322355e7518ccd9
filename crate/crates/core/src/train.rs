//! Training loop: decoupled-weight-decay adaptive moments, global gradient
//! clipping, a step-wise learning-rate drop, per-epoch evaluation rows, and
//! bit-exact checkpoint/resume.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::BoxCxCyWh;
use crate::config::RunConfig;
use crate::data::{augment, CocoResultRecord, Dataset};
use crate::denoise::build_dn_batch;
use crate::error::{Error, Result};
use crate::hungarian::hungarian;
use crate::loss::{dn_loss, matching_cost, set_loss, LayerPred};
use crate::metrics::{
    duplicate_rate, evaluate_ap, Detection, EvalResult, GtObject, MetricsRow, CSV_HEADER,
};
use crate::model::checkpoint::{self, CheckpointMeta};
use crate::model::{Detector, ParamStore};

/// Adaptive moment estimation with decoupled weight decay,
/// beta = (0.9, 0.999).
pub struct AdamW {
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, lr_backbone: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            lr_backbone,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            v: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
        }
    }

    /// One update from the gradients currently held in the store.
    /// `lr_scale` carries the schedule (1.0, then 0.1 after the drop).
    pub fn step(&mut self, store: &mut ParamStore, lr_scale: f64) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (idx, e) in store.entries_mut().iter_mut().enumerate() {
            let lr = if e.backbone { self.lr_backbone } else { self.lr } * lr_scale;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..e.data.len() {
                let g = e.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                e.data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * e.data[i]);
            }
        }
    }

    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::with_capacity(store.len() * 2);
        for (idx, e) in store.entries().iter().enumerate() {
            out.push((format!("adamw.m.{}", e.name), e.shape.clone(), self.m[idx].clone()));
            out.push((format!("adamw.v.{}", e.name), e.shape.clone(), self.v[idx].clone()));
        }
        out
    }

    pub fn restore_state(
        &mut self,
        store: &ParamStore,
        tensors: &[(String, Vec<usize>, Vec<f64>)],
        step_count: usize,
    ) -> Result<()> {
        self.step_count = step_count;
        for (idx, e) in store.entries().iter().enumerate() {
            let find = |prefix: &str| -> Result<&Vec<f64>> {
                let name = format!("{prefix}.{}", e.name);
                tensors
                    .iter()
                    .find(|(n, _, _)| *n == name)
                    .map(|(_, _, d)| d)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))
            };
            self.m[idx] = find("adamw.m")?.clone();
            self.v[idx] = find("adamw.v")?.clone();
        }
        Ok(())
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for e in store.entries() {
        for &g in &e.grad {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for e in store.entries_mut() {
            for g in &mut e.grad {
                *g *= scale;
            }
        }
    }
    norm
}

/// Evaluation over a dataset: one eval-mode forward per image feeding the
/// AP evaluator, the duplicate counter, and the anchor-distance tracker.
pub fn evaluate_model(
    model: &Detector,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<(EvalResult, Vec<CocoResultRecord>)> {
    if data.images.is_empty() {
        return Err(Error::UndefinedMetric(
            "evaluation over an empty dataset".into(),
        ));
    }
    let cost_cfg = cfg.cost_config();
    let loss_cfg = cfg.loss_config();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut results = Vec::new();
    let mut pairs: Vec<(BoxCxCyWh, BoxCxCyWh)> = Vec::new();
    let mut small_pairs: Vec<(BoxCxCyWh, BoxCxCyWh)> = Vec::new();
    let px = data.image_size as f64;
    for (image_id, img) in data.images.iter().enumerate() {
        let out = model.forward(&img.to_floats(), None, false)?;
        for (bbox, label, score) in Detector::detections(&out) {
            dets.push(Detection {
                image_id,
                label,
                score,
                bbox,
            });
            let xy = bbox.to_xyxy();
            results.push(CocoResultRecord {
                image_id: image_id as u64,
                category_id: label as u64,
                bbox: [
                    xy.x0 * px,
                    xy.y0 * px,
                    (xy.x1 - xy.x0) * px,
                    (xy.y1 - xy.y0) * px,
                ],
                score,
            });
        }
        for a in &img.annotations {
            gts.push(GtObject {
                image_id,
                label: a.label,
                bbox: a.bbox(),
            });
        }
        // anchor-quality pairs via final-layer matching
        if !img.annotations.is_empty() {
            let last = out.matching.last().unwrap();
            let gt_labels: Vec<usize> = img.annotations.iter().map(|a| a.label).collect();
            let gt_boxes: Vec<BoxCxCyWh> = img.annotations.iter().map(|a| a.bbox()).collect();
            let cost = matching_cost(
                &last.probs(),
                &last.box_values(),
                &gt_labels,
                &gt_boxes,
                last.num_classes(),
                &cost_cfg,
                &loss_cfg,
            );
            for &(p, g) in &hungarian(&cost)?.pairs {
                let pair = (gt_boxes[g], out.initial_anchors[p]);
                pairs.push(pair);
                if gt_boxes[g].area() < cfg.area_small {
                    small_pairs.push(pair);
                }
            }
        }
    }
    let mut eval = evaluate_ap(&dets, &gts, &cfg.area_ranges());
    eval.duplicate_rate = duplicate_rate(&dets, cfg.duplicate_score_thresh, cfg.duplicate_iou_thresh);
    if !pairs.is_empty() {
        eval.atd100 = crate::denoise::atd(&pairs, cfg.atd_k)?;
    }
    if !small_pairs.is_empty() {
        eval.atd100_small = crate::denoise::atd(&small_pairs, cfg.atd_k)?;
    }
    Ok((eval, results))
}

pub struct TrainOutput {
    pub rows: Vec<MetricsRow>,
    pub csv_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub model: Detector,
}

struct TrainState {
    model: Detector,
    opt: AdamW,
    rng: ChaCha8Rng,
    start_epoch: usize,
    global_step: usize,
    lr_scale: f64,
}

const TRAIN_RNG_SALT: u64 = 0x7261696e; // distinct stream from data gen

fn fresh_state(cfg: &RunConfig) -> Result<TrainState> {
    let model = Detector::new(cfg.model_config()?, cfg.seed)?;
    let opt = AdamW::new(&model.params, cfg.lr, cfg.lr_backbone, cfg.weight_decay);
    Ok(TrainState {
        model,
        opt,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_RNG_SALT),
        start_epoch: 0,
        global_step: 0,
        lr_scale: 1.0,
    })
}

fn save_state(path: &Path, cfg: &RunConfig, st: &TrainState, epoch_done: usize) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = st
        .model
        .params
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.shape.clone(), e.data.clone()))
        .collect();
    tensors.extend(st.opt.state_tensors(&st.model.params));
    let meta = CheckpointMeta {
        config_text: cfg.to_text(),
        epoch: epoch_done,
        global_step: st.global_step,
        adamw_step: st.opt.step_count,
        lr_current: st.lr_scale,
        rng_seed_hex: hex_encode(&st.rng.get_seed()),
        rng_word_pos: st.rng.get_word_pos().to_string(),
    };
    let refs: Vec<(String, Vec<usize>, &[f64])> = tensors
        .iter()
        .map(|(n, s, d)| (n.clone(), s.clone(), d.as_slice()))
        .collect();
    checkpoint::save(path, &meta, &refs)
}

/// Rebuild a detector (and optionally the full training state) from a
/// checkpoint. The embedded config text is authoritative for shapes.
pub fn load_model(path: &Path) -> Result<(RunConfig, Detector)> {
    let (meta, tensors) = checkpoint::load(path)?;
    let cfg = RunConfig::parse(&meta.config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let mut model = Detector::new(cfg.model_config()?, cfg.seed)?;
    for (name, shape, data) in &tensors {
        if name.starts_with("adamw.") {
            continue;
        }
        let e = model.params.get_mut(name).map_err(|_| {
            Error::Checkpoint(format!("checkpoint carries unknown parameter {name}"))
        })?;
        if e.shape != *shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?} vs model {:?}",
                shape, e.shape
            )));
        }
        e.data = data.clone();
    }
    Ok((cfg, model))
}

fn resume_state(path: &Path) -> Result<(RunConfig, TrainState)> {
    let (meta, tensors) = checkpoint::load(path)?;
    let (cfg, model) = load_model(path)?;
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.lr_backbone, cfg.weight_decay);
    opt.restore_state(&model.params, &tensors, meta.adamw_step)?;
    let seed = hex_decode(&meta.rng_seed_hex)
        .ok_or_else(|| Error::Checkpoint("bad rng seed hex".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    let pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
    rng.set_word_pos(pos);
    Ok((
        cfg.clone(),
        TrainState {
            model,
            opt,
            rng,
            start_epoch: meta.epoch,
            global_step: meta.global_step,
            lr_scale: meta.lr_current,
        },
    ))
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for i in 0..32 {
        out[i] = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

/// Train on a dataset pair, writing per-epoch metrics CSV plus checkpoints
/// (`checkpoint_last` each epoch, `checkpoint_lrdrop` at the drop,
/// `checkpoint_final` at the end). `resume` continues a previous run
/// exactly where its checkpoint left off.
pub fn train(
    cfg: &RunConfig,
    train_data: &Dataset,
    val_data: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_data.image_size != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px, config expects {}px",
            train_data.image_size, cfg.image_size
        )));
    }
    if train_data.num_classes > cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, config allows {}",
            train_data.num_classes, cfg.num_classes
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let (cfg, mut st) = match resume {
        Some(path) => {
            let (loaded_cfg, st) = resume_state(path)?;
            (loaded_cfg, st)
        }
        None => (cfg.clone(), fresh_state(cfg)?),
    };
    let dn_cfg = cfg.dn_config();
    let cost_cfg = cfg.cost_config();
    let loss_cfg = cfg.loss_config();

    let csv_path = out_dir.join("metrics.csv");
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');

    for epoch in st.start_epoch..cfg.epochs {
        if epoch == cfg.lr_drop_epoch {
            st.lr_scale *= 0.1;
            save_state(&out_dir.join("checkpoint_lrdrop.ckpt"), &cfg, &st, epoch)?;
        }
        // seeded shuffle
        let mut order: Vec<usize> = (0..train_data.images.len()).collect();
        for i in (1..order.len()).rev() {
            let j = st.rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = [0.0f64; 5]; // total, cls, bbox, giou, dn
        let mut steps = 0usize;
        for &idx in &order {
            let img = &train_data.images[idx];
            let (pixels, anns) =
                augment(&img.to_floats(), &img.annotations, cfg.image_size, &mut st.rng);
            let gt_labels: Vec<usize> = anns.iter().map(|a| a.label).collect();
            let gt_boxes: Vec<BoxCxCyWh> = anns.iter().map(|a| a.bbox()).collect();

            let dn_batch = if cfg.cdn_on && !gt_boxes.is_empty() {
                Some(build_dn_batch(
                    &gt_boxes,
                    &gt_labels,
                    &dn_cfg,
                    cfg.num_queries,
                    &mut st.rng,
                ))
            } else {
                None
            };

            let out = st.model.forward(&pixels, dn_batch.as_ref(), true)?;
            let mut layers: Vec<LayerPred> = out.matching.clone();
            if let Some(ep) = &out.encoder_pred {
                layers.push(ep.clone());
            }
            let set = set_loss(&layers, &gt_labels, &gt_boxes, &cost_cfg, &loss_cfg)?;
            let mut total = set.total.clone();
            let mut dn_value = 0.0;
            if let Some(batch) = &dn_batch {
                let dn_out = dn_loss(&out.dn, batch, &gt_labels, &gt_boxes, &loss_cfg)?;
                dn_value = dn_out.total.item();
                total = total.add(&dn_out.total)?;
            }

            let loss_value = total.item();
            if !loss_value.is_finite() {
                let dump_path = out_dir.join("nan_dump.json");
                let dump = serde_json::json!({
                    "epoch": epoch,
                    "image_index": idx,
                    "global_step": st.global_step,
                    "set_loss": set.per_layer,
                    "dn_loss": dn_value,
                });
                std::fs::write(&dump_path, serde_json::to_vec_pretty(&dump).unwrap())?;
                return Err(Error::NonFiniteLoss {
                    epoch,
                    image_index: idx,
                    dump_path: dump_path.display().to_string(),
                });
            }

            total.backward()?;
            let grads = out.ctx.collect_grads();
            st.model.params.zero_grads();
            st.model.params.apply_grads(grads);
            clip_gradients(&mut st.model.params, cfg.clip_max_norm);
            st.opt.step(&mut st.model.params, st.lr_scale);

            sums[0] += loss_value;
            sums[1] += set.components.cls;
            sums[2] += set.components.bbox;
            sums[3] += set.components.giou;
            sums[4] += dn_value;
            steps += 1;
            st.global_step += 1;
        }

        let n = steps.max(1) as f64;
        let (eval, _) = evaluate_model(&st.model, val_data, &cfg)?;
        let row = MetricsRow {
            epoch,
            loss: sums[0] / n,
            loss_cls: sums[1] / n,
            loss_bbox: sums[2] / n,
            loss_giou: sums[3] / n,
            loss_dn: sums[4] / n,
            ap: eval.ap * 100.0,
            ap50: eval.ap50 * 100.0,
            ap75: eval.ap75 * 100.0,
            ap_s: eval.ap_small * 100.0,
            atd100: eval.atd100,
            atd100_small: eval.atd100_small,
            duplicate_rate: eval.duplicate_rate,
        };
        csv.push_str(&row.to_csv_line());
        csv.push('\n');
        std::fs::write(&csv_path, &csv)?;
        rows.push(row);
        save_state(&out_dir.join("checkpoint_last.ckpt"), &cfg, &st, epoch + 1)?;
    }

    let final_checkpoint = out_dir.join("checkpoint_final.ckpt");
    save_state(&final_checkpoint, &cfg, &st, cfg.epochs)?;
    Ok(TrainOutput {
        rows,
        csv_path,
        final_checkpoint,
        model: st.model,
    })
}
