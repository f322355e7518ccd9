//! Datasets: seeded synthetic shape scenes, a binary on-disk container,
//! COCO-format ingestion, and train-time augmentation.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxCxCyWh;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Annotation {
    pub label: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Annotation {
    pub fn bbox(&self) -> BoxCxCyWh {
        BoxCxCyWh::new(self.cx, self.cy, self.w, self.h)
    }

    pub fn from_box(label: usize, b: BoxCxCyWh) -> Self {
        Annotation {
            label,
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

/// One image: 8-bit RGB pixels plus its objects.
#[derive(Debug, Clone)]
pub struct DatasetImage {
    pub pixels: Vec<u8>,
    pub annotations: Vec<Annotation>,
}

impl DatasetImage {
    /// Model input: row-major [H, W, 3] floats in [0, 1].
    pub fn to_floats(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    pub fn boxes(&self) -> Vec<(usize, BoxCxCyWh)> {
        self.annotations
            .iter()
            .map(|a| (a.label, a.bbox()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub image_size: usize,
    pub num_classes: usize,
    pub images: Vec<DatasetImage>,
}

/// Synthetic scene generation settings.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            num_classes: 2,
            train_images: 500,
            val_images: 100,
            seed: 0,
            min_objects: 1,
            max_objects: 8,
        }
    }
}

/// A shape committed to a scene before rasterization.
#[derive(Debug, Clone, Copy)]
pub struct PlacedObject {
    pub label: usize,
    pub bbox: BoxCxCyWh,
    pub color: [f64; 3],
}

/// Class color anchors; instances jitter around them.
const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.4, 0.85],
    [0.2, 0.8, 0.3],
    [0.9, 0.8, 0.2],
];

/// Rasterize objects over a background. Every shape pixel falls inside its
/// annotation box by construction: the circle is inscribed, the rectangle
/// fills the box, the triangle's vertices are box corners/edge midpoint.
pub fn render(size: usize, background: &[f64], objects: &[PlacedObject]) -> Vec<f64> {
    assert_eq!(background.len(), size * size * 3);
    let mut img = background.to_vec();
    let sf = size as f64;
    for obj in objects {
        let b = obj.bbox.to_xyxy();
        let (x0, y0) = ((b.x0 * sf).ceil() as i64, (b.y0 * sf).ceil() as i64);
        let (x1, y1) = ((b.x1 * sf).floor() as i64, (b.y1 * sf).floor() as i64);
        let inside = |px: f64, py: f64| -> bool {
            // px, py are pixel centers in normalized coordinates
            let (cx, cy) = (obj.bbox.cx, obj.bbox.cy);
            let (hw, hh) = (obj.bbox.w / 2.0, obj.bbox.h / 2.0);
            match obj.label % 4 {
                0 => {
                    let dx = (px - cx) / hw;
                    let dy = (py - cy) / hh;
                    dx * dx + dy * dy <= 1.0
                }
                1 => true, // filled rectangle: the whole box
                2 => {
                    // triangle: apex top-center, base bottom edge
                    let u = (py - (cy - hh)) / (2.0 * hh);
                    let span = u.clamp(0.0, 1.0) * hw;
                    px >= cx - span && px <= cx + span
                }
                _ => {
                    // ring: between 60% and 100% of the inscribed ellipse
                    let dx = (px - cx) / hw;
                    let dy = (py - cy) / hh;
                    let r2 = dx * dx + dy * dy;
                    (0.36..=1.0).contains(&r2)
                }
            }
        };
        for y in y0.max(0)..y1.min(size as i64) {
            for x in x0.max(0)..x1.min(size as i64) {
                let px = (x as f64 + 0.5) / sf;
                let py = (y as f64 + 0.5) / sf;
                if inside(px, py) {
                    let at = ((y as usize) * size + x as usize) * 3;
                    img[at..at + 3].copy_from_slice(&obj.color);
                }
            }
        }
    }
    img
}

fn quantize(img: &[f64]) -> Vec<u8> {
    img.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Noise background with a mild tint.
pub fn gen_background(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tint: [f64; 3] = [
        rng.gen_range(0.4..0.6),
        rng.gen_range(0.4..0.6),
        rng.gen_range(0.4..0.6),
    ];
    let mut out = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        let n = rng.gen_range(-0.08..0.08);
        for t in tint {
            out.push((t + n).clamp(0.0, 1.0));
        }
    }
    out
}

/// Place 1..=max objects with mixed size buckets (small objects are always
/// possible) and limited mutual overlap.
pub fn gen_objects(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<PlacedObject> {
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(count);
    let min_px = 3.0 / cfg.image_size as f64;
    for _ in 0..count {
        for _attempt in 0..12 {
            let side = match rng.gen_range(0..100) {
                0..=29 => rng.gen_range(min_px..0.08),   // small
                30..=74 => rng.gen_range(0.1..0.25),     // medium
                _ => rng.gen_range(0.28..0.45),          // large
            };
            let aspect = rng.gen_range(0.7..1.4);
            let w = (side * aspect).clamp(min_px, 0.5);
            let h = (side / aspect).clamp(min_px, 0.5);
            let cx = rng.gen_range(w / 2.0 + 0.01..1.0 - w / 2.0 - 0.01);
            let cy = rng.gen_range(h / 2.0 + 0.01..1.0 - h / 2.0 - 0.01);
            let bbox = BoxCxCyWh::new(cx, cy, w, h);
            let overlaps = objects.iter().any(|o| {
                crate::boxes::iou(o.bbox.to_xyxy(), bbox.to_xyxy()) > 0.25
            });
            if overlaps {
                continue;
            }
            let label = rng.gen_range(0..cfg.num_classes);
            let base = CLASS_COLORS[label % 4];
            let color = [
                (base[0] + rng.gen_range(-0.1..0.1)).clamp(0.05, 0.95),
                (base[1] + rng.gen_range(-0.1..0.1)).clamp(0.05, 0.95),
                (base[2] + rng.gen_range(-0.1..0.1)).clamp(0.05, 0.95),
            ];
            objects.push(PlacedObject { label, bbox, color });
            break;
        }
    }
    objects
}

fn gen_split(cfg: &GenConfig, count: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let images = (0..count)
        .map(|_| {
            let background = gen_background(cfg.image_size, rng);
            let objects = gen_objects(cfg, rng);
            let pixels = quantize(&render(cfg.image_size, &background, &objects));
            let annotations = objects
                .iter()
                .map(|o| Annotation::from_box(o.label, o.bbox))
                .collect();
            DatasetImage {
                pixels,
                annotations,
            }
        })
        .collect();
    Dataset {
        image_size: cfg.image_size,
        num_classes: cfg.num_classes,
        images,
    }
}

/// Seeded synthetic dataset: colored geometric shapes on noise backgrounds.
pub fn gen_synthetic(cfg: &GenConfig) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = gen_split(cfg, cfg.train_images, &mut rng);
    let val = gen_split(cfg, cfg.val_images, &mut rng);
    (train, val)
}

// ---- on-disk container ----

#[derive(Serialize, Deserialize)]
struct MetaImage {
    annotations: Vec<Annotation>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    image_size: usize,
    num_classes: usize,
    splits: BTreeMap<String, Vec<MetaImage>>,
}

pub fn save_dataset(dir: &Path, train: &Dataset, val: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut splits = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, ds) in [("train", train), ("val", val)] {
        let metas: Vec<MetaImage> = ds
            .images
            .iter()
            .map(|img| {
                payload.extend_from_slice(&img.pixels);
                MetaImage {
                    annotations: img.annotations.clone(),
                }
            })
            .collect();
        splits.insert(name.to_string(), metas);
    }
    let meta = Meta {
        image_size: train.image_size,
        num_classes: train.num_classes,
        splits,
    };
    let json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| Error::Data(format!("meta encode: {e}")))?;
    std::fs::write(dir.join("meta.json"), json)?;
    let mut f = std::fs::File::create(dir.join("images.bin"))?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Dataset)> {
    let meta_raw = std::fs::read(dir.join("meta.json"))?;
    let meta: Meta = serde_json::from_slice(&meta_raw)
        .map_err(|e| Error::Data(format!("meta decode: {e}")))?;
    let mut payload = Vec::new();
    std::fs::File::open(dir.join("images.bin"))?.read_to_end(&mut payload)?;
    let stride = meta.image_size * meta.image_size * 3;
    let mut offset = 0usize;
    let mut take = |metas: &[MetaImage]| -> Result<Dataset> {
        let mut images = Vec::with_capacity(metas.len());
        for m in metas {
            if offset + stride > payload.len() {
                return Err(Error::Data("images.bin shorter than meta.json implies".into()));
            }
            images.push(DatasetImage {
                pixels: payload[offset..offset + stride].to_vec(),
                annotations: m.annotations.clone(),
            });
            offset += stride;
        }
        Ok(Dataset {
            image_size: meta.image_size,
            num_classes: meta.num_classes,
            images,
        })
    };
    let train = take(meta.splits.get("train").map_or(&[][..], |v| v))?;
    let val = take(meta.splits.get("val").map_or(&[][..], |v| v))?;
    Ok((train, val))
}

// ---- COCO-format ingestion ----

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Detection result record in the interchange JSON format
/// (absolute-pixel [x, y, width, height] boxes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoResultRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Convert an absolute [x, y, w, h] box to normalized center form.
pub fn coco_box_to_cxcywh(bbox: [f64; 4], width: f64, height: f64) -> BoxCxCyWh {
    BoxCxCyWh::new(
        (bbox[0] + bbox[2] / 2.0) / width,
        (bbox[1] + bbox[3] / 2.0) / height,
        bbox[2] / width,
        bbox[3] / height,
    )
}

fn json_byte_offset(raw: &[u8], line: usize, column: usize) -> usize {
    let mut l = 1usize;
    let mut offset = 0usize;
    for (i, &b) in raw.iter().enumerate() {
        if l == line {
            return i + column.saturating_sub(1);
        }
        if b == b'\n' {
            l += 1;
            offset = i + 1;
        }
    }
    offset
}

/// Load a COCO-schema annotation file and its images, rescaled to the
/// square model resolution. The first `limit` images by ascending id are
/// taken; crowd annotations are skipped; missing image files are skipped
/// with a warning.
pub fn load_coco_json(
    annotation_file: &Path,
    image_dir: &Path,
    limit: usize,
    image_size: usize,
) -> Result<Dataset> {
    let raw = std::fs::read(annotation_file)?;
    let coco: CocoFile = serde_json::from_slice(&raw).map_err(|e| Error::JsonParse {
        offset: json_byte_offset(&raw, e.line(), e.column()),
        msg: e.to_string(),
    })?;

    let mut cat_ids: Vec<u64> = coco.categories.iter().map(|c| c.id).collect();
    cat_ids.sort_unstable();
    cat_ids.dedup();
    let cat_index: BTreeMap<u64, usize> =
        cat_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let mut images: Vec<&CocoImage> = coco.images.iter().collect();
    images.sort_by_key(|i| i.id);
    images.truncate(limit);

    let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for a in &coco.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }

    let mut out = Vec::with_capacity(images.len());
    for info in images {
        let path = image_dir.join(&info.file_name);
        let img = match image::open(&path) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let resized = image::imageops::resize(
            &img.to_rgb8(),
            image_size as u32,
            image_size as u32,
            image::imageops::FilterType::Triangle,
        );
        let annotations = by_image
            .get(&info.id)
            .map(|anns| {
                anns.iter()
                    .filter(|a| a.iscrowd == 0 && a.bbox[2] > 0.0 && a.bbox[3] > 0.0)
                    .filter_map(|a| {
                        let b = coco_box_to_cxcywh(a.bbox, info.width, info.height)
                            .clamp_valid(1e-3);
                        cat_index
                            .get(&a.category_id)
                            .map(|&label| Annotation::from_box(label, b))
                    })
                    .collect()
            })
            .unwrap_or_default();
        out.push(DatasetImage {
            pixels: resized.into_raw(),
            annotations,
        });
    }
    Ok(Dataset {
        image_size,
        num_classes: cat_index.len().max(1),
        images: out,
    })
}

// ---- train-time augmentation ----

/// Horizontal flip plus scale jitter about the image center
/// (nearest-neighbor resampling). Boxes transform exactly; objects scaled
/// out of frame or collapsed below ~1.5 px are dropped.
pub fn augment(
    image: &[f64],
    annotations: &[Annotation],
    size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<Annotation>) {
    let flip = rng.gen_bool(0.5);
    let scale: f64 = rng.gen_range(0.8..1.25);

    let c = (size as f64 - 1.0) / 2.0;
    let mut out = vec![0.5; image.len()];
    for y in 0..size {
        for x in 0..size {
            let sx = (x as f64 - c) / scale + c;
            let sy = (y as f64 - c) / scale + c;
            let sx = sx.round() as i64;
            let sy = sy.round() as i64;
            if sx < 0 || sy < 0 || sx >= size as i64 || sy >= size as i64 {
                continue; // zoomed-out border keeps the neutral fill
            }
            let src_x = if flip { size - 1 - sx as usize } else { sx as usize };
            let dst = (y * size + x) * 3;
            let src = ((sy as usize) * size + src_x) * 3;
            out[dst..dst + 3].copy_from_slice(&image[src..src + 3]);
        }
    }

    let min_side = 1.5 / size as f64;
    let anns = annotations
        .iter()
        .filter_map(|a| {
            let cx = if flip { 1.0 - a.cx } else { a.cx };
            let b = BoxCxCyWh::new(
                0.5 + (cx - 0.5) * scale,
                0.5 + (a.cy - 0.5) * scale,
                a.w * scale,
                a.h * scale,
            );
            // clip to the frame
            let xy = b.to_xyxy();
            let clipped = crate::boxes::BoxXyXy::new(
                xy.x0.max(0.001),
                xy.y0.max(0.001),
                xy.x1.min(0.999),
                xy.y1.min(0.999),
            );
            let cb = clipped.to_cxcywh();
            if cb.w < min_side || cb.h < min_side {
                None
            } else {
                Some(Annotation::from_box(a.label, cb))
            }
        })
        .collect();
    (out, anns)
}
