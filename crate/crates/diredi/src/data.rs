//! Datasets: synthetic toy detection data, PASCAL-VOC ingestion, and
//! category-plan splitting (presumed vs. private vs. removed data).

use crate::{Error, Result};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::Path;

/// Axis-aligned box in pixel coordinates, `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

/// Ground-truth boxes and labels for one image. Labels index the owning
/// dataset's `category_names`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    pub difficult: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    /// CHW, RGB, values in [0, 1] on the 1/255 grid.
    pub image: Array3<f32>,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Voc,
    Synthetic,
}

#[derive(Clone)]
pub struct DetectionDataset {
    pub items: Vec<DatasetItem>,
    pub category_names: Vec<String>,
    pub provenance: Provenance,
}

/// Which object categories constitute presumed, private, and removed data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CategoryPlan {
    pub teacher_categories: Vec<String>,
    pub presumed_categories: Vec<String>,
    pub private_categories: Vec<String>,
    pub removed_categories: Vec<String>,
    pub eval_categories: Vec<String>,
}

impl CategoryPlan {
    pub fn validate(&self) -> Result<()> {
        let teacher: BTreeSet<_> = self.teacher_categories.iter().collect();
        let presumed: BTreeSet<_> = self.presumed_categories.iter().collect();
        let private: BTreeSet<_> = self.private_categories.iter().collect();
        let removed: BTreeSet<_> = self.removed_categories.iter().collect();
        if !presumed.is_subset(&teacher) {
            return Err(Error::Config(
                "presumed categories must be a subset of teacher categories".into(),
            ));
        }
        if !private.is_disjoint(&presumed) {
            return Err(Error::Config(
                "private categories must be disjoint from presumed categories".into(),
            ));
        }
        if !removed.is_subset(&presumed) {
            return Err(Error::Config(
                "removed categories must be a subset of presumed categories".into(),
            ));
        }
        Ok(())
    }

    /// Presumed minus removed: what the customer still trains on from the
    /// manufacturer-provided data.
    pub fn retained_presumed(&self) -> Vec<String> {
        self.presumed_categories
            .iter()
            .filter(|c| !self.removed_categories.contains(c))
            .cloned()
            .collect()
    }

    /// Categories present in the customer's actual scenario.
    pub fn customer_categories(&self) -> Vec<String> {
        let mut out = self.retained_presumed();
        for c in &self.private_categories {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }

    /// Class list for the reverse-distillation tutors: the original tutor's
    /// classes extended with the customer's private classes, so weight
    /// deltas stay aligned with the original tutor head.
    pub fn tutor_categories(&self) -> Vec<String> {
        let mut out = self.presumed_categories.clone();
        for c in &self.private_categories {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Presumed minus removed categories (manufacturer-provided data as the
    /// customer uses it).
    Presumed,
    /// (Presumed minus removed) plus private categories.
    CustomerActual,
    /// Manufacturer-retained categories used by the verification gate.
    Verification,
}

/// How to treat images whose excluded-category objects overlap kept objects.
/// Filtering a category's boxes while keeping its pixels creates false
/// background supervision; `StrictDrop` drops such images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterPolicy {
    #[default]
    StrictDrop,
    Keep,
}

const STRICT_DROP_IOU: f64 = 0.3;

impl DetectionDataset {
    /// Order-independent content hash. Two datasets differing in one label,
    /// one pixel, or the category list differ in digest; permuting item
    /// order does not change it.
    pub fn fingerprint(&self) -> String {
        let mut item_hashes: Vec<[u8; 32]> = self
            .items
            .iter()
            .map(|it| {
                let mut h = Sha256::new();
                h.update(it.annotation.image_id.as_bytes());
                for v in it.image.iter() {
                    h.update(v.to_le_bytes());
                }
                for (b, (&l, &d)) in it
                    .annotation
                    .boxes
                    .iter()
                    .zip(it.annotation.labels.iter().zip(it.annotation.difficult.iter()))
                {
                    h.update(b.x1.to_le_bytes());
                    h.update(b.y1.to_le_bytes());
                    h.update(b.x2.to_le_bytes());
                    h.update(b.y2.to_le_bytes());
                    h.update((l as u64).to_le_bytes());
                    h.update([d as u8]);
                }
                h.finalize().into()
            })
            .collect();
        item_hashes.sort_unstable();
        let mut h = Sha256::new();
        for name in &self.category_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        h.update(format!("{:?}", self.provenance).as_bytes());
        for ih in &item_hashes {
            h.update(ih);
        }
        hex::encode(h.finalize())
    }

    pub fn num_boxes(&self) -> usize {
        self.items.iter().map(|it| it.annotation.boxes.len()).sum()
    }

    /// Keep only the named categories. Boxes of other categories are
    /// removed; under `StrictDrop`, images where a removed box overlaps a
    /// kept box above IoU 0.3, and images left with zero boxes, are dropped.
    pub fn filter_categories(&self, keep: &[String], policy: FilterPolicy) -> DetectionDataset {
        let keep_idx: Vec<Option<usize>> = self
            .category_names
            .iter()
            .map(|n| keep.iter().position(|k| k == n))
            .collect();
        let mut items = Vec::new();
        for it in &self.items {
            let ann = &it.annotation;
            let mut boxes = Vec::new();
            let mut labels = Vec::new();
            let mut difficult = Vec::new();
            let mut dropped_boxes: Vec<BBox> = Vec::new();
            for (i, b) in ann.boxes.iter().enumerate() {
                match keep_idx[ann.labels[i]] {
                    Some(new_label) => {
                        boxes.push(*b);
                        labels.push(new_label);
                        difficult.push(ann.difficult[i]);
                    }
                    None => dropped_boxes.push(*b),
                }
            }
            if boxes.is_empty() {
                continue;
            }
            if policy == FilterPolicy::StrictDrop {
                let hazard = dropped_boxes
                    .iter()
                    .any(|db| boxes.iter().any(|kb| db.iou(kb) > STRICT_DROP_IOU));
                if hazard {
                    continue;
                }
            }
            items.push(DatasetItem {
                image: it.image.clone(),
                annotation: Annotation {
                    image_id: ann.image_id.clone(),
                    boxes,
                    labels,
                    difficult,
                },
            });
        }
        DetectionDataset {
            items,
            category_names: keep.to_vec(),
            provenance: self.provenance,
        }
    }

    /// Remap this dataset's labels into a model's category namespace.
    /// Every dataset category must exist in `model_categories`.
    pub fn relabel_for(&self, model_categories: &[String]) -> Result<DetectionDataset> {
        let mapping: Vec<usize> = self
            .category_names
            .iter()
            .map(|n| {
                model_categories
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "dataset category `{n}` is not in the model's class set"
                        ))
                    })
            })
            .collect::<Result<_>>()?;
        let items = self
            .items
            .iter()
            .map(|it| DatasetItem {
                image: it.image.clone(),
                annotation: Annotation {
                    image_id: it.annotation.image_id.clone(),
                    boxes: it.annotation.boxes.clone(),
                    labels: it.annotation.labels.iter().map(|&l| mapping[l]).collect(),
                    difficult: it.annotation.difficult.clone(),
                },
            })
            .collect();
        Ok(DetectionDataset {
            items,
            category_names: model_categories.to_vec(),
            provenance: self.provenance,
        })
    }

    /// Stack a subset of items into an NCHW f64 batch.
    pub fn batch(&self, indices: &[usize]) -> Array4<f64> {
        assert!(!indices.is_empty());
        let (c, h, w) = self.items[indices[0]].image.dim();
        let mut out = Array4::<f64>::zeros((indices.len(), c, h, w));
        for (bi, &idx) in indices.iter().enumerate() {
            let img = &self.items[idx].image;
            out.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&img.mapv(|v| v as f64));
        }
        out
    }
}

/// `mode`-specific category filtering per the plan. See [`SplitMode`].
pub fn split_by_plan(
    dataset: &DetectionDataset,
    plan: &CategoryPlan,
    mode: SplitMode,
    policy: FilterPolicy,
) -> Result<DetectionDataset> {
    plan.validate()?;
    let keep = match mode {
        SplitMode::Presumed => plan.retained_presumed(),
        SplitMode::CustomerActual => plan.customer_categories(),
        SplitMode::Verification => plan.presumed_categories.clone(),
    };
    Ok(dataset.filter_categories(&keep, policy))
}

// ---------------------------------------------------------------------------
// Synthetic toy data
// ---------------------------------------------------------------------------

/// The ten renderable toy classes standing in for real object categories.
pub const TOY_CLASSES: [&str; 10] = [
    "disc", "square", "triangle", "ring", "cross", "star", "bar", "diamond", "crescent",
    "chevron",
];

const TOY_PALETTE: [[f32; 3]; 10] = [
    [0.90, 0.12, 0.12],
    [0.10, 0.80, 0.20],
    [0.15, 0.30, 0.95],
    [0.92, 0.88, 0.10],
    [0.88, 0.15, 0.85],
    [0.10, 0.82, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.20, 0.75],
    [0.95, 0.95, 0.95],
    [0.55, 0.75, 0.30],
];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ToySpec {
    pub num_images: usize,
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_half_size: f64,
    pub max_half_size: f64,
    pub noise: f64,
    pub seed: u64,
    /// Restrict which classes are drawn (names from [`TOY_CLASSES`]). The
    /// dataset still declares the full class list; this only controls scene
    /// content, so manufacturer- and customer-side scenes can differ.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            num_images: 240,
            canvas: 64,
            min_objects: 1,
            max_objects: 3,
            min_half_size: 7.0,
            max_half_size: 14.0,
            noise: 0.02,
            seed: 0,
            classes: None,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 || self.canvas % 32 != 0 {
            return Err(Error::Config(format!(
                "toy canvas {} must be a positive multiple of 32",
                self.canvas
            )));
        }
        if 2.0 * self.max_half_size >= self.canvas as f64 {
            return Err(Error::Config(
                "canvas too small for the requested object size range".into(),
            ));
        }
        if self.min_half_size <= 0.0 || self.min_half_size > self.max_half_size {
            return Err(Error::Config("invalid object size range".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects > max_objects".into()));
        }
        if let Some(classes) = &self.classes {
            if classes.is_empty() {
                return Err(Error::Config("class restriction must not be empty".into()));
            }
            for c in classes {
                if !TOY_CLASSES.contains(&c.as_str()) {
                    return Err(Error::Config(format!("unknown toy class `{c}`")));
                }
            }
        }
        Ok(())
    }
}

fn shape_member(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    match class {
        0 => d <= r,                                  // disc
        1 => dx.abs() <= r * 0.9 && dy.abs() <= r * 0.9, // square
        2 => {
            // upward triangle
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        3 => d <= r && d >= r * 0.55,                 // ring
        4 => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r), // cross
        5 => {
            // five-lobed star
            let theta = dy.atan2(dx);
            let rr = r * (0.45 + 0.55 * (0.5 * ((5.0 * theta).cos() + 1.0)));
            d <= rr
        }
        6 => dy.abs() <= r * 0.28 && dx.abs() <= r,   // bar
        7 => dx.abs() + dy.abs() <= r,                // diamond
        8 => {
            // crescent: disc minus an offset disc
            let d2 = ((dx - 0.55 * r).powi(2) + dy * dy).sqrt();
            d <= r && d2 >= r * 0.75
        }
        9 => {
            // chevron (V shape)
            let spine = dx.abs() - 0.5 * r;
            dx.abs() <= r && (dy - spine).abs() <= r * 0.3
        }
        _ => unreachable!("toy class out of range"),
    }
}

/// Deterministic toy detection dataset: high-contrast colored shapes on a
/// dark noisy background, class-balanced by round-robin assignment, with
/// tight bounding boxes computed from the painted pixels.
pub fn generate_toy_dataset(spec: &ToySpec) -> Result<DetectionDataset> {
    use rand::{Rng, SeedableRng};
    spec.validate()?;
    let n = spec.canvas;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7f4a_7c15_u64);
    let class_pool: Vec<usize> = match &spec.classes {
        Some(names) => names
            .iter()
            .map(|c| TOY_CLASSES.iter().position(|t| t == c).unwrap())
            .collect(),
        None => (0..TOY_CLASSES.len()).collect(),
    };
    let mut class_cursor = 0usize;
    let mut items = Vec::with_capacity(spec.num_images);

    for img_idx in 0..spec.num_images {
        let mut image = Array3::<f32>::from_elem((3, n, n), 0.05);
        let mut boxes: Vec<BBox> = Vec::new();
        let mut labels = Vec::new();
        let num_objects = rng.gen_range(spec.min_objects..=spec.max_objects);

        for _ in 0..num_objects {
            let class = class_pool[class_cursor % class_pool.len()];
            let mut placed = false;
            for _try in 0..30 {
                let r = rng.gen_range(spec.min_half_size..=spec.max_half_size);
                let cx = rng.gen_range(r + 1.0..(n as f64 - r - 1.0));
                let cy = rng.gen_range(r + 1.0..(n as f64 - r - 1.0));
                let rough = BBox::new(cx - r, cy - r, cx + r, cy + r);
                if boxes.iter().any(|b| b.iou(&rough) > 0.05) {
                    continue;
                }
                // paint and track the tight extent
                let color = TOY_PALETTE[class];
                let (mut x_min, mut y_min) = (f64::INFINITY, f64::INFINITY);
                let (mut x_max, mut y_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                let lo_y = (cy - r).floor().max(0.0) as usize;
                let hi_y = ((cy + r).ceil() as usize).min(n - 1);
                let lo_x = (cx - r).floor().max(0.0) as usize;
                let hi_x = ((cx + r).ceil() as usize).min(n - 1);
                for py in lo_y..=hi_y {
                    for px in lo_x..=hi_x {
                        let dx = px as f64 + 0.5 - cx;
                        let dy = py as f64 + 0.5 - cy;
                        if shape_member(class, dx, dy, r) {
                            for ch in 0..3 {
                                image[[ch, py, px]] = color[ch];
                            }
                            x_min = x_min.min(px as f64);
                            y_min = y_min.min(py as f64);
                            x_max = x_max.max(px as f64 + 1.0);
                            y_max = y_max.max(py as f64 + 1.0);
                        }
                    }
                }
                if x_min.is_finite() {
                    boxes.push(BBox::new(x_min, y_min, x_max, y_max));
                    labels.push(class);
                    placed = true;
                }
                break;
            }
            if placed {
                class_cursor += 1;
            }
        }

        if spec.noise > 0.0 {
            for v in image.iter_mut() {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                *v = (*v as f64 + z * spec.noise).clamp(0.0, 1.0) as f32;
            }
        }
        // quantize to the u8 grid so PNG persistence is lossless
        image.mapv_inplace(|v| (v * 255.0).round() / 255.0);

        let difficult = vec![false; boxes.len()];
        items.push(DatasetItem {
            image,
            annotation: Annotation {
                image_id: format!("toy-{:06}", img_idx),
                boxes,
                labels,
                difficult,
            },
        });
    }

    Ok(DetectionDataset {
        items,
        category_names: TOY_CLASSES.iter().map(|s| s.to_string()).collect(),
        provenance: Provenance::Synthetic,
    })
}

// ---------------------------------------------------------------------------
// Persistence (image directory + one annotation file)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PersistedItem {
    image_id: String,
    file: String,
    boxes: Vec<BBox>,
    labels: Vec<usize>,
    difficult: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct PersistedDataset {
    format_version: u32,
    category_names: Vec<String>,
    provenance: Provenance,
    items: Vec<PersistedItem>,
}

pub fn save_dataset(dataset: &DetectionDataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut persisted = Vec::new();
    for it in &dataset.items {
        let (c, h, w) = it.image.dim();
        assert_eq!(c, 3);
        let mut buf = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    buf[(y * w + x) * 3 + ch] =
                        (it.image[[ch, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        let file = format!("{}.png", it.annotation.image_id);
        let path = images_dir.join(&file);
        image::save_buffer(
            &path,
            &buf,
            w as u32,
            h as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))?;
        persisted.push(PersistedItem {
            image_id: it.annotation.image_id.clone(),
            file,
            boxes: it.annotation.boxes.clone(),
            labels: it.annotation.labels.clone(),
            difficult: it.annotation.difficult.clone(),
        });
    }
    let meta = PersistedDataset {
        format_version: 1,
        category_names: dataset.category_names.clone(),
        provenance: dataset.provenance,
        items: persisted,
    };
    let path = dir.join("annotations.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<DetectionDataset> {
    let ann_path = dir.join("annotations.json");
    let bytes = std::fs::read(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let meta: PersistedDataset = serde_json::from_slice(&bytes)?;
    let mut items = Vec::with_capacity(meta.items.len());
    for pi in meta.items {
        let path = dir.join("images").join(&pi.file);
        let img = image::open(&path)
            .map_err(|e| Error::Format(format!("image read {}: {e}", path.display())))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        let mut arr = Array3::<f32>::zeros((3, h as usize, w as usize));
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x, y);
                for ch in 0..3 {
                    arr[[ch, y as usize, x as usize]] = p.0[ch] as f32 / 255.0;
                }
            }
        }
        items.push(DatasetItem {
            image: arr,
            annotation: Annotation {
                image_id: pi.image_id,
                boxes: pi.boxes,
                labels: pi.labels,
                difficult: pi.difficult,
            },
        });
    }
    Ok(DetectionDataset {
        items,
        category_names: meta.category_names,
        provenance: meta.provenance,
    })
}

// ---------------------------------------------------------------------------
// PASCAL VOC ingestion
// ---------------------------------------------------------------------------

/// Load VOC-layout data (`VOC<year>/JPEGImages`, `Annotations`,
/// `ImageSets/Main/<split>.txt`). Images are letterbox-free resized to
/// `target_size` with box coordinates rescaled. Images with no box of a
/// plan category are skipped; out-of-plan boxes are removed under the
/// strict-drop policy.
pub fn load_voc(
    root: &Path,
    years: &[&str],
    split: &str,
    plan_categories: &[String],
    target_size: usize,
) -> Result<DetectionDataset> {
    let mut missing = Vec::new();
    let mut items = Vec::new();
    let full: Vec<String> = plan_categories.to_vec();
    for year in years {
        let base = root.join(format!("VOC{year}"));
        let list = base.join("ImageSets/Main").join(format!("{split}.txt"));
        let ids = std::fs::read_to_string(&list).map_err(|e| Error::io(&list, e))?;
        for id in ids.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let ann_path = base.join("Annotations").join(format!("{id}.xml"));
            if !ann_path.exists() {
                missing.push(ann_path.display().to_string());
                continue;
            }
            let xml = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
            let (boxes, names, difficult, w0, h0) = parse_voc_xml(&xml, &ann_path)?;
            let mut kept_boxes = Vec::new();
            let mut kept_labels = Vec::new();
            let mut kept_difficult = Vec::new();
            for ((b, name), d) in boxes.iter().zip(&names).zip(&difficult) {
                if let Some(li) = full.iter().position(|c| c == name) {
                    kept_boxes.push(*b);
                    kept_labels.push(li);
                    kept_difficult.push(*d);
                }
            }
            if kept_boxes.is_empty() {
                continue;
            }
            let img_path = base.join("JPEGImages").join(format!("{id}.jpg"));
            if !img_path.exists() {
                missing.push(img_path.display().to_string());
                continue;
            }
            let img = image::open(&img_path)
                .map_err(|e| Error::Format(format!("jpeg read {}: {e}", img_path.display())))?
                .resize_exact(
                    target_size as u32,
                    target_size as u32,
                    image::imageops::FilterType::Triangle,
                )
                .into_rgb8();
            let sx = target_size as f64 / w0;
            let sy = target_size as f64 / h0;
            let mut arr = Array3::<f32>::zeros((3, target_size, target_size));
            for y in 0..target_size {
                for x in 0..target_size {
                    let p = img.get_pixel(x as u32, y as u32);
                    for ch in 0..3 {
                        arr[[ch, y, x]] = p.0[ch] as f32 / 255.0;
                    }
                }
            }
            let boxes: Vec<BBox> = kept_boxes
                .iter()
                .map(|b| {
                    BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy)
                        .clip(target_size as f64, target_size as f64)
                })
                .collect();
            items.push(DatasetItem {
                image: arr,
                annotation: Annotation {
                    image_id: format!("{year}-{id}"),
                    boxes,
                    labels: kept_labels,
                    difficult: kept_difficult,
                },
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing VOC files: {}",
            missing.join(", ")
        )));
    }
    Ok(DetectionDataset {
        items,
        category_names: plan_categories.to_vec(),
        provenance: Provenance::Voc,
    })
}

type VocObjects = (Vec<BBox>, Vec<String>, Vec<bool>, f64, f64);

fn parse_voc_xml(xml: &str, path: &Path) -> Result<VocObjects> {
    let doc = roxmltree::Document::parse(xml)
        .map_err(|e| Error::Format(format!("xml parse {}: {e}", path.display())))?;
    let root = doc.root_element();
    let size = root
        .children()
        .find(|n| n.has_tag_name("size"))
        .ok_or_else(|| Error::Format(format!("{}: no <size>", path.display())))?;
    let get_num = |node: roxmltree::Node, tag: &str| -> Result<f64> {
        node.children()
            .find(|n| n.has_tag_name(tag))
            .and_then(|n| n.text())
            .and_then(|t| t.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Format(format!("{}: bad <{tag}>", path.display())))
    };
    let w = get_num(size, "width")?;
    let h = get_num(size, "height")?;
    let mut boxes = Vec::new();
    let mut names = Vec::new();
    let mut difficult = Vec::new();
    for obj in root.children().filter(|n| n.has_tag_name("object")) {
        let name = obj
            .children()
            .find(|n| n.has_tag_name("name"))
            .and_then(|n| n.text())
            .ok_or_else(|| Error::Format(format!("{}: object without name", path.display())))?
            .trim()
            .to_string();
        let diff = obj
            .children()
            .find(|n| n.has_tag_name("difficult"))
            .and_then(|n| n.text())
            .map(|t| t.trim() == "1")
            .unwrap_or(false);
        let bnd = obj
            .children()
            .find(|n| n.has_tag_name("bndbox"))
            .ok_or_else(|| Error::Format(format!("{}: object without bndbox", path.display())))?;
        boxes.push(BBox::new(
            get_num(bnd, "xmin")?,
            get_num(bnd, "ymin")?,
            get_num(bnd, "xmax")?,
            get_num(bnd, "ymax")?,
        ));
        names.push(name);
        difficult.push(diff);
    }
    Ok((boxes, names, difficult, w, h))
}

// ---------------------------------------------------------------------------

/// Built-in category plan mirroring the learn-a-new-category experiment:
/// five presumed classes, one private class, nothing removed.
pub fn toy_plan_experiment1() -> CategoryPlan {
    let teacher: Vec<String> = TOY_CLASSES.iter().map(|s| s.to_string()).collect();
    let presumed: Vec<String> = ["disc", "square", "triangle", "ring", "cross"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let private = vec!["star".to_string()];
    let mut eval = presumed.clone();
    eval.extend(private.clone());
    CategoryPlan {
        teacher_categories: teacher,
        presumed_categories: presumed,
        private_categories: private,
        removed_categories: vec![],
        eval_categories: eval,
    }
}

/// Built-in plan mirroring the forget-a-category experiment: one presumed
/// class removed from the customer's scenario, one private class added.
pub fn toy_plan_experiment2() -> CategoryPlan {
    let teacher: Vec<String> = TOY_CLASSES.iter().map(|s| s.to_string()).collect();
    let presumed: Vec<String> = ["disc", "square", "triangle", "ring", "cross"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let private = vec!["star".to_string()];
    let removed = vec!["ring".to_string()];
    let mut eval = presumed.clone();
    eval.extend(private.clone());
    CategoryPlan {
        teacher_categories: teacher,
        presumed_categories: presumed,
        private_categories: private,
        removed_categories: removed,
        eval_categories: eval,
    }
}
