//! Anchor-free single-stage detector in configurable size tiers: a strided
//! convolutional backbone, a three-level feature-pyramid neck, and a shared
//! per-pixel head predicting class logits, centerness, and box distances.

mod assign;
mod checkpoint;
mod infer;
mod loss;

pub use assign::{assign_targets, LevelTargets, TargetMaps, BACKGROUND};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use infer::{infer, Detection, Detections};
pub use loss::{detection_loss, DetectionLossParts};

use crate::autograd::Tensor;
use crate::nn::{BatchNorm2d, Conv2d, Mode, ParamStore};
use crate::{Error, Result};
use ndarray::Array4;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Large,
    Tutor,
    Edge,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub tier: Tier,
    pub num_classes: usize,
    /// Output channels of each backbone stage; stage `i` runs at stride
    /// `2^(i+1)`.
    pub backbone_channel_plan: Vec<usize>,
    pub neck_channels: usize,
    pub strides: Vec<usize>,
    pub head_conv_depth: usize,
    /// Boundaries between per-level object scale ranges (in stride-8 pixel
    /// units of max regression distance); length = strides.len() - 1.
    pub scale_thresholds: Vec<f64>,
}

impl DetectorConfig {
    /// Desk-scale presets; the tiers keep the large > tutor > edge capacity
    /// ordering at sizes that train on a CPU in minutes.
    pub fn preset(tier: Tier, num_classes: usize) -> Self {
        let (plan, neck, depth) = match tier {
            Tier::Large => (vec![24, 48, 64, 96, 128], 64, 2),
            Tier::Tutor => (vec![16, 32, 48, 64, 96], 48, 2),
            Tier::Edge => (vec![8, 16, 24, 32, 48], 32, 1),
            Tier::Toy => (vec![4, 8, 8, 12, 16], 8, 1),
        };
        DetectorConfig {
            tier,
            num_classes,
            backbone_channel_plan: plan,
            neck_channels: neck,
            strides: vec![8, 16, 32],
            head_conv_depth: depth,
            scale_thresholds: vec![20.0, 40.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.backbone_channel_plan.iter().any(|&c| c == 0) || self.neck_channels == 0 {
            return Err(Error::Config("channel plan entries must be positive".into()));
        }
        if self.head_conv_depth == 0 {
            return Err(Error::Config("head_conv_depth must be >= 1".into()));
        }
        if self.strides.is_empty() || self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("strides must be strictly increasing".into()));
        }
        for &s in &self.strides {
            if !s.is_power_of_two() {
                return Err(Error::Config(format!("stride {s} must be a power of two")));
            }
        }
        let max_stride = *self.strides.last().unwrap();
        if 1usize << self.backbone_channel_plan.len() != max_stride {
            return Err(Error::Config(format!(
                "backbone plan length {} does not reach max stride {}",
                self.backbone_channel_plan.len(),
                max_stride
            )));
        }
        if self.strides.len() > self.backbone_channel_plan.len() {
            return Err(Error::Config("more pyramid levels than backbone stages".into()));
        }
        if self.scale_thresholds.len() + 1 != self.strides.len() {
            return Err(Error::Config(
                "scale_thresholds must have strides.len() - 1 entries".into(),
            ));
        }
        if self.scale_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("scale_thresholds must be increasing".into()));
        }
        Ok(())
    }

    /// Half-open (lo, hi] max-regression-distance range per pyramid level.
    pub fn scale_ranges(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.strides.len());
        let mut lo = 0.0;
        for &hi in &self.scale_thresholds {
            out.push((lo, hi));
            lo = hi;
        }
        out.push((lo, f64::INFINITY));
        out
    }
}

/// One pyramid level: common neck channel count at the given stride.
pub struct FeaturePyramid {
    /// (stride, features [N, C, H, W]) from the finest level up.
    pub levels: Vec<(usize, Tensor)>,
}

pub struct HeadLevel {
    pub stride: usize,
    /// [N, num_classes, H, W]
    pub class_logits: Tensor,
    /// [N, 1, H, W]
    pub centerness_logits: Tensor,
    /// [N, 4, H, W]; exp of these are left/top/right/bottom distances in
    /// stride-normalized units.
    pub box_regression: Tensor,
}

pub struct HeadOutputs {
    pub levels: Vec<HeadLevel>,
}

struct Stage {
    down: Conv2d,
    down_bn: BatchNorm2d,
    refine: Option<(Conv2d, BatchNorm2d)>,
}

struct Head {
    cls_tower: Vec<Conv2d>,
    reg_tower: Vec<Conv2d>,
    cls_pred: Conv2d,
    ctr_pred: Conv2d,
    reg_pred: Conv2d,
}

pub struct Detector {
    pub config: DetectorConfig,
    pub categories: Vec<String>,
    pub seed: u64,
    pub store: ParamStore,
    stages: Vec<Stage>,
    laterals: Vec<Conv2d>,
    smooths: Vec<Conv2d>,
    head: Head,
}

/// Classification bias prior so that untrained logits sit near probability
/// 0.01, keeping early focal loss stable. New class rows introduced by head
/// reshaping use the same constant.
pub const CLS_BIAS_PRIOR: f64 = -4.595119850134589; // -ln((1-0.01)/0.01) as f64

/// Deterministic construction: same (config, categories, seed) twice gives
/// parameter-wise identical detectors.
pub fn build_detector(
    config: &DetectorConfig,
    categories: &[String],
    seed: u64,
) -> Result<Detector> {
    config.validate()?;
    if categories.len() != config.num_classes {
        return Err(Error::Config(format!(
            "{} categories for num_classes {}",
            categories.len(),
            config.num_classes
        )));
    }
    let mut store = ParamStore::new();
    let plan = &config.backbone_channel_plan;
    let num_stages = plan.len();
    let num_levels = config.strides.len();
    let refine_from = num_stages - num_levels;

    let mut stages = Vec::with_capacity(num_stages);
    let mut in_ch = 3;
    for (i, &out_ch) in plan.iter().enumerate() {
        let name = format!("backbone.stage{i}");
        let down = Conv2d::new(
            &mut store,
            &format!("{name}.down"),
            in_ch,
            out_ch,
            3,
            2,
            1,
            false,
            seed,
        );
        let down_bn = BatchNorm2d::new(&mut store, &format!("{name}.bn"), out_ch);
        let refine = (i >= refine_from).then(|| {
            let c = Conv2d::new(
                &mut store,
                &format!("{name}.refine"),
                out_ch,
                out_ch,
                3,
                1,
                1,
                false,
                seed,
            );
            let bn = BatchNorm2d::new(&mut store, &format!("{name}.refine_bn"), out_ch);
            (c, bn)
        });
        stages.push(Stage { down, down_bn, refine });
        in_ch = out_ch;
    }

    let nc = config.neck_channels;
    let mut laterals = Vec::with_capacity(num_levels);
    let mut smooths = Vec::with_capacity(num_levels);
    for l in 0..num_levels {
        let stage_ch = plan[refine_from + l];
        laterals.push(Conv2d::new(
            &mut store,
            &format!("neck.lateral{l}"),
            stage_ch,
            nc,
            1,
            1,
            0,
            true,
            seed,
        ));
        smooths.push(Conv2d::new(
            &mut store,
            &format!("neck.smooth{l}"),
            nc,
            nc,
            3,
            1,
            1,
            true,
            seed,
        ));
    }

    let mut cls_tower = Vec::new();
    let mut reg_tower = Vec::new();
    for d in 0..config.head_conv_depth {
        cls_tower.push(Conv2d::new(
            &mut store,
            &format!("head.cls_tower{d}"),
            nc,
            nc,
            3,
            1,
            1,
            true,
            seed,
        ));
        reg_tower.push(Conv2d::new(
            &mut store,
            &format!("head.reg_tower{d}"),
            nc,
            nc,
            3,
            1,
            1,
            true,
            seed,
        ));
    }
    let cls_pred = Conv2d::new(
        &mut store,
        "head.cls_pred",
        nc,
        config.num_classes,
        3,
        1,
        1,
        true,
        seed,
    );
    store.set_value(
        "head.cls_pred.bias",
        ndarray::ArrayD::from_elem(ndarray::IxDyn(&[config.num_classes]), CLS_BIAS_PRIOR),
    )?;
    let ctr_pred = Conv2d::new(&mut store, "head.ctr_pred", nc, 1, 3, 1, 1, true, seed);
    let reg_pred = Conv2d::new(&mut store, "head.reg_pred", nc, 4, 3, 1, 1, true, seed);

    store.quantize_f32();
    Ok(Detector {
        config: config.clone(),
        categories: categories.to_vec(),
        seed,
        store,
        stages,
        laterals,
        smooths,
        head: Head {
            cls_tower,
            reg_tower,
            cls_pred,
            ctr_pred,
            reg_pred,
        },
    })
}

impl Detector {
    pub fn forward(&self, images: &Array4<f64>, mode: Mode) -> Result<(FeaturePyramid, HeadOutputs)> {
        let (_, c, h, w) = images.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        let max_stride = *self.config.strides.last().unwrap();
        if h == 0 || w == 0 || h % max_stride != 0 || w % max_stride != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be a positive multiple of stride {max_stride}"
            )));
        }

        let num_levels = self.config.strides.len();
        let refine_from = self.stages.len() - num_levels;
        let mut x = Tensor::constant(images.clone().into_dyn());
        let mut taps: Vec<Tensor> = Vec::with_capacity(num_levels);
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.down_bn.forward(&stage.down.forward(&x), mode).relu();
            if let Some((conv, bn)) = &stage.refine {
                x = bn.forward(&conv.forward(&x), mode).relu();
            }
            if i >= refine_from {
                taps.push(x.clone());
            }
        }

        // top-down fusion: coarsest lateral first, upsample and add
        let mut fused: Vec<Option<Tensor>> = vec![None; num_levels];
        let mut prev: Option<Tensor> = None;
        for l in (0..num_levels).rev() {
            let mut p = self.laterals[l].forward(&taps[l]);
            if let Some(up) = &prev {
                p = p.add(&up.upsample_nearest_2x());
            }
            prev = Some(p.clone());
            fused[l] = Some(p);
        }
        let mut levels = Vec::with_capacity(num_levels);
        let mut head_levels = Vec::with_capacity(num_levels);
        for l in 0..num_levels {
            let p = self.smooths[l].forward(fused[l].as_ref().unwrap());
            let stride = self.config.strides[l];

            let mut ct = p.clone();
            for conv in &self.head.cls_tower {
                ct = conv.forward(&ct).relu();
            }
            let mut rt = p.clone();
            for conv in &self.head.reg_tower {
                rt = conv.forward(&rt).relu();
            }
            head_levels.push(HeadLevel {
                stride,
                class_logits: self.head.cls_pred.forward(&ct),
                centerness_logits: self.head.ctr_pred.forward(&rt),
                box_regression: self.head.reg_pred.forward(&rt),
            });
            levels.push((stride, p));
        }
        Ok((FeaturePyramid { levels }, HeadOutputs { levels: head_levels }))
    }

    /// Trainable parameter names grouped by namespace prefix.
    pub fn namespace_partition(&self) -> (Vec<String>, Vec<String>, Vec<String>) {
        let mut backbone = Vec::new();
        let mut neck = Vec::new();
        let mut head = Vec::new();
        for name in self.store.names() {
            if name.starts_with("backbone.") {
                backbone.push(name.clone());
            } else if name.starts_with("neck.") {
                neck.push(name.clone());
            } else if name.starts_with("head.") {
                head.push(name.clone());
            } else {
                unreachable!("parameter {name} outside backbone/neck/head");
            }
        }
        (backbone, neck, head)
    }

    /// Independent copy: a rebuilt detector with all parameter values
    /// copied, sharing no tensors with `self`.
    pub fn deep_clone(&self) -> Detector {
        let clone = build_detector(&self.config, &self.categories, self.seed)
            .expect("config was already validated");
        for (name, p) in self.store.iter() {
            clone
                .store
                .set_value(name, p.tensor.value())
                .expect("identical architecture");
        }
        clone
    }

    /// Rebuild this detector with a different class list. Parameters are
    /// copied by name; the classification prediction rows are mapped by
    /// category identity, and rows for categories new to the head start at
    /// zero weights with the bias prior — the same values a zero-initialized
    /// expansion would produce, so two models expanded independently agree
    /// on fresh rows.
    pub fn with_categories(&self, categories: &[String]) -> Result<Detector> {
        let mut cfg = self.config.clone();
        cfg.num_classes = categories.len();
        let new = build_detector(&cfg, categories, self.seed)?;
        for (name, p) in self.store.iter() {
            if name == "head.cls_pred.weight" || name == "head.cls_pred.bias" {
                continue;
            }
            new.store.set_value(name, p.tensor.value())?;
        }
        let old_w = self.store.get("head.cls_pred.weight").unwrap().tensor.value();
        let old_b = self.store.get("head.cls_pred.bias").unwrap().tensor.value();
        let mut new_w = new.store.get("head.cls_pred.weight").unwrap().tensor.value();
        let mut new_b = new.store.get("head.cls_pred.bias").unwrap().tensor.value();
        // fresh rows: zero weights, prior bias
        new_w.fill(0.0);
        new_b.fill(CLS_BIAS_PRIOR);
        for (new_idx, cat) in categories.iter().enumerate() {
            if let Some(old_idx) = self.categories.iter().position(|c| c == cat) {
                new_w
                    .index_axis_mut(ndarray::Axis(0), new_idx)
                    .assign(&old_w.index_axis(ndarray::Axis(0), old_idx));
                new_b[[new_idx]] = old_b[[old_idx]];
            }
        }
        new.store.set_value("head.cls_pred.weight", new_w)?;
        new.store.set_value("head.cls_pred.bias", new_b)?;
        new.store.quantize_f32();
        Ok(new)
    }
}
