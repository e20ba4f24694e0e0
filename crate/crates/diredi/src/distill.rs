//! The four training procedures: forward distillation, reverse
//! distillation (tutor emulation and customer-expectation variants),
//! re-distillation fine-tuning, and the direct-training baseline.

use crate::autograd::Tensor;
use crate::data::DetectionDataset;
use crate::detector::{assign_targets, detection_loss, Detector};
use crate::fgd::{feature_distill_loss, ChannelAdaptor, FGDConfig, GcBlockParams};
use crate::nn::{param_rng, Mode};
use crate::{Error, Result};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Learning rate divided by 10 at 2/3 of the epochs.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `0` is accepted and makes every training procedure a no-op, which
    /// keeps dry runs and resume logic trivial.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 20,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerKind::SgdMomentum,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Constant,
            grad_clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("invalid regularization settings".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Step => {
                if epoch * 3 >= self.max_epochs * 2 {
                    self.learning_rate / 10.0
                } else {
                    self.learning_rate
                }
            }
        }
    }
}

/// Weights of the reverse-distillation objective: `alpha_rd` on the
/// feature-imitation term, `beta_rd` on the detection term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RDConfig {
    pub alpha_rd: f64,
    pub beta_rd: f64,
}

impl RDConfig {
    /// Tutor-emulation setting: imitate the edge model only.
    pub fn emulation() -> Self {
        RDConfig { alpha_rd: 1.0, beta_rd: 0.0 }
    }

    /// Customer-expectation setting: imitation plus labeled private data.
    pub fn customer() -> Self {
        RDConfig { alpha_rd: 1.0, beta_rd: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_rd < 0.0 || self.beta_rd < 0.0 {
            return Err(Error::Config("RD weights must be non-negative".into()));
        }
        if self.alpha_rd == 0.0 && self.beta_rd == 0.0 {
            return Err(Error::Config("RD weights must not both be zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted detection loss over the epoch's batches.
    pub detect_loss: f64,
    /// Mean weighted feature-distillation loss.
    pub distill_loss: f64,
    /// Exactly `detect_loss + distill_loss`.
    pub total_loss: f64,
    pub num_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub label: String,
    pub map: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub run_label: String,
    pub config_digest: String,
    pub dataset_digest: String,
    pub warnings: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
    pub eval_snapshots: Vec<EvalSnapshot>,
    pub final_param_digest: String,
}

impl TrainRecord {
    /// Structured text log, one line per epoch.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "run: {}\nconfig_digest: {}\ndataset_digest: {}\n",
            self.run_label, self.config_digest, self.dataset_digest
        ));
        for warning in &self.warnings {
            out.push_str(&format!("warning: {warning}\n"));
        }
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch {:>4}  detect {:.6}  distill {:.6}  total {:.6}  batches {}\n",
                e.epoch, e.detect_loss, e.distill_loss, e.total_loss, e.num_batches
            ));
        }
        for s in &self.eval_snapshots {
            out.push_str(&format!("eval {}: mAP {:.4} F1 {:.4}\n", s.label, s.map, s.f1));
        }
        out.push_str(&format!("final_param_digest: {}\n", self.final_param_digest));
        out
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// SGD with momentum and decoupled-from-schedule weight decay, plus global
/// gradient-norm clipping; `adaptive` is Adam with the same clipping.
struct Optimizer {
    kind: OptimizerKind,
    momentum: BTreeMap<usize, ArrayD<f64>>,
    second: BTreeMap<usize, ArrayD<f64>>,
    steps: u64,
    weight_decay: f64,
    clip_norm: f64,
}

impl Optimizer {
    fn new(kind: OptimizerKind, weight_decay: f64, clip_norm: f64) -> Self {
        Optimizer {
            kind,
            momentum: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
            weight_decay,
            clip_norm,
        }
    }

    fn step(&mut self, params: &[Tensor], lr: f64) {
        self.steps += 1;
        let total_sq: f64 = params
            .iter()
            .filter_map(|p| p.grad())
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum();
        let norm = total_sq.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        for p in params {
            let Some(grad) = p.grad() else { continue };
            let w = p.value();
            let g = grad.mapv(|v| v * scale) + &w.mapv(|v| v * self.weight_decay);
            let id = p.id();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let v = self
                        .momentum
                        .entry(id)
                        .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                    *v = v.mapv(|x| x * 0.9) + &g;
                    p.set_data(w - v.mapv(|x| x * lr));
                }
                OptimizerKind::Adaptive => {
                    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                    let m = self
                        .momentum
                        .entry(id)
                        .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                    *m = m.mapv(|x| x * b1) + &g.mapv(|x| x * (1.0 - b1));
                    let v = self
                        .second
                        .entry(id)
                        .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                    *v = v.mapv(|x| x * b2) + &g.mapv(|x| x * x * (1.0 - b2));
                    let mc = 1.0 - b1.powi(self.steps as i32);
                    let vc = 1.0 - b2.powi(self.steps as i32);
                    let update = m
                        .iter()
                        .zip(v.iter())
                        .map(|(&mi, &vi)| lr * (mi / mc) / ((vi / vc).sqrt() + eps))
                        .collect::<Vec<f64>>();
                    let upd = ArrayD::from_shape_vec(g.raw_dim(), update).unwrap();
                    p.set_data(w - upd);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shared training loop
// ---------------------------------------------------------------------------

struct Objective<'a> {
    /// Feature-imitation teacher and the weight on its loss term.
    teacher: Option<(&'a Detector, f64)>,
    /// Weight on the detection loss; 0 skips it entirely (the head then
    /// receives no gradient at all).
    detect_weight: f64,
    fgd: FGDConfig,
}

fn config_digest(label: &str, cfg: &TrainConfig, obj: &Objective) -> String {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(serde_json::to_vec(&obj.fgd).expect("fgd config serializes"));
    h.update(obj.detect_weight.to_le_bytes());
    if let Some((t, alpha)) = &obj.teacher {
        h.update(alpha.to_le_bytes());
        h.update(t.store.digest().as_bytes());
    }
    hex::encode(h.finalize())
}

/// One batch's weighted (distill, detect) loss values plus the combined
/// tensor for backward. Exposed at crate level so tests can probe the
/// objective at a fixed parameter point.
pub(crate) fn batch_losses(
    student: &Detector,
    objective_teacher: Option<(&Detector, f64)>,
    detect_weight: f64,
    fgd: &FGDConfig,
    gc: &GcBlockParams,
    adaptor: Option<&ChannelAdaptor>,
    dataset: &DetectionDataset,
    indices: &[usize],
    student_mode: Mode,
) -> Result<(Tensor, f64, f64)> {
    let images = dataset.batch(indices);
    let annotations: Vec<_> = indices
        .iter()
        .map(|&i| dataset.items[i].annotation.clone())
        .collect();
    let (student_pyr, student_heads) = student.forward(&images, student_mode)?;

    let mut total: Option<Tensor> = None;
    let mut detect_value = 0.0;
    let mut distill_value = 0.0;

    if detect_weight > 0.0 {
        let shapes: Vec<(usize, usize)> = student_heads
            .levels
            .iter()
            .map(|l| {
                let s = l.class_logits.shape();
                (s[2], s[3])
            })
            .collect();
        let targets = assign_targets(
            &annotations,
            &shapes,
            &student.config.strides,
            &student.config.scale_ranges(),
        );
        let parts = detection_loss(&student_heads, &targets)?;
        let weighted = parts.total.scale(detect_weight);
        detect_value = weighted.item();
        total = Some(weighted);
    }

    if let Some((teacher, alpha)) = objective_teacher {
        if alpha > 0.0 {
            let (teacher_pyr, _) = teacher.forward(&images, Mode::Eval)?;
            let mut fea: Option<Tensor> = None;
            for (bi, ann) in annotations.iter().enumerate() {
                let t_levels: Vec<(usize, Tensor)> = teacher_pyr
                    .levels
                    .iter()
                    .map(|(s, t)| (*s, t.index_axis0(bi)))
                    .collect();
                let s_levels: Vec<(usize, Tensor)> = student_pyr
                    .levels
                    .iter()
                    .map(|(s, t)| (*s, t.index_axis0(bi)))
                    .collect();
                let l = feature_distill_loss(&t_levels, &s_levels, ann, fgd, gc, adaptor)?;
                fea = Some(match fea {
                    Some(acc) => acc.add(&l),
                    None => l,
                });
            }
            let fea = fea
                .expect("non-empty batch")
                .scale(alpha / indices.len() as f64);
            distill_value = fea.item();
            total = Some(match total {
                Some(t) => t.add(&fea),
                None => fea,
            });
        }
    }

    let total = total.ok_or_else(|| Error::Config("objective has no active terms".into()))?;
    if !total.item().is_finite() {
        return Err(Error::Numeric("training loss is not finite".into()));
    }
    Ok((total, distill_value, detect_value))
}

fn run_training(
    label: &str,
    student: &Detector,
    objective: Objective,
    dataset: &DetectionDataset,
    cfg: &TrainConfig,
    mut warnings: Vec<String>,
) -> Result<TrainRecord> {
    cfg.validate()?;
    objective.fgd.validate()?;
    let started = std::time::Instant::now();
    let dataset = dataset.relabel_for(&student.categories)?;
    if dataset.items.is_empty() {
        return Err(Error::Data(format!("{label}: empty training dataset")));
    }

    // teachers run tape-free; the student trains exactly its trainable set
    if let Some((teacher, _)) = &objective.teacher {
        teacher.store.freeze();
    }
    for (_, p) in student.store.iter() {
        p.tensor.set_requires_grad(p.trainable);
    }

    let gc_channels = objective
        .teacher
        .map(|(t, _)| t.config.neck_channels)
        .unwrap_or(student.config.neck_channels)
        .max(2);
    let gc = GcBlockParams::new(gc_channels, cfg.seed ^ 0x6763);
    let adaptor = objective.teacher.and_then(|(t, _)| {
        (t.config.neck_channels != student.config.neck_channels).then(|| {
            ChannelAdaptor::new(
                student.config.neck_channels,
                t.config.neck_channels,
                cfg.seed ^ 0x4144,
            )
        })
    });

    let mut params: Vec<Tensor> = student
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.tensor.clone())
        .collect();
    if objective.teacher.is_some() {
        params.extend(gc.trainable());
        if let Some(a) = &adaptor {
            params.extend(a.trainable());
        }
    }

    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.weight_decay, cfg.grad_clip_norm);
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..dataset.items.len()).collect();
        let mut rng = param_rng(cfg.seed, &format!("{label}.epoch{epoch}"));
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);

        let mut detect_sum = 0.0;
        let mut distill_sum = 0.0;
        let mut num_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (total, distill_v, detect_v) = batch_losses(
                student,
                objective.teacher,
                objective.detect_weight,
                &objective.fgd,
                &gc,
                adaptor.as_ref(),
                &dataset,
                chunk,
                Mode::Train,
            )?;
            for p in &params {
                p.zero_grad();
            }
            total.backward();
            optimizer.step(&params, lr);
            student.store.quantize_f32();
            detect_sum += detect_v;
            distill_sum += distill_v;
            num_batches += 1;
        }
        let detect_loss = detect_sum / num_batches as f64;
        let distill_loss = distill_sum / num_batches as f64;
        epochs.push(EpochRecord {
            epoch,
            detect_loss,
            distill_loss,
            total_loss: detect_loss + distill_loss,
            num_batches,
        });
    }

    if cfg.max_epochs == 0 {
        warnings.push("0 epochs requested: parameters left untouched".into());
    }
    Ok(TrainRecord {
        run_label: label.to_string(),
        config_digest: config_digest(label, cfg, &objective),
        dataset_digest: dataset.fingerprint(),
        warnings,
        epochs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        eval_snapshots: Vec::new(),
        final_param_digest: student.store.digest(),
    })
}

// ---------------------------------------------------------------------------
// Public training procedures
// ---------------------------------------------------------------------------

/// Forward knowledge distillation: train `student` on detection loss plus
/// the feature-imitation loss against a frozen `teacher`. The student is
/// updated in place.
pub fn distill(
    teacher: &Detector,
    student: &Detector,
    dataset: &DetectionDataset,
    fgd_config: &FGDConfig,
    train_config: &TrainConfig,
) -> Result<TrainRecord> {
    // the teacher must know every category the dataset supervises
    dataset.relabel_for(&teacher.categories).map_err(|_| {
        Error::Config(format!(
            "distill: dataset categories exceed the teacher's class plan {:?}",
            teacher.categories
        ))
    })?;
    run_training(
        "distill",
        student,
        Objective {
            teacher: Some((teacher, 1.0)),
            detect_weight: 1.0,
            fgd: fgd_config.clone(),
        },
        dataset,
        train_config,
        Vec::new(),
    )
}

/// Reverse distillation: the frozen *edge* model teaches a larger tutor
/// through feature imitation (weight `alpha_rd`) while labeled data feeds
/// the detection loss (weight `beta_rd`; 0 for the emulation tutor).
pub fn reverse_distill(
    edge_teacher: &Detector,
    tutor_student: &Detector,
    dataset: &DetectionDataset,
    fgd_config: &FGDConfig,
    rd_config: &RDConfig,
    train_config: &TrainConfig,
) -> Result<TrainRecord> {
    rd_config.validate()?;
    if tutor_student.store.num_elements() < edge_teacher.store.num_elements() {
        return Err(Error::Config(format!(
            "reverse distillation trains the larger model: student has {} parameters, teacher {}",
            tutor_student.store.num_elements(),
            edge_teacher.store.num_elements()
        )));
    }
    let mut warnings = Vec::new();
    if rd_config.beta_rd == 0.0 {
        let unknown: Vec<&String> = dataset
            .category_names
            .iter()
            .filter(|c| !edge_teacher.categories.contains(c))
            .collect();
        if !unknown.is_empty() {
            warnings.push(format!(
                "beta_rd = 0: labels {unknown:?} are outside the edge model's classes and cannot influence training"
            ));
        }
    }
    run_training(
        "reverse_distill",
        tutor_student,
        Objective {
            teacher: Some((edge_teacher, rd_config.alpha_rd)),
            detect_weight: rd_config.beta_rd,
            fgd: fgd_config.clone(),
        },
        dataset,
        train_config,
        warnings,
    )
}

/// Re-distillation after a tutor update: reshape the edge head onto the
/// tutor's class plan (retained rows copied, new rows fresh), then fine-tune
/// with forward-distillation semantics. Returns the new edge model.
pub fn redistill_finetune(
    updated_tutor: &Detector,
    edge_model: &Detector,
    dataset: &DetectionDataset,
    fgd_config: &FGDConfig,
    train_config: &TrainConfig,
) -> Result<(Detector, TrainRecord)> {
    dataset.relabel_for(&updated_tutor.categories).map_err(|_| {
        Error::Config(format!(
            "redistill: dataset categories exceed the tutor's class plan {:?}",
            updated_tutor.categories
        ))
    })?;
    let edge = edge_model.with_categories(&updated_tutor.categories)?;
    let record = run_training(
        "redistill_finetune",
        &edge,
        Objective {
            teacher: Some((updated_tutor, 1.0)),
            detect_weight: 1.0,
            fgd: fgd_config.clone(),
        },
        dataset,
        train_config,
        Vec::new(),
    )?;
    Ok((edge, record))
}

/// Plain detection training, no distillation terms — the paper's baseline.
pub fn train_direct(
    model: &Detector,
    dataset: &DetectionDataset,
    train_config: &TrainConfig,
) -> Result<TrainRecord> {
    run_training(
        "train_direct",
        model,
        Objective {
            teacher: None,
            detect_weight: 1.0,
            fgd: FGDConfig::default(),
        },
        dataset,
        train_config,
        Vec::new(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, ToySpec};
    use crate::detector::{build_detector, DetectorConfig, Tier};

    fn toy_dataset(n: usize, seed: u64) -> DetectionDataset {
        generate_toy_dataset(&ToySpec {
            num_images: n,
            seed,
            ..ToySpec::default()
        })
        .unwrap()
    }

    fn toy_model(tier: Tier, cats: &[String], seed: u64) -> Detector {
        build_detector(&DetectorConfig::preset(tier, cats.len()), cats, seed).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: epochs,
            batch_size: 4,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let ds = toy_dataset(4, 1);
        let cats = ds.category_names.clone();
        let teacher = toy_model(Tier::Toy, &cats, 1);
        let student = toy_model(Tier::Toy, &cats, 2);
        let before = student.store.digest();
        let rec = distill(&teacher, &student, &ds, &FGDConfig::default(), &quick_cfg(0)).unwrap();
        assert_eq!(student.store.digest(), before);
        assert!(rec.epochs.is_empty());
        assert!(!rec.warnings.is_empty());

        let rec2 = train_direct(&student, &ds, &quick_cfg(0)).unwrap();
        assert_eq!(student.store.digest(), before);
        assert_eq!(rec2.final_param_digest, before);

        let tutor = toy_model(Tier::Edge, &cats, 3);
        let tb = tutor.store.digest();
        reverse_distill(
            &student,
            &tutor,
            &ds,
            &FGDConfig::default(),
            &RDConfig::customer(),
            &quick_cfg(0),
        )
        .unwrap();
        assert_eq!(tutor.store.digest(), tb);
    }

    #[test]
    fn teacher_is_bit_identical_after_distillation() {
        let ds = toy_dataset(4, 2);
        let cats = ds.category_names.clone();
        let teacher = toy_model(Tier::Toy, &cats, 4);
        let student = toy_model(Tier::Toy, &cats, 5);
        let tb = teacher.store.digest();
        let sb = student.store.digest();
        distill(&teacher, &student, &ds, &FGDConfig::default(), &quick_cfg(1)).unwrap();
        assert_eq!(teacher.store.digest(), tb, "teacher moved");
        assert_ne!(student.store.digest(), sb, "student did not move");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_dataset(6, 3);
        let cats = ds.category_names.clone();
        let run = || {
            let m = toy_model(Tier::Toy, &cats, 6);
            let rec = train_direct(&m, &ds, &quick_cfg(2)).unwrap();
            (m.store.digest(), rec.epochs)
        };
        let (d1, e1) = run();
        let (d2, e2) = run();
        assert_eq!(d1, d2);
        assert_eq!(e1, e2);
    }

    #[test]
    fn loss_decomposition_is_exact() {
        let ds = toy_dataset(6, 4);
        let cats = ds.category_names.clone();
        let teacher = toy_model(Tier::Toy, &cats, 7);
        let student = toy_model(Tier::Toy, &cats, 8);
        let rec =
            distill(&teacher, &student, &ds, &FGDConfig::default(), &quick_cfg(2)).unwrap();
        for e in &rec.epochs {
            assert_eq!(e.total_loss, e.detect_loss + e.distill_loss);
            assert!(e.total_loss >= 0.0);
        }
    }

    #[test]
    fn distill_term_is_zero_when_student_equals_teacher() {
        let ds = toy_dataset(4, 5);
        let cats = ds.category_names.clone();
        let teacher = toy_model(Tier::Toy, &cats, 9);
        let student = teacher.deep_clone();
        let gc = GcBlockParams::new(teacher.config.neck_channels.max(2), 0);
        let (_, distill_v, _) = batch_losses(
            &student,
            Some((&teacher, 1.0)),
            0.0,
            &FGDConfig::default(),
            &gc,
            None,
            &ds,
            &[0, 1],
            Mode::Eval,
        )
        .unwrap();
        assert!(distill_v.abs() < 1e-18, "{distill_v}");
    }

    #[test]
    fn direct_training_reduces_loss_on_a_fixed_batch() {
        let ds = toy_dataset(4, 6);
        let cats = ds.category_names.clone();
        let m = toy_model(Tier::Toy, &cats, 10);
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            max_epochs: 8,
            batch_size: 4, // full batch -> monotone-ish descent
            seed: 1,
            ..TrainConfig::default()
        };
        let rec = train_direct(&m, &ds, &cfg).unwrap();
        let first = rec.epochs.first().unwrap().total_loss;
        let last = rec.epochs.last().unwrap().total_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn reverse_distill_requires_larger_student() {
        let ds = toy_dataset(2, 7);
        let cats = ds.category_names.clone();
        let big = toy_model(Tier::Edge, &cats, 11);
        let small = toy_model(Tier::Toy, &cats, 12);
        assert!(matches!(
            reverse_distill(
                &big,
                &small,
                &ds,
                &FGDConfig::default(),
                &RDConfig::customer(),
                &quick_cfg(1)
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn emulation_with_unknown_labels_warns_and_freezes_head() {
        let ds = toy_dataset(4, 8);
        // edge knows 5 classes; dataset carries all 10
        let edge_cats: Vec<String> = ds.category_names[..5].to_vec();
        let edge = toy_model(Tier::Toy, &edge_cats, 13);
        let tutor = toy_model(Tier::Edge, &ds.category_names.clone(), 14);
        let head_before = {
            let (_, _, h) = tutor.namespace_partition();
            h.iter()
                .map(|n| tutor.store.get(n).unwrap().tensor.value())
                .collect::<Vec<_>>()
        };
        let rec = reverse_distill(
            &edge,
            &tutor,
            &ds,
            &FGDConfig::default(),
            &RDConfig::emulation(),
            &quick_cfg(1),
        )
        .unwrap();
        assert!(rec.warnings.iter().any(|w| w.contains("beta_rd = 0")));
        // with beta 0 the detection loss is skipped: head rows untouched
        let (_, _, h) = tutor.namespace_partition();
        for (n, before) in h.iter().zip(&head_before) {
            assert_eq!(&tutor.store.get(n).unwrap().tensor.value(), before);
        }
    }

    #[test]
    fn rd_config_validation() {
        assert!(RDConfig { alpha_rd: 0.0, beta_rd: 0.0 }.validate().is_err());
        assert!(RDConfig { alpha_rd: -1.0, beta_rd: 1.0 }.validate().is_err());
        assert!(RDConfig::emulation().validate().is_ok());
    }

    #[test]
    fn redistill_reshapes_head_to_tutor_plan() {
        let ds = toy_dataset(2, 9);
        let tutor_cats: Vec<String> = ds.category_names[..6].to_vec();
        let edge_cats: Vec<String> = ds.category_names[..5].to_vec();
        let tutor = toy_model(Tier::Edge, &tutor_cats, 15);
        let edge = toy_model(Tier::Toy, &edge_cats, 16);
        let sub = ds.filter_categories(&tutor_cats, crate::data::FilterPolicy::Keep);
        let (new_edge, _) =
            redistill_finetune(&tutor, &edge, &sub, &FGDConfig::default(), &quick_cfg(0))
                .unwrap();
        assert_eq!(new_edge.categories, tutor_cats);
        // retained rows copied
        let old_w = edge.store.get("head.cls_pred.weight").unwrap().tensor.value();
        let new_w = new_edge.store.get("head.cls_pred.weight").unwrap().tensor.value();
        assert_eq!(
            new_w.index_axis(ndarray::Axis(0), 0),
            old_w.index_axis(ndarray::Axis(0), 0)
        );

        // dataset outside tutor plan -> config error
        assert!(matches!(
            redistill_finetune(&tutor, &edge, &ds, &FGDConfig::default(), &quick_cfg(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn distill_rejects_dataset_outside_teacher_plan() {
        let ds = toy_dataset(2, 10);
        let teacher_cats: Vec<String> = ds.category_names[..4].to_vec();
        let teacher = toy_model(Tier::Toy, &teacher_cats, 17);
        let student = toy_model(Tier::Toy, &ds.category_names.clone(), 18);
        assert!(matches!(
            distill(&teacher, &student, &ds, &FGDConfig::default(), &quick_cfg(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn train_log_includes_epochs_and_digests() {
        let ds = toy_dataset(3, 11);
        let cats = ds.category_names.clone();
        let m = toy_model(Tier::Toy, &cats, 19);
        let rec = train_direct(&m, &ds, &quick_cfg(1)).unwrap();
        let log = rec.to_log();
        assert!(log.contains("run: train_direct"));
        assert!(log.contains("epoch    0"));
        assert!(log.contains(&rec.final_param_digest));
    }
}
