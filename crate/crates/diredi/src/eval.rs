//! Detection metrics: VOC-style matching, per-class average precision,
//! micro-averaged precision/recall, and F1.

use crate::data::{Annotation, DetectionDataset};
use crate::detector::{infer, Detection, Detector};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Operating point for the precision/recall/F1 columns.
    pub score_threshold: f64,
    pub ap_interpolation: ApInterpolation,
    /// Inference knobs used while collecting detections.
    pub infer_score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            score_threshold: 0.3,
            ap_interpolation: ApInterpolation::AllPoint,
            infer_score_thresh: 0.05,
            nms_iou: 0.6,
            max_dets: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.iou_threshold && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold {} outside (0,1)",
                self.iou_threshold
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("eval config serializes"));
        hex::encode(h.finalize())
    }
}

/// Deterministic, timestamp-free evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-class AP; classes with no ground truth and no detections are
    /// absent (excluded from mAP).
    pub per_class_ap: BTreeMap<String, f64>,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub config_digest: String,
    pub dataset_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Matched a VOC "difficult" object: excluded from both counts.
    Ignored,
}

/// Greedy VOC matching for one image and one class: walking detections in
/// descending score order, each matches the highest-IoU unmatched GT if the
/// IoU clears the threshold.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &Annotation,
    iou_threshold: f64,
) -> Vec<MatchFlag> {
    debug_assert!(detections
        .windows(2)
        .all(|w| w[0].score >= w[1].score));
    let mut matched = vec![false; ground_truth.boxes.len()];
    let mut flags = Vec::with_capacity(detections.len());
    for det in detections {
        let mut best: Option<(f64, usize)> = None;
        for (gi, gb) in ground_truth.boxes.iter().enumerate() {
            if ground_truth.labels[gi] != det.label || matched[gi] {
                continue;
            }
            let iou = det.bbox.iou(gb);
            if iou >= iou_threshold && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                matched[gi] = true;
                flags.push(if ground_truth.difficult[gi] {
                    MatchFlag::Ignored
                } else {
                    MatchFlag::TruePositive
                });
            }
            None => flags.push(MatchFlag::FalsePositive),
        }
    }
    flags
}

/// Area under the precision-recall curve from score-ordered TP/FP flags.
/// Returns `None` when there is no ground truth and no detections (AP
/// undefined; excluded from mAP).
pub fn average_precision(
    flags: &[bool],
    num_gt: usize,
    interpolation: ApInterpolation,
) -> Option<f64> {
    if num_gt == 0 && flags.is_empty() {
        return None;
    }
    if num_gt == 0 {
        return Some(0.0);
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    for (i, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // monotone non-increasing precision envelope
    let envelope_at = |r: f64| -> f64 {
        precisions
            .iter()
            .zip(&recalls)
            .filter(|(_, &rc)| rc >= r)
            .map(|(&p, _)| p)
            .fold(0.0, f64::max)
    };
    match interpolation {
        ApInterpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for i in 0..flags.len() {
                if flags[i] {
                    let r = recalls[i];
                    ap += (r - prev_recall) * envelope_at(r);
                    prev_recall = r;
                }
            }
            Some(ap)
        }
        ApInterpolation::ElevenPoint => {
            let mut sum = 0.0;
            for k in 0..=10 {
                sum += envelope_at(k as f64 / 10.0);
            }
            Some(sum / 11.0)
        }
    }
}

/// F1 = 2PR/(P+R), 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Evaluate a detector over a whole dataset: per-class AP from all
/// detections, micro-averaged precision/recall at the configured score
/// threshold, F1 from those.
pub fn evaluate(
    detector: &Detector,
    dataset: &DetectionDataset,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    if dataset.items.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let dataset = dataset.relabel_for(&detector.categories)?;
    let per_image: Vec<crate::detector::Detections> = dataset
        .items
        .iter()
        .map(|item| {
            infer(
                detector,
                &item.image.mapv(|v| v as f64),
                config.infer_score_thresh,
                config.nms_iou,
                config.max_dets,
            )
        })
        .collect::<Result<_>>()?;
    report_from_detections(detector, &dataset, &per_image, config)
}

/// Metric aggregation over precomputed per-image detections; split out so
/// oracle tests can feed hand-built detections through the same path.
pub fn report_from_detections(
    detector: &Detector,
    dataset: &DetectionDataset,
    per_image: &[crate::detector::Detections],
    config: &EvalConfig,
) -> Result<EvalReport> {
    let num_classes = detector.categories.len();
    // (score, flag) per class across all images, for AP
    let mut scored: Vec<Vec<(f64, MatchFlag)>> = vec![Vec::new(); num_classes];
    let mut num_gt = vec![0usize; num_classes];
    // micro P/R at the operating threshold
    let mut tp_op = 0usize;
    let mut det_op = 0usize;
    let mut gt_op = 0usize;

    for (item, dets) in dataset.items.iter().zip(per_image) {
        let ann = &item.annotation;
        for (gi, &l) in ann.labels.iter().enumerate() {
            if !ann.difficult[gi] {
                num_gt[l] += 1;
                gt_op += 1;
            }
        }
        for ci in 0..num_classes {
            let class_dets: Vec<Detection> = dets
                .items
                .iter()
                .filter(|d| d.label == ci)
                .cloned()
                .collect();
            let flags = match_detections(&class_dets, ann, config.iou_threshold);
            for (d, &f) in class_dets.iter().zip(&flags) {
                scored[ci].push((d.score, f));
                if d.score >= config.score_threshold && f != MatchFlag::Ignored {
                    det_op += 1;
                    if f == MatchFlag::TruePositive {
                        tp_op += 1;
                    }
                }
            }
        }
    }

    let mut per_class_ap = BTreeMap::new();
    for ci in 0..num_classes {
        let mut s = scored[ci].clone();
        s.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let flags: Vec<bool> = s
            .iter()
            .filter(|(_, f)| *f != MatchFlag::Ignored)
            .map(|(_, f)| *f == MatchFlag::TruePositive)
            .collect();
        if let Some(ap) = average_precision(&flags, num_gt[ci], config.ap_interpolation) {
            per_class_ap.insert(detector.categories[ci].clone(), ap);
        }
    }
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    let precision = if det_op == 0 { 0.0 } else { tp_op as f64 / det_op as f64 };
    let recall = if gt_op == 0 { 0.0 } else { tp_op as f64 / gt_op as f64 };
    Ok(EvalReport {
        per_class_ap,
        map,
        precision,
        recall,
        f1: f1(precision, recall),
        config_digest: config.digest(),
        dataset_digest: dataset.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BBox;
    use crate::detector::Detection;
    use proptest::prelude::*;

    fn det(score: f64, x1: f64, y1: f64, x2: f64, y2: f64, label: usize) -> Detection {
        Detection { bbox: BBox::new(x1, y1, x2, y2), score, label }
    }

    fn ann(boxes: Vec<BBox>, labels: Vec<usize>) -> Annotation {
        let difficult = vec![false; boxes.len()];
        Annotation { image_id: "t".into(), boxes, labels, difficult }
    }

    #[test]
    fn exact_hit_is_tp() {
        let gt = ann(vec![BBox::new(0.0, 0.0, 10.0, 10.0)], vec![0]);
        let flags = match_detections(&[det(0.9, 0.0, 0.0, 10.0, 10.0, 0)], &gt, 0.5);
        assert_eq!(flags, vec![MatchFlag::TruePositive]);
    }

    #[test]
    fn second_detection_on_same_gt_is_fp() {
        let gt = ann(vec![BBox::new(0.0, 0.0, 10.0, 10.0)], vec![0]);
        let dets = [
            det(0.9, 0.0, 0.0, 10.0, 10.0, 0),
            det(0.8, 0.5, 0.5, 10.5, 10.5, 0),
        ];
        let flags = match_detections(&dets, &gt, 0.5);
        assert_eq!(flags, vec![MatchFlag::TruePositive, MatchFlag::FalsePositive]);
    }

    #[test]
    fn wrong_class_never_matches() {
        let gt = ann(vec![BBox::new(0.0, 0.0, 10.0, 10.0)], vec![1]);
        let flags = match_detections(&[det(0.9, 0.0, 0.0, 10.0, 10.0, 0)], &gt, 0.5);
        assert_eq!(flags, vec![MatchFlag::FalsePositive]);
    }

    #[test]
    fn difficult_matches_are_ignored() {
        let gt = Annotation {
            image_id: "t".into(),
            boxes: vec![BBox::new(0.0, 0.0, 10.0, 10.0)],
            labels: vec![0],
            difficult: vec![true],
        };
        let flags = match_detections(&[det(0.9, 0.0, 0.0, 10.0, 10.0, 0)], &gt, 0.5);
        assert_eq!(flags, vec![MatchFlag::Ignored]);
    }

    /// Oracle: replay greedy order explicitly with a fresh matcher that
    /// enumerates all GT candidates per detection.
    fn oracle_match(dets: &[Detection], gt: &Annotation, thresh: f64) -> Vec<MatchFlag> {
        let mut used = vec![false; gt.boxes.len()];
        dets.iter()
            .map(|d| {
                let cands: Vec<(usize, f64)> = gt
                    .boxes
                    .iter()
                    .enumerate()
                    .filter(|(gi, b)| {
                        gt.labels[*gi] == d.label && !used[*gi] && d.bbox.iou(b) >= thresh
                    })
                    .map(|(gi, b)| (gi, d.bbox.iou(b)))
                    .collect();
                match cands
                    .into_iter()
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                {
                    Some((gi, _)) => {
                        used[gi] = true;
                        if gt.difficult[gi] {
                            MatchFlag::Ignored
                        } else {
                            MatchFlag::TruePositive
                        }
                    }
                    None => MatchFlag::FalsePositive,
                }
            })
            .collect()
    }

    #[test]
    fn four_detection_fixture_matches_oracle() {
        let gt = ann(
            vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 0.0, 30.0, 10.0)],
            vec![0, 0],
        );
        let dets = [
            det(0.95, 1.0, 1.0, 11.0, 11.0, 0),
            det(0.90, 19.0, 0.0, 29.0, 10.0, 0),
            det(0.85, 0.0, 0.0, 10.0, 10.0, 0),
            det(0.40, 5.0, 5.0, 15.0, 15.0, 0),
        ];
        let flags = match_detections(&dets, &gt, 0.5);
        assert_eq!(flags, oracle_match(&dets, &gt, 0.5));
        assert_eq!(
            flags,
            vec![
                MatchFlag::TruePositive,
                MatchFlag::TruePositive,
                MatchFlag::FalsePositive,
                MatchFlag::FalsePositive
            ]
        );
    }

    proptest! {
        #[test]
        fn matching_agrees_with_oracle_on_random_scenes(
            gts in proptest::collection::vec(
                (0.0f64..30.0, 0.0f64..30.0, 4.0f64..15.0, 4.0f64..15.0, 0usize..2),
                0..4,
            ),
            ds in proptest::collection::vec(
                (0.0f64..30.0, 0.0f64..30.0, 4.0f64..15.0, 4.0f64..15.0, 0usize..2, 0.01f64..1.0),
                0..6,
            ),
        ) {
            let gt = ann(
                gts.iter().map(|&(x, y, w, h, _)| BBox::new(x, y, x + w, y + h)).collect(),
                gts.iter().map(|&(_, _, _, _, l)| l).collect(),
            );
            let mut dets: Vec<Detection> = ds
                .iter()
                .map(|&(x, y, w, h, l, s)| det(s, x, y, x + w, y + h, l))
                .collect();
            dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            prop_assert_eq!(match_detections(&dets, &gt, 0.5), oracle_match(&dets, &gt, 0.5));
        }
    }

    #[test]
    fn ap_trivial_cases() {
        assert_eq!(
            average_precision(&[true, true], 2, ApInterpolation::AllPoint),
            Some(1.0)
        );
        assert_eq!(average_precision(&[], 3, ApInterpolation::AllPoint), Some(0.0));
        assert_eq!(average_precision(&[], 0, ApInterpolation::AllPoint), None);
        assert_eq!(
            average_precision(&[false], 0, ApInterpolation::AllPoint),
            Some(0.0)
        );
    }

    #[test]
    fn ap_tp_fp_tp_fixture() {
        // PR points: (0.5, 1.0), (0.5, 0.5), (1.0, 2/3)
        // all-point: 0.5 * 1.0 + 0.5 * (2/3) = 0.8333...
        let ap = average_precision(&[true, false, true], 2, ApInterpolation::AllPoint).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");

        // eleven-point: envelope is 1.0 for r <= 0.5, 2/3 for r <= 1.0
        let ap11 =
            average_precision(&[true, false, true], 2, ApInterpolation::ElevenPoint).unwrap();
        let expect = (6.0 * 1.0 + 5.0 * (2.0 / 3.0)) / 11.0;
        assert!((ap11 - expect).abs() < 1e-12, "{ap11}");
    }

    #[test]
    fn ap_never_decreases_when_appending_a_tp() {
        let base = [true, false, false, true, false];
        for n in 1..=base.len() {
            let a = average_precision(&base[..n], 4, ApInterpolation::AllPoint).unwrap();
            let mut ext = base[..n].to_vec();
            ext.push(true);
            let b = average_precision(&ext, 4, ApInterpolation::AllPoint).unwrap();
            assert!(b >= a - 1e-12, "{a} -> {b}");
        }
    }

    #[test]
    fn f1_reference_values() {
        // published reference rows
        assert!((f1(0.849, 0.715) - 0.776).abs() < 0.0005);
        assert!((f1(0.679, 0.503) - 0.578).abs() < 0.0005);
        // fixed point and symmetry
        assert_eq!(f1(0.6, 0.6), 0.6);
        assert_eq!(f1(0.3, 0.9), f1(0.9, 0.3));
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    mod end_to_end {
        use super::*;
        use crate::data::{generate_toy_dataset, DatasetItem, DetectionDataset, Provenance, ToySpec};
        use crate::detector::{build_detector, Detections, DetectorConfig, Tier};

        fn toy_detector(cats: &[String]) -> crate::detector::Detector {
            build_detector(&DetectorConfig::preset(Tier::Toy, cats.len()), cats, 3).unwrap()
        }

        #[test]
        fn empty_dataset_is_an_error() {
            let cats = vec!["a".to_string()];
            let d = toy_detector(&cats);
            let ds = DetectionDataset {
                items: vec![],
                category_names: cats,
                provenance: Provenance::Synthetic,
            };
            assert!(evaluate(&d, &ds, &EvalConfig::default()).is_err());
        }

        #[test]
        fn untrained_model_reports_zero_recall_when_no_detections() {
            let spec = ToySpec { num_images: 3, ..ToySpec::default() };
            let ds = generate_toy_dataset(&spec).unwrap();
            let d = toy_detector(&ds.category_names.clone());
            // the prior-biased fresh head emits probabilities ~0.01 ->
            // scores ~0.01x under the 0.05 inference threshold
            let r = evaluate(&d, &ds, &EvalConfig::default()).unwrap();
            assert_eq!(r.recall, 0.0);
            assert_eq!(r.map, 0.0);
        }

        #[test]
        fn oracle_detections_give_perfect_map() {
            let spec = ToySpec { num_images: 4, ..ToySpec::default() };
            let ds = generate_toy_dataset(&spec).unwrap();
            let d = toy_detector(&ds.category_names.clone());
            let per_image: Vec<Detections> = ds
                .items
                .iter()
                .map(|it| Detections {
                    items: it
                        .annotation
                        .boxes
                        .iter()
                        .zip(&it.annotation.labels)
                        .map(|(b, &l)| Detection { bbox: *b, score: 0.99, label: l })
                        .collect(),
                })
                .collect();
            let r =
                report_from_detections(&d, &ds, &per_image, &EvalConfig::default()).unwrap();
            assert!((r.map - 1.0).abs() < 1e-9);
            assert!((r.f1 - 1.0).abs() < 1e-9);
        }

        /// Scalar brute-force reimplementation of the whole aggregation.
        fn oracle_report(
            cats: &[String],
            items: &[DatasetItem],
            per_image: &[Detections],
            cfg: &EvalConfig,
        ) -> (f64, f64, f64) {
            let mut aps = Vec::new();
            for (ci, _) in cats.iter().enumerate() {
                let mut all: Vec<(f64, bool)> = Vec::new();
                let mut gt_count = 0usize;
                for (it, dets) in items.iter().zip(per_image) {
                    gt_count += it.annotation.labels.iter().filter(|&&l| l == ci).count();
                    let cd: Vec<Detection> = dets
                        .items
                        .iter()
                        .filter(|d| d.label == ci)
                        .cloned()
                        .collect();
                    let fl = oracle_match(&cd, &it.annotation, cfg.iou_threshold);
                    for (d, f) in cd.iter().zip(&fl) {
                        all.push((d.score, *f == MatchFlag::TruePositive));
                    }
                }
                all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                let flags: Vec<bool> = all.iter().map(|&(_, t)| t).collect();
                if let Some(ap) = average_precision(&flags, gt_count, cfg.ap_interpolation) {
                    aps.push(ap);
                }
            }
            let map = aps.iter().sum::<f64>() / aps.len().max(1) as f64;
            let (mut tp, mut nd, mut ng) = (0usize, 0usize, 0usize);
            for (it, dets) in items.iter().zip(per_image) {
                ng += it.annotation.labels.len();
                for (ci, _) in cats.iter().enumerate() {
                    let cd: Vec<Detection> = dets
                        .items
                        .iter()
                        .filter(|d| d.label == ci)
                        .cloned()
                        .collect();
                    let fl = oracle_match(&cd, &it.annotation, cfg.iou_threshold);
                    for (d, f) in cd.iter().zip(&fl) {
                        if d.score >= cfg.score_threshold {
                            nd += 1;
                            if *f == MatchFlag::TruePositive {
                                tp += 1;
                            }
                        }
                    }
                }
            }
            let p = if nd == 0 { 0.0 } else { tp as f64 / nd as f64 };
            let r = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
            (map, p, r)
        }

        #[test]
        fn random_fixture_matches_brute_force_pipeline() {
            use rand::{Rng, SeedableRng};
            let spec = ToySpec { num_images: 5, ..ToySpec::default() };
            let ds = generate_toy_dataset(&spec).unwrap();
            let d = toy_detector(&ds.category_names.clone());
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
            // noisy detections: some on GT, some random
            let per_image: Vec<Detections> = ds
                .items
                .iter()
                .map(|it| {
                    let mut items: Vec<Detection> = Vec::new();
                    for (b, &l) in it.annotation.boxes.iter().zip(&it.annotation.labels) {
                        if rng.gen_bool(0.8) {
                            let jitter = rng.gen_range(-2.0..2.0);
                            items.push(Detection {
                                bbox: BBox::new(
                                    b.x1 + jitter,
                                    b.y1 + jitter,
                                    b.x2 + jitter,
                                    b.y2 + jitter,
                                ),
                                score: rng.gen_range(0.1..1.0),
                                label: l,
                            });
                        }
                    }
                    for _ in 0..rng.gen_range(0..3) {
                        let x = rng.gen_range(0.0..50.0);
                        let y = rng.gen_range(0.0..50.0);
                        items.push(Detection {
                            bbox: BBox::new(x, y, x + 10.0, y + 10.0),
                            score: rng.gen_range(0.1..1.0),
                            label: rng.gen_range(0..ds.category_names.len()),
                        });
                    }
                    items.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                    Detections { items }
                })
                .collect();
            let cfg = EvalConfig::default();
            let report = report_from_detections(&d, &ds, &per_image, &cfg).unwrap();
            let (map, p, r) = oracle_report(&ds.category_names, &ds.items, &per_image, &cfg);
            assert!((report.map - map).abs() < 1e-9);
            assert!((report.precision - p).abs() < 1e-9);
            assert!((report.recall - r).abs() < 1e-9);
            assert!((report.f1 - f1(p, r)).abs() < 1e-9);
            // internal consistency
            let recomputed: f64 = report.per_class_ap.values().sum::<f64>()
                / report.per_class_ap.len() as f64;
            assert!((report.map - recomputed).abs() < 1e-12);
        }
    }
}
