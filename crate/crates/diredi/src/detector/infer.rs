//! Box decoding and per-class greedy non-maximum suppression.

use super::loss::REG_CLAMP;
use super::Detector;
use crate::data::BBox;
use crate::nn::Mode;
use crate::{Error, Result};
use ndarray::Array3;

#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub label: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Detections {
    /// Sorted by descending score.
    pub items: Vec<Detection>,
}

/// Greedy NMS within one class: keep the highest-scoring box, drop boxes
/// overlapping a kept box at IoU >= `nms_iou`, repeat.
pub fn nms_per_class(mut candidates: Vec<Detection>, nms_iou: f64) -> Vec<Detection> {
    candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut kept: Vec<Detection> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| k.bbox.iou(&c.bbox) < nms_iou) {
            kept.push(c);
        }
    }
    kept
}

/// Run the detector on one image (CHW, f64 in [0,1]) and post-process.
/// Scores are sqrt(class probability x centerness); boxes are clipped to
/// the image.
pub fn infer(
    detector: &Detector,
    image: &Array3<f64>,
    score_thresh: f64,
    nms_iou: f64,
    max_dets: usize,
) -> Result<Detections> {
    if !(0.0..=1.0).contains(&score_thresh) {
        return Err(Error::Config(format!("score_thresh {score_thresh} outside [0,1]")));
    }
    if !(0.0 < nms_iou && nms_iou < 1.0) {
        return Err(Error::Config(format!("nms_iou {nms_iou} outside (0,1)")));
    }
    let (c, h, w) = image.dim();
    let batch = image
        .clone()
        .into_shape_with_order((1, c, h, w))
        .map_err(|e| Error::Shape(format!("image reshape: {e}")))?;
    let (_, heads) = detector.forward(&batch, Mode::Eval)?;

    let num_classes = detector.config.num_classes;
    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); num_classes];
    for level in &heads.levels {
        let stride = level.stride as f64;
        let cls = level.class_logits.value();
        let ctr = level.centerness_logits.value();
        let reg = level.box_regression.value();
        let shape = cls.shape().to_vec();
        let (lh, lw) = (shape[2], shape[3]);
        for yi in 0..lh {
            for xi in 0..lw {
                let ctr_p = sigmoid(ctr[[0, 0, yi, xi]]);
                let px = xi as f64 * stride + stride / 2.0;
                let py = yi as f64 * stride + stride / 2.0;
                for ci in 0..num_classes {
                    let p = sigmoid(cls[[0, ci, yi, xi]]);
                    let score = (p * ctr_p).sqrt();
                    if score < score_thresh || score_thresh >= 1.0 - 1e-12 {
                        continue;
                    }
                    let d = |k: usize| reg[[0, k, yi, xi]].clamp(-REG_CLAMP, REG_CLAMP).exp() * stride;
                    let bbox = BBox::new(px - d(0), py - d(1), px + d(2), py + d(3))
                        .clip(w as f64, h as f64);
                    if bbox.x2 <= bbox.x1 || bbox.y2 <= bbox.y1 {
                        continue;
                    }
                    per_class[ci].push(Detection { bbox, score, label: ci });
                }
            }
        }
    }

    let mut items: Vec<Detection> = per_class
        .into_iter()
        .flat_map(|c| nms_per_class(c, nms_iou))
        .collect();
    items.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    items.truncate(max_dets);
    Ok(Detections { items })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_detector, DetectorConfig, Tier};
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn det(score: f64, x1: f64, y1: f64, x2: f64, y2: f64, label: usize) -> Detection {
        Detection { bbox: BBox::new(x1, y1, x2, y2), score, label }
    }

    /// O(n^2) suppression oracle: a box survives iff no higher-scoring
    /// surviving box of the same class overlaps it at IoU >= thresh,
    /// resolved in score order.
    fn brute_force_nms(cands: &[Detection], thresh: f64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| cands[b].score.partial_cmp(&cands[a].score).unwrap());
        let mut surviving: Vec<usize> = Vec::new();
        for &i in &order {
            let suppressed = surviving
                .iter()
                .any(|&j| cands[j].bbox.iou(&cands[i].bbox) >= thresh);
            if !suppressed {
                surviving.push(i);
            }
        }
        surviving
    }

    #[test]
    fn identical_boxes_collapse_to_one() {
        let cands = vec![
            det(0.9, 0.0, 0.0, 10.0, 10.0, 0),
            det(0.8, 0.0, 0.0, 10.0, 10.0, 0),
        ];
        let kept = nms_per_class(cands, 0.6);
        assert_eq!(kept.len(), 1);
        assert!((kept[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn five_box_fixture_matches_brute_force() {
        let cands = vec![
            det(0.9, 0.0, 0.0, 10.0, 10.0, 0),
            det(0.85, 2.0, 2.0, 12.0, 12.0, 0), // IoU with first ~0.47
            det(0.8, 1.0, 1.0, 11.0, 11.0, 0),  // IoU with first ~0.68
            det(0.7, 20.0, 20.0, 30.0, 30.0, 0),
            det(0.6, 21.0, 21.0, 31.0, 31.0, 0),
        ];
        for thresh in [0.4, 0.5, 0.6, 0.7] {
            let kept = nms_per_class(cands.clone(), thresh);
            let oracle = brute_force_nms(&cands, thresh);
            let kept_scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
            let oracle_scores: Vec<f64> = oracle.iter().map(|&i| cands[i].score).collect();
            assert_eq!(kept_scores, oracle_scores, "thresh {thresh}");
        }
    }

    proptest! {
        #[test]
        fn nms_matches_brute_force_on_random_boxes(
            boxes in proptest::collection::vec(
                (0.0f64..40.0, 0.0f64..40.0, 2.0f64..20.0, 2.0f64..20.0, 0.01f64..1.0),
                1..20,
            ),
            thresh in 0.3f64..0.8,
        ) {
            let cands: Vec<Detection> = boxes
                .iter()
                .map(|&(x, y, w, h, s)| det(s, x, y, x + w, y + h, 0))
                .collect();
            let kept = nms_per_class(cands.clone(), thresh);
            let oracle = brute_force_nms(&cands, thresh);
            let ks: Vec<f64> = kept.iter().map(|d| d.score).collect();
            let os: Vec<f64> = oracle.iter().map(|&i| cands[i].score).collect();
            prop_assert_eq!(ks, os);
            // surviving same-class boxes are pairwise below the threshold
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(kept[i].bbox.iou(&kept[j].bbox) < thresh);
                }
            }
        }
    }

    #[test]
    fn infer_end_to_end_properties() {
        let cats: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let d = build_detector(&DetectorConfig::preset(Tier::Toy, 3), &cats, 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let img = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..1.0));

        // threshold 1.0 -> nothing survives
        let none = infer(&d, &img, 1.0, 0.6, 100).unwrap();
        assert!(none.items.is_empty());

        let out = infer(&d, &img, 0.0, 0.6, 10).unwrap();
        assert!(out.items.len() <= 10);
        for w in out.items.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for it in &out.items {
            assert!(it.bbox.x2 > it.bbox.x1 && it.bbox.y2 > it.bbox.y1);
            assert!(it.bbox.x1 >= 0.0 && it.bbox.x2 <= 64.0);
            assert!((0.0..=1.0).contains(&it.score));
            assert!(it.label < 3);
        }

        assert!(infer(&d, &img, -0.1, 0.6, 10).is_err());
        assert!(infer(&d, &img, 0.5, 1.0, 10).is_err());
    }
}
