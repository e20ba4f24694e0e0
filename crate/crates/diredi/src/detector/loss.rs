//! Detection training loss: sigmoid focal classification loss over all
//! pixels, IoU box-regression loss over positives, and binary cross-entropy
//! centerness loss over positives.

use super::assign::{TargetMaps, BACKGROUND};
use super::HeadOutputs;
use crate::autograd::Tensor;
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
// The focusing terms below use `.square()`, which bakes in the exponent.
const _: () = assert!(FOCAL_GAMMA as i64 == 2);
/// Clamp on regression logits before exponentiation.
pub const REG_CLAMP: f64 = 12.0;

pub struct DetectionLossParts {
    pub total: Tensor,
    pub classification: f64,
    pub regression: f64,
    pub centerness: f64,
    pub num_positives: usize,
}

/// Numerically stable log-sigmoid pieces: ln σ(x) = -softplus(-x),
/// ln(1-σ(x)) = -softplus(x).
fn log_sigmoid(x: &Tensor) -> Tensor {
    x.neg().softplus().neg()
}

fn log_one_minus_sigmoid(x: &Tensor) -> Tensor {
    x.softplus().neg()
}

pub fn detection_loss(outputs: &HeadOutputs, targets: &TargetMaps) -> Result<DetectionLossParts> {
    if outputs.levels.len() != targets.levels.len() {
        return Err(Error::Shape(format!(
            "{} output levels vs {} target levels",
            outputs.levels.len(),
            targets.levels.len()
        )));
    }
    let num_pos = targets.num_positives();
    let pos_div = num_pos.max(1) as f64;

    let mut cls_terms: Vec<Tensor> = Vec::new();
    let mut reg_terms: Vec<Tensor> = Vec::new();
    let mut ctr_terms: Vec<Tensor> = Vec::new();

    for (out, tgt) in outputs.levels.iter().zip(&targets.levels) {
        let logits = &out.class_logits;
        let shape = logits.shape();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let tshape = tgt.class_target.dim();
        if tshape != (n, h, w) {
            return Err(Error::Shape(format!(
                "class target {:?} vs logits {:?}",
                tshape, shape
            )));
        }
        if logits.value().iter().any(|v| !v.is_finite())
            || out.centerness_logits.value().iter().any(|v| !v.is_finite())
            || out.box_regression.value().iter().any(|v| !v.is_finite())
        {
            return Err(Error::Numeric(
                "non-finite head outputs in detection loss".into(),
            ));
        }

        // one-hot target and positive-pixel mask as constants
        let mut onehot = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
        let mut pos_mask = ArrayD::<f64>::zeros(IxDyn(&[n, 1, h, w]));
        for ni in 0..n {
            for yi in 0..h {
                for xi in 0..w {
                    let t = tgt.class_target[[ni, yi, xi]];
                    if t != BACKGROUND {
                        onehot[[ni, t as usize, yi, xi]] = 1.0;
                        pos_mask[[ni, 0, yi, xi]] = 1.0;
                    }
                }
            }
        }
        let t = Tensor::constant(onehot);
        let pos = Tensor::constant(pos_mask);

        // focal loss, summed over every pixel and class
        let p = logits.sigmoid();
        let pos_part = t
            .scale(FOCAL_ALPHA)
            .mul(&p.neg().add_scalar(1.0).square())
            .mul(&log_sigmoid(logits));
        let neg_part = t
            .neg()
            .add_scalar(1.0)
            .scale(1.0 - FOCAL_ALPHA)
            .mul(&p.square())
            .mul(&log_one_minus_sigmoid(logits));
        cls_terms.push(pos_part.add(&neg_part).neg().sum_all());

        // IoU loss over positives, from stride-normalized distances
        let d_pred = out.box_regression.clamp(-REG_CLAMP, REG_CLAMP).exp();
        let d_tgt = Tensor::constant(tgt.regression_target.clone().into_dyn());
        let sl = |t: &Tensor, i: usize| -> Tensor { t.index_channel(i) };
        let (lp, tp, rp, bp) = (sl(&d_pred, 0), sl(&d_pred, 1), sl(&d_pred, 2), sl(&d_pred, 3));
        let (lt, tt, rt, bt) = (sl(&d_tgt, 0), sl(&d_tgt, 1), sl(&d_tgt, 2), sl(&d_tgt, 3));
        let iw = lp.minimum(&lt).add(&rp.minimum(&rt));
        let ih = tp.minimum(&tt).add(&bp.minimum(&bt));
        let inter = iw.mul(&ih);
        let area_p = lp.add(&rp).mul(&tp.add(&bp));
        let area_t = lt.add(&rt).mul(&tt.add(&bt));
        let union = area_p.add(&area_t).sub(&inter).add_scalar(1e-9);
        let iou = inter.div(&union);
        reg_terms.push(iou.neg().add_scalar(1.0).mul(&pos).sum_all());

        // centerness BCE over positives: softplus(x) - x*t
        let ctr_t = Tensor::constant(
            tgt.centerness_target
                .clone()
                .insert_axis(ndarray::Axis(1))
                .into_dyn(),
        );
        let x = &out.centerness_logits;
        let bce = x.softplus().sub(&x.mul(&ctr_t));
        ctr_terms.push(bce.mul(&pos).sum_all());
    }

    let sum = |terms: Vec<Tensor>| -> Tensor {
        let mut it = terms.into_iter();
        let first = it.next().expect("at least one level");
        it.fold(first, |acc, t| acc.add(&t))
    };
    let cls = sum(cls_terms).scale(1.0 / pos_div);
    let reg = sum(reg_terms).scale(1.0 / pos_div);
    let ctr = sum(ctr_terms).scale(1.0 / pos_div);

    let parts = (cls.item(), reg.item(), ctr.item());
    let total = cls.add(&reg).add(&ctr);
    if !total.item().is_finite() {
        return Err(Error::Numeric("detection loss is not finite".into()));
    }
    Ok(DetectionLossParts {
        total,
        classification: parts.0,
        regression: parts.1,
        centerness: parts.2,
        num_positives: num_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::detector::assign::{assign_targets, TargetMaps};
    use crate::detector::{HeadLevel, HeadOutputs};
    use crate::data::{Annotation, BBox};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rand_arr(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
    }

    fn single_level(cls: ArrayD<f64>, ctr: ArrayD<f64>, reg: ArrayD<f64>) -> HeadOutputs {
        HeadOutputs {
            levels: vec![HeadLevel {
                stride: 8,
                class_logits: Tensor::leaf(cls),
                centerness_logits: Tensor::leaf(ctr),
                box_regression: Tensor::leaf(reg),
            }],
        }
    }

    fn targets_2x2() -> TargetMaps {
        let ann = Annotation {
            image_id: "t".into(),
            boxes: vec![BBox::new(0.0, 0.0, 10.0, 10.0)],
            labels: vec![1],
            difficult: vec![false],
        };
        assign_targets(&[ann], &[(2, 2)], &[8], &[(0.0, f64::INFINITY)])
    }

    /// Plain scalar reimplementation of the three loss terms.
    fn oracle_loss(
        cls: &ArrayD<f64>,
        ctr: &ArrayD<f64>,
        reg: &ArrayD<f64>,
        t: &TargetMaps,
    ) -> (f64, f64, f64) {
        let lt = &t.levels[0];
        let (n, h, w) = lt.class_target.dim();
        let c = cls.shape()[1];
        let num_pos = lt.num_positives().max(1) as f64;
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut cls_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut ctr_sum = 0.0;
        for ni in 0..n {
            for yi in 0..h {
                for xi in 0..w {
                    let tc = lt.class_target[[ni, yi, xi]];
                    for ci in 0..c {
                        let x = cls[[ni, ci, yi, xi]];
                        let p = sigmoid(x);
                        if tc == ci as i64 {
                            cls_sum += -FOCAL_ALPHA * (1.0 - p).powi(2) * p.ln();
                        } else {
                            cls_sum += -(1.0 - FOCAL_ALPHA) * p.powi(2) * (1.0 - p).ln();
                        }
                    }
                    if tc != BACKGROUND {
                        let dp: Vec<f64> = (0..4)
                            .map(|k| reg[[ni, k, yi, xi]].clamp(-REG_CLAMP, REG_CLAMP).exp())
                            .collect();
                        let dt: Vec<f64> =
                            (0..4).map(|k| lt.regression_target[[ni, k, yi, xi]]).collect();
                        let iw = dp[0].min(dt[0]) + dp[2].min(dt[2]);
                        let ih = dp[1].min(dt[1]) + dp[3].min(dt[3]);
                        let inter = iw * ih;
                        let ap = (dp[0] + dp[2]) * (dp[1] + dp[3]);
                        let at = (dt[0] + dt[2]) * (dt[1] + dt[3]);
                        let iou = inter / (ap + at - inter + 1e-9);
                        reg_sum += 1.0 - iou;
                        let x = ctr[[ni, 0, yi, xi]];
                        let tt = lt.centerness_target[[ni, yi, xi]];
                        ctr_sum += x.max(0.0) + (1.0 + (-x.abs()).exp()).ln() - x * tt;
                    }
                }
            }
        }
        (cls_sum / num_pos, reg_sum / num_pos, ctr_sum / num_pos)
    }

    #[test]
    fn fixture_matches_scalar_oracle() {
        let t = targets_2x2();
        let cls = rand_arr(&[1, 3, 2, 2], 1, -2.0, 2.0);
        let ctr = rand_arr(&[1, 1, 2, 2], 2, -2.0, 2.0);
        let reg = rand_arr(&[1, 4, 2, 2], 3, -1.0, 1.0);
        let parts = detection_loss(&single_level(cls.clone(), ctr.clone(), reg.clone()), &t)
            .unwrap();
        let (ocls, oreg, octr) = oracle_loss(&cls, &ctr, &reg, &t);
        assert!((parts.classification - ocls).abs() < 1e-10, "cls");
        assert!((parts.regression - oreg).abs() < 1e-10, "reg");
        assert!((parts.centerness - octr).abs() < 1e-10, "ctr");
        assert!(
            (parts.total.item() - (ocls + oreg + octr)).abs() < 1e-10,
            "total"
        );
        assert!(parts.total.item() >= 0.0);
    }

    #[test]
    fn perfect_predictions_drive_loss_to_zero() {
        let t = targets_2x2();
        let lt = &t.levels[0];
        let mut cls = ArrayD::from_elem(IxDyn(&[1, 3, 2, 2]), -40.0);
        let mut ctr = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
        let mut reg = ArrayD::zeros(IxDyn(&[1, 4, 2, 2]));
        for yi in 0..2 {
            for xi in 0..2 {
                let tc = lt.class_target[[0, yi, xi]];
                if tc != BACKGROUND {
                    cls[[0, tc as usize, yi, xi]] = 40.0;
                    let c = lt.centerness_target[[0, yi, xi]];
                    ctr[[0, 0, yi, xi]] = (c / (1.0 - c)).ln().clamp(-30.0, 30.0);
                    for k in 0..4 {
                        reg[[0, k, yi, xi]] = lt.regression_target[[0, k, yi, xi]].ln();
                    }
                }
            }
        }
        let parts = detection_loss(&single_level(cls, ctr, reg), &t).unwrap();
        assert!(parts.regression.abs() < 1e-9);
        assert!(parts.classification < 1e-6);
        // BCE with a soft target bottoms out at the target's entropy
        let entropy: f64 = (0..2)
            .flat_map(|yi| (0..2).map(move |xi| (yi, xi)))
            .filter(|&(yi, xi)| t.levels[0].class_target[[0, yi, xi]] != BACKGROUND)
            .map(|(yi, xi)| {
                let c: f64 = t.levels[0].centerness_target[[0, yi, xi]];
                -(c * c.ln() + (1.0 - c) * (1.0 - c).ln())
            })
            .sum::<f64>()
            / t.num_positives() as f64;
        assert!((parts.centerness - entropy).abs() < 1e-6);
    }

    #[test]
    fn empty_targets_with_low_logits_is_near_zero() {
        let ann = Annotation {
            image_id: "t".into(),
            boxes: vec![],
            labels: vec![],
            difficult: vec![],
        };
        let t = assign_targets(&[ann], &[(2, 2)], &[8], &[(0.0, f64::INFINITY)]);
        let cls = ArrayD::from_elem(IxDyn(&[1, 3, 2, 2]), -40.0);
        let ctr = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
        let reg = ArrayD::zeros(IxDyn(&[1, 4, 2, 2]));
        let parts = detection_loss(&single_level(cls, ctr, reg), &t).unwrap();
        assert_eq!(parts.num_positives, 0);
        assert!(parts.total.item() < 1e-9);
    }

    #[test]
    fn nan_inputs_surface_a_numeric_error() {
        let t = targets_2x2();
        let mut cls = rand_arr(&[1, 3, 2, 2], 4, -1.0, 1.0);
        cls[[0, 0, 0, 0]] = f64::NAN;
        let ctr = rand_arr(&[1, 1, 2, 2], 5, -1.0, 1.0);
        let reg = rand_arr(&[1, 4, 2, 2], 6, -1.0, 1.0);
        assert!(matches!(
            detection_loss(&single_level(cls, ctr, reg), &t),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = targets_2x2();
        let cls0 = rand_arr(&[1, 3, 2, 2], 7, -1.5, 1.5);
        let ctr0 = rand_arr(&[1, 1, 2, 2], 8, -1.5, 1.5);
        let reg0 = rand_arr(&[1, 4, 2, 2], 9, -0.8, 0.8);

        let outs = single_level(cls0.clone(), ctr0.clone(), reg0.clone());
        let parts = detection_loss(&outs, &t).unwrap();
        parts.total.backward();

        let eval = |cls: &ArrayD<f64>, ctr: &ArrayD<f64>, reg: &ArrayD<f64>| -> f64 {
            detection_loss(&single_level(cls.clone(), ctr.clone(), reg.clone()), &t)
                .unwrap()
                .total
                .item()
        };
        let check = |analytic: &ArrayD<f64>, base: &ArrayD<f64>, which: usize| {
            let eps = 1e-6;
            for idx in 0..base.len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus.as_slice_mut().unwrap()[idx] += eps;
                minus.as_slice_mut().unwrap()[idx] -= eps;
                let (fp, fm) = match which {
                    0 => (eval(&plus, &ctr0, &reg0), eval(&minus, &ctr0, &reg0)),
                    1 => (eval(&cls0, &plus, &reg0), eval(&cls0, &minus, &reg0)),
                    _ => (eval(&cls0, &ctr0, &plus), eval(&cls0, &ctr0, &minus)),
                };
                let num = (fp - fm) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (a - num).abs() < 1e-5 * (1.0 + num.abs()),
                    "which={which} idx={idx}: {a} vs {num}"
                );
            }
        };
        let lv = &outs.levels[0];
        check(&lv.class_logits.grad().unwrap(), &cls0, 0);
        check(&lv.centerness_logits.grad().unwrap(), &ctr0, 1);
        check(&lv.box_regression.grad().unwrap(), &reg0, 2);
    }
}
