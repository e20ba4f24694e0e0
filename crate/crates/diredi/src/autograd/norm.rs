//! Batch normalization. Training mode is a fused op because the batch
//! statistics depend on the input; eval mode is composed from primitives.

use super::Tensor;
use ndarray::{Array1, ArrayD, Axis, Ix4, IxDyn};

/// Normalize with batch statistics. Returns the output plus the per-channel
/// batch mean and (biased) variance so the caller can update running stats.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, Array1<f64>, Array1<f64>) {
    let xv = x
        .value()
        .into_dimensionality::<Ix4>()
        .expect("batch norm input must be NCHW");
    let (n, c, h, w) = xv.dim();
    let m = (n * h * w) as f64;

    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let ch = xv.index_axis(Axis(1), ci);
        let mu = ch.sum() / m;
        let v = ch.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / m;
        mean[ci] = mu;
        var[ci] = v;
    }

    let g = gamma.value();
    let b = beta.value();
    let mut xhat = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
    for ci in 0..c {
        let inv_s = 1.0 / (var[ci] + eps).sqrt();
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let xh = (xv[[ni, ci, i, j]] - mean[ci]) * inv_s;
                    xhat[[ni, ci, i, j]] = xh;
                    out[[ni, ci, i, j]] = g[[ci]] * xh + b[[ci]];
                }
            }
        }
    }

    let mean_ret = mean.clone();
    let var_ret = var.clone();
    let var_c = var;
    let out_t = Tensor::from_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |gout, parents| {
            let go = gout.view().into_dimensionality::<Ix4>().unwrap();
            let mut dgamma = Array1::<f64>::zeros(c);
            let mut dbeta = Array1::<f64>::zeros(c);
            let mut gsum = Array1::<f64>::zeros(c);
            let mut gxhat_sum = Array1::<f64>::zeros(c);
            for ci in 0..c {
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            let gv = go[[ni, ci, i, j]];
                            let xh = xhat[[ni, ci, i, j]];
                            dgamma[ci] += gv * xh;
                            dbeta[ci] += gv;
                            gsum[ci] += gv;
                            gxhat_sum[ci] += gv * xh;
                        }
                    }
                }
            }
            if parents[0].requires_grad() {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
                for ci in 0..c {
                    let inv_s = 1.0 / (var_c[ci] + eps).sqrt();
                    let k = g[[ci]] * inv_s;
                    let mg = gsum[ci] / m;
                    let mgx = gxhat_sum[ci] / m;
                    for ni in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                let gv = go[[ni, ci, i, j]];
                                let xh = xhat[[ni, ci, i, j]];
                                dx[[ni, ci, i, j]] = k * (gv - mg - xh * mgx);
                            }
                        }
                    }
                }
                parents[0].accumulate_grad(&dx);
            }
            if parents[1].requires_grad() {
                parents[1].accumulate_grad(&dgamma.into_dyn());
            }
            if parents[2].requires_grad() {
                parents[2].accumulate_grad(&dbeta.into_dyn());
            }
        }),
    );
    (out_t, mean_ret, var_ret)
}

/// Normalize with fixed running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
    eps: f64,
) -> Tensor {
    let c = running_mean.len();
    let rm = Tensor::constant(
        running_mean
            .clone()
            .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
            .unwrap(),
    );
    let inv_s = Tensor::constant(
        running_var
            .mapv(|v| 1.0 / (v + eps).sqrt())
            .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
            .unwrap(),
    );
    let g = gamma.reshape(&[1, c, 1, 1]);
    let b = beta.reshape(&[1, c, 1, 1]);
    x.sub(&rm).mul(&inv_s).mul(&g).add(&b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::numeric_grad;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn train_mode_normalizes_per_channel() {
        let x = Tensor::constant(rand_arr(&[3, 2, 4, 4], 1));
        let gamma = Tensor::constant(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let beta = Tensor::constant(ArrayD::zeros(IxDyn(&[2])));
        let (y, mean, var) = batch_norm_train(&x, &gamma, &beta, 1e-5);
        let yv = y.value();
        for ci in 0..2 {
            let ch = yv.index_axis(ndarray::Axis(1), ci);
            let m: f64 = ch.sum() / ch.len() as f64;
            assert!(m.abs() < 1e-10);
        }
        assert_eq!(mean.len(), 2);
        assert!(var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn train_mode_gradients_match_finite_differences() {
        let x0 = rand_arr(&[2, 2, 3, 3], 2);
        let g0 = rand_arr(&[2], 3).mapv(|v| v.abs() + 0.5);
        let b0 = rand_arr(&[2], 4);
        let cw = rand_arr(&[2, 2, 3, 3], 5);

        let run = |xv: &ArrayD<f64>, gv: &ArrayD<f64>, bv: &ArrayD<f64>| -> f64 {
            let (y, _, _) = batch_norm_train(
                &Tensor::constant(xv.clone()),
                &Tensor::constant(gv.clone()),
                &Tensor::constant(bv.clone()),
                1e-5,
            );
            y.mul(&Tensor::constant(cw.clone())).sum_all().item()
        };

        let xt = Tensor::leaf(x0.clone());
        let gt = Tensor::leaf(g0.clone());
        let bt = Tensor::leaf(b0.clone());
        let (y, _, _) = batch_norm_train(&xt, &gt, &bt, 1e-5);
        y.mul(&Tensor::constant(cw.clone())).sum_all().backward();

        let nx = numeric_grad(&|v| run(v, &g0, &b0), &x0, 1e-6);
        for (a, n) in xt.grad().unwrap().iter().zip(nx.iter()) {
            assert!((a - n).abs() < 1e-6, "dx: {a} vs {n}");
        }
        let ng = numeric_grad(&|v| run(&x0, v, &b0), &g0, 1e-6);
        for (a, n) in gt.grad().unwrap().iter().zip(ng.iter()) {
            assert!((a - n).abs() < 1e-6, "dgamma: {a} vs {n}");
        }
        let nb = numeric_grad(&|v| run(&x0, &g0, v), &b0, 1e-6);
        for (a, n) in bt.grad().unwrap().iter().zip(nb.iter()) {
            assert!((a - n).abs() < 1e-6, "dbeta: {a} vs {n}");
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 3.0));
        let gamma = Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let beta = Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let rm = ndarray::Array1::from_elem(1, 1.0);
        let rv = ndarray::Array1::from_elem(1, 4.0);
        let y = batch_norm_eval(&x, &gamma, &beta, &rm, &rv, 0.0);
        // 2 * (3-1)/2 + 0.5 = 2.5
        assert!((y.value()[[0, 0, 0, 0]] - 2.5).abs() < 1e-9);
    }
}
