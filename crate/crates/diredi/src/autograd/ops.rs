//! Elementwise, reduction, and shape primitives with backward rules.

use super::{broadcast_shape, reduce_to_shape, Tensor};
use ndarray::{ArrayD, Axis, Ix2, IxDyn, Zip};

fn binary_elementwise(
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    dfa: fn(f64, f64) -> f64,
    dfb: fn(f64, f64) -> f64,
) -> Tensor {
    let a_arr = a.value();
    let b_arr = b.value();
    let shape = broadcast_shape(a_arr.shape(), b_arr.shape());
    let av = a_arr.broadcast(IxDyn(&shape)).expect("broadcast a");
    let bv = b_arr.broadcast(IxDyn(&shape)).expect("broadcast b");
    let out = Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y));
    let (sa, sb) = (a_arr.shape().to_vec(), b_arr.shape().to_vec());
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |gout, parents| {
            let av = a_arr.broadcast(IxDyn(gout.shape())).unwrap();
            let bv = b_arr.broadcast(IxDyn(gout.shape())).unwrap();
            if parents[0].requires_grad() {
                let ga = Zip::from(gout)
                    .and(&av)
                    .and(&bv)
                    .map_collect(|&g, &x, &y| g * dfa(x, y));
                parents[0].accumulate_grad(&reduce_to_shape(&ga, &sa));
            }
            if parents[1].requires_grad() {
                let gb = Zip::from(gout)
                    .and(&av)
                    .and(&bv)
                    .map_collect(|&g, &x, &y| g * dfb(x, y));
                parents[1].accumulate_grad(&reduce_to_shape(&gb, &sb));
            }
        }),
    )
}

fn unary_elementwise(a: &Tensor, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Tensor {
    let a_arr = a.value();
    let out = a_arr.mapv(f);
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |gout, parents| {
            let ga = Zip::from(gout).and(&a_arr).map_collect(|&g, &x| g * df(x));
            parents[0].accumulate_grad(&ga);
        }),
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary_elementwise(self, other, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary_elementwise(self, other, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary_elementwise(self, other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary_elementwise(
            self,
            other,
            |x, y| x / y,
            |_, y| 1.0 / y,
            |x, y| -x / (y * y),
        )
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Tensor {
        binary_elementwise(
            self,
            other,
            f64::min,
            |x, y| if x <= y { 1.0 } else { 0.0 },
            |x, y| if x > y { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Tensor {
        binary_elementwise(
            self,
            other,
            f64::max,
            |x, y| if x >= y { 1.0 } else { 0.0 },
            |x, y| if x < y { 1.0 } else { 0.0 },
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let a_arr = self.value();
        let out = a_arr.mapv(|x| x * c);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |gout, parents| {
                parents[0].accumulate_grad(&gout.mapv(|g| g * c));
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.value().mapv(|x| x + c);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |gout, parents| {
                parents[0].accumulate_grad(gout);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        unary_elementwise(self, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        unary_elementwise(self, f64::exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        unary_elementwise(self, f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary_elementwise(self, f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn square(&self) -> Tensor {
        unary_elementwise(self, |x| x * x, |x| 2.0 * x)
    }

    pub fn abs(&self) -> Tensor {
        unary_elementwise(self, f64::abs, f64::signum)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_elementwise(self, sigmoid_s, |x| {
            let s = sigmoid_s(x);
            s * (1.0 - s)
        })
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&self) -> Tensor {
        unary_elementwise(self, softplus_s, sigmoid_s)
    }

    /// Clamp with pass-through gradient inside the interval, zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let a_arr = self.value();
        let out = a_arr.mapv(|x| x.clamp(lo, hi));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |gout, parents| {
                let ga = Zip::from(gout)
                    .and(&a_arr)
                    .map_collect(|&g, &x| if x >= lo && x <= hi { g } else { 0.0 });
                parents[0].accumulate_grad(&ga);
            }),
        )
    }

    /// Sum of all elements, producing a 0-d tensor.
    pub fn sum_all(&self) -> Tensor {
        let shape = self.shape();
        let out = ArrayD::from_elem(IxDyn(&[]), self.data().sum());
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |gout, parents| {
                let g = gout.iter().next().copied().unwrap_or(0.0);
                parents[0].accumulate_grad(&ArrayD::from_elem(IxDyn(&shape), g));
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over one axis, keeping it as size 1.
    pub fn sum_axis_keepdim(&self, axis: usize) -> Tensor {
        let in_shape = self.shape();
        let out = self.data().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |gout, parents| {
                let g = gout.broadcast(IxDyn(&in_shape)).unwrap().to_owned();
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    pub fn mean_axis_keepdim(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis_keepdim(axis).scale(1.0 / n)
    }

    /// Softmax along one axis (numerically stabilized).
    pub fn softmax_axis(&self, axis: usize) -> Tensor {
        let x = self.value();
        let mut out = x.clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in lane.iter_mut() {
                *v /= z;
            }
        }
        let saved = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |gout, parents| {
                // dx = s * (g - sum(g * s))
                let mut ga = ArrayD::zeros(saved.raw_dim());
                Zip::from(ga.lanes_mut(Axis(axis)))
                    .and(saved.lanes(Axis(axis)))
                    .and(gout.lanes(Axis(axis)))
                    .for_each(|mut gl, sl, gol| {
                        let dot: f64 = sl.iter().zip(gol.iter()).map(|(&s, &g)| s * g).sum();
                        for ((gv, &s), &g) in gl.iter_mut().zip(sl.iter()).zip(gol.iter()) {
                            *gv = s * (g - dot);
                        }
                    });
                parents[0].accumulate_grad(&ga);
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let old = self.shape();
        let out = self
            .value()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |gout, parents| {
                let g = gout
                    .clone()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape grad");
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    /// 2-D matrix product: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self
            .value()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let b = other
            .value()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        let out = a.dot(&b).into_dyn();
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |gout, parents| {
                let g = gout.clone().into_dimensionality::<Ix2>().unwrap();
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(&g.dot(&b.t()).into_dyn());
                }
                if parents[1].requires_grad() {
                    parents[1].accumulate_grad(&a.t().dot(&g).into_dyn());
                }
            }),
        )
    }

    /// Select one item along axis 0 (e.g. one image out of a batch).
    pub fn index_axis0(&self, idx: usize) -> Tensor {
        let full_shape = self.shape();
        let out = self.data().index_axis(Axis(0), idx).to_owned();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |gout, parents| {
                let mut g = ArrayD::zeros(IxDyn(&full_shape));
                g.index_axis_mut(Axis(0), idx).assign(gout);
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    /// Select one channel of an NCHW tensor, keeping the channel axis
    /// (output [N, 1, H, W]).
    pub fn index_channel(&self, idx: usize) -> Tensor {
        let full_shape = self.shape();
        assert_eq!(full_shape.len(), 4, "index_channel expects NCHW");
        let out = self
            .data()
            .index_axis(Axis(1), idx)
            .to_owned()
            .insert_axis(Axis(1));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |gout, parents| {
                let mut g = ArrayD::zeros(IxDyn(&full_shape));
                g.index_axis_mut(Axis(1), idx)
                    .assign(&gout.index_axis(Axis(1), 0));
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample_nearest_2x(&self) -> Tensor {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample expects NCHW");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        for bi in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = x[[bi, ci, i, j]];
                        out[[bi, ci, 2 * i, 2 * j]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        out[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |gout, parents| {
                let mut g = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                for bi in 0..n {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                g[[bi, ci, i, j]] = gout[[bi, ci, 2 * i, 2 * j]]
                                    + gout[[bi, ci, 2 * i + 1, 2 * j]]
                                    + gout[[bi, ci, 2 * i, 2 * j + 1]]
                                    + gout[[bi, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                parents[0].accumulate_grad(&g);
            }),
        )
    }
}

pub(crate) fn sigmoid_s(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_s(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use crate::autograd::gradcheck::check;
    use crate::autograd::Tensor;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x = rand_arr(&[3, 4], 1);
        let cases: Vec<(&str, Box<dyn Fn(&Tensor) -> Tensor>)> = vec![
            ("exp", Box::new(|t: &Tensor| t.exp().sum_all())),
            ("sigmoid", Box::new(|t: &Tensor| t.sigmoid().sum_all())),
            ("softplus", Box::new(|t: &Tensor| t.softplus().sum_all())),
            ("square", Box::new(|t: &Tensor| t.square().sum_all())),
            ("scale", Box::new(|t: &Tensor| t.scale(3.5).sum_all())),
            (
                "mul_self",
                Box::new(|t: &Tensor| t.mul(&t.add_scalar(1.0)).sum_all()),
            ),
            (
                "softmax",
                Box::new(|t: &Tensor| {
                    // weight by a constant so the softmax gradient is nontrivial
                    let c = Tensor::constant(rand_arr(&[3, 4], 9));
                    t.softmax_axis(1).mul(&c).sum_all()
                }),
            ),
            (
                "div",
                Box::new(|t: &Tensor| {
                    let c = Tensor::constant(rand_arr(&[3, 4], 5).mapv(|v| v.abs() + 1.0));
                    t.div(&c).sum_all()
                }),
            ),
            (
                "minmax",
                Box::new(|t: &Tensor| {
                    let c = Tensor::constant(rand_arr(&[3, 4], 7));
                    t.minimum(&c).add(&t.maximum(&c)).sum_all()
                }),
            ),
        ];
        for (name, f) in &cases {
            let err = check(f.as_ref(), &x, 1e-6);
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn broadcast_gradients() {
        // (3,4) * (4,) and (3,1) + (3,4)
        let x = rand_arr(&[4], 2);
        let err = check(
            &|t: &Tensor| {
                let c = Tensor::constant(rand_arr(&[3, 4], 3));
                c.mul(t).sum_all()
            },
            &x,
            1e-6,
        );
        assert!(err < 1e-6, "broadcast mul: {err}");

        let x2 = rand_arr(&[3, 1], 4);
        let err2 = check(
            &|t: &Tensor| {
                let c = Tensor::constant(rand_arr(&[3, 4], 5));
                c.add(t).square().sum_all()
            },
            &x2,
            1e-6,
        );
        assert!(err2 < 1e-6, "broadcast add: {err2}");
    }

    #[test]
    fn reduction_reshape_matmul_gradients() {
        let x = rand_arr(&[2, 6], 6);
        let err = check(
            &|t: &Tensor| {
                let w = Tensor::constant(rand_arr(&[6, 3], 7));
                t.matmul(&w).square().sum_all()
            },
            &x,
            1e-6,
        );
        assert!(err < 1e-6, "matmul: {err}");

        let err2 = check(
            &|t: &Tensor| t.reshape(&[3, 4]).sum_axis_keepdim(0).square().sum_all(),
            &rand_arr(&[2, 6], 8),
            1e-6,
        );
        assert!(err2 < 1e-6, "reshape+sum_axis: {err2}");
    }

    #[test]
    fn upsample_and_index_gradients() {
        let x = rand_arr(&[2, 3, 2, 2], 10);
        let err = check(
            &|t: &Tensor| {
                let c = Tensor::constant(rand_arr(&[2, 3, 4, 4], 11));
                t.upsample_nearest_2x().mul(&c).sum_all()
            },
            &x,
            1e-6,
        );
        assert!(err < 1e-6, "upsample: {err}");

        let err2 = check(
            &|t: &Tensor| t.index_axis0(1).square().sum_all(),
            &rand_arr(&[3, 2, 2], 12),
            1e-6,
        );
        assert!(err2 < 1e-6, "index_axis0: {err2}");

        let err3 = check(
            &|t: &Tensor| t.index_channel(1).square().sum_all(),
            &rand_arr(&[2, 3, 2, 2], 14),
            1e-6,
        );
        assert!(err3 < 1e-6, "index_channel: {err3}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let leaf = Tensor::leaf(rand_arr(&[2, 2], 13));
        let out = leaf.detach().square().sum_all();
        assert!(!out.requires_grad());
    }

    #[test]
    fn grad_accumulates_across_backward_calls() {
        let leaf = Tensor::leaf(ArrayD::from_elem(IxDyn(&[2]), 1.5));
        for _ in 0..2 {
            let out = leaf.square().sum_all();
            out.backward();
        }
        let g = leaf.grad().unwrap();
        assert!((g[[0]] - 6.0).abs() < 1e-12);
    }
}
