//! 2-D convolution via im2col + GEMM, differentiable w.r.t. input, weight
//! and bias. Batch items are processed in parallel; gradient reduction is
//! done sequentially in batch order so results are bit-reproducible.

use super::Tensor;
use ndarray::{Array2, Array3, ArrayD, ArrayView3, Axis, Ix4, IxDyn};
use rayon::prelude::*;

fn out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn im2col(x: &ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let mut col = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        col[[row, oi * wo + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let mut img = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        img[[ci, ii as usize, jj as usize]] += col[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    img
}

/// `input`: [N, Cin, H, W]; `weight`: [Cout, Cin, k, k]; `bias`: [Cout].
/// Square kernel, symmetric zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let x = input
        .value()
        .into_dimensionality::<Ix4>()
        .expect("conv input must be NCHW");
    let w = weight
        .value()
        .into_dimensionality::<Ix4>()
        .expect("conv weight must be OIKK");
    let (n, cin, h, wid) = x.dim();
    let (cout, cin_w, k, k2) = w.dim();
    assert_eq!(cin, cin_w, "conv channel mismatch");
    assert_eq!(k, k2, "conv kernel must be square");
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(wid, k, stride, pad);

    let w2d = w
        .clone()
        .into_shape_with_order((cout, cin * k * k))
        .unwrap();
    let b = bias.map(|t| t.value());

    let per_item: Vec<Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let col = im2col(&x.index_axis(Axis(0), ni), k, stride, pad);
            let mut out = w2d.dot(&col);
            if let Some(b) = &b {
                for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
                    row += bv;
                }
            }
            out
        })
        .collect();

    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, cout, ho, wo]));
    for (ni, o) in per_item.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), ni).assign(
            &o.into_shape_with_order((cout, ho, wo)).unwrap(),
        );
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();

    Tensor::from_op(
        out,
        parents,
        Box::new(move |gout, parents| {
            let g4 = gout
                .view()
                .into_dimensionality::<Ix4>()
                .expect("conv grad must be NCHW");
            let need_input = parents[0].requires_grad();
            let need_weight = parents[1].requires_grad();

            let partials: Vec<(Option<Array3<f64>>, Option<Array2<f64>>)> = (0..n)
                .into_par_iter()
                .map(|ni| {
                    let g2 = g4
                        .index_axis(Axis(0), ni)
                        .to_owned()
                        .into_shape_with_order((cout, ho * wo))
                        .unwrap();
                    let gin = need_input.then(|| {
                        let gcol = w2d.t().dot(&g2);
                        col2im(&gcol, cin, h, wid, k, stride, pad)
                    });
                    let gw = need_weight.then(|| {
                        let col = im2col(&x.index_axis(Axis(0), ni), k, stride, pad);
                        g2.dot(&col.t())
                    });
                    (gin, gw)
                })
                .collect();

            if need_input {
                let mut gi = ArrayD::<f64>::zeros(IxDyn(&[n, cin, h, wid]));
                for (ni, (gin, _)) in partials.iter().enumerate() {
                    gi.index_axis_mut(Axis(0), ni).assign(gin.as_ref().unwrap());
                }
                parents[0].accumulate_grad(&gi);
            }
            if need_weight {
                let mut gw = Array2::<f64>::zeros((cout, cin * k * k));
                for (_, gwp) in &partials {
                    gw += gwp.as_ref().unwrap();
                }
                let gw = gw
                    .into_shape_with_order((cout, cin, k, k))
                    .unwrap()
                    .into_dyn();
                parents[1].accumulate_grad(&gw);
            }
            if has_bias && parents[2].requires_grad() {
                let mut gb = ndarray::Array1::<f64>::zeros(cout);
                for ni in 0..n {
                    for ci in 0..cout {
                        gb[ci] += g4.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum();
                    }
                }
                parents[2].accumulate_grad(&gb.into_dyn());
            }
        }),
    )
}
