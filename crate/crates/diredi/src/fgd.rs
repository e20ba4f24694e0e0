//! Focal-and-global feature distillation losses: foreground/background
//! masks, spatial/channel attention, the focal distillation term, the
//! GcBlock context module, and the combined per-level feature loss.

use crate::autograd::Tensor;
use crate::data::Annotation;
use crate::nn::param_rng;
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FGDConfig {
    /// Foreground weight (sigma).
    pub sigma_fg: f64,
    /// Background weight (beta).
    pub beta_bg: f64,
    /// Attention-regularization weight (gamma).
    pub gamma_attn: f64,
    /// Global-loss weight (lambda).
    pub lambda_global: f64,
    /// Attention softmax temperature.
    pub temperature: f64,
}

impl Default for FGDConfig {
    fn default() -> Self {
        FGDConfig {
            sigma_fg: 1.6e-3,
            beta_bg: 8e-4,
            gamma_attn: 8e-4,
            lambda_global: 8e-6,
            temperature: 0.5,
        }
    }
}

impl FGDConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_fg < 0.0
            || self.beta_bg < 0.0
            || self.gamma_attn < 0.0
            || self.lambda_global < 0.0
        {
            return Err(Error::Config("distillation weights must be non-negative".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("attention temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Foreground/background masks for one pyramid level.
pub struct FGDMasks {
    /// Binary foreground mask M.
    pub m: Array2<f64>,
    /// Scale mask S: 1/(box footprint) at foreground cells, 0 elsewhere.
    pub s: Array2<f64>,
    /// Inverse binary mask.
    pub m_hat: Array2<f64>,
    /// Inverse scale mask: 1/N_bg at background cells.
    pub s_hat: Array2<f64>,
}

/// A cell is foreground iff its center (in input pixels) falls inside a GT
/// box; a box too small to cover any cell center claims the cell containing
/// its own center. Where boxes overlap, the smallest-area box sets S.
pub fn build_masks(annotation: &Annotation, level_shape: (usize, usize), stride: usize) -> FGDMasks {
    let (h, w) = level_shape;
    let s_f = stride as f64;
    let mut m = Array2::<f64>::zeros((h, w));
    let mut s = Array2::<f64>::zeros((h, w));

    // largest area first so smaller boxes overwrite on overlap
    let mut order: Vec<usize> = (0..annotation.boxes.len()).collect();
    order.sort_by(|&a, &b| {
        annotation.boxes[b]
            .area()
            .partial_cmp(&annotation.boxes[a].area())
            .unwrap()
    });
    for bi in order {
        let b = &annotation.boxes[bi];
        let mut cells: Vec<(usize, usize)> = Vec::new();
        for yi in 0..h {
            for xi in 0..w {
                let px = xi as f64 * s_f + s_f / 2.0;
                let py = yi as f64 * s_f + s_f / 2.0;
                if b.contains(px, py) {
                    cells.push((yi, xi));
                }
            }
        }
        if cells.is_empty() {
            let cx = (((b.x1 + b.x2) / 2.0 / s_f) as usize).min(w.saturating_sub(1));
            let cy = (((b.y1 + b.y2) / 2.0 / s_f) as usize).min(h.saturating_sub(1));
            cells.push((cy, cx));
        }
        let inv = 1.0 / cells.len() as f64;
        for (yi, xi) in cells {
            m[[yi, xi]] = 1.0;
            s[[yi, xi]] = inv;
        }
    }

    let m_hat = m.mapv(|v| 1.0 - v);
    let n_bg = m_hat.sum();
    let s_hat = if n_bg > 0.0 {
        m_hat.mapv(|v| v / n_bg)
    } else {
        Array2::zeros((h, w))
    };
    FGDMasks { m, s, m_hat, s_hat }
}

/// A^s = H*W * softmax over pixels of (channel-mean |F|) / T. Differentiable
/// through `feature` ([C, H, W]); output shape [H, W].
pub fn spatial_attention(feature: &Tensor, temperature: f64) -> Tensor {
    let shape = feature.shape();
    let (h, w) = (shape[1], shape[2]);
    feature
        .abs()
        .mean_axis_keepdim(0)
        .reshape(&[1, h * w])
        .scale(1.0 / temperature)
        .softmax_axis(1)
        .scale((h * w) as f64)
        .reshape(&[h, w])
}

/// A^c = C * softmax over channels of (pixel-mean |F|) / T; output shape [C].
pub fn channel_attention(feature: &Tensor, temperature: f64) -> Tensor {
    let shape = feature.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    feature
        .abs()
        .reshape(&[c, h * w])
        .mean_axis_keepdim(1)
        .scale(1.0 / temperature)
        .softmax_axis(0)
        .scale(c as f64)
        .reshape(&[c])
}

/// Focal distillation term for one level: sigma-weighted foreground SSE and
/// beta-weighted background SSE, both modulated by the teacher's attention
/// maps, plus a gamma-weighted L1 between teacher and student attentions
/// (per-level mean normalization). The teacher feature is detached.
pub fn focal_distill_loss(
    f_t: &Tensor,
    f_s: &Tensor,
    masks: &FGDMasks,
    config: &FGDConfig,
) -> Result<Tensor> {
    if f_t.shape() != f_s.shape() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?} feature shapes",
            f_t.shape(),
            f_s.shape()
        )));
    }
    let shape = f_t.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if masks.m.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} vs level {:?}",
            masks.m.dim(),
            (h, w)
        )));
    }
    let f_t = f_t.detach();
    let at_s = spatial_attention(&f_t, config.temperature);
    let at_c = channel_attention(&f_t, config.temperature);
    let as_s = spatial_attention(f_s, config.temperature);
    let as_c = channel_attention(f_s, config.temperature);

    // teacher attentions are constants; fold them into the pixel weights
    let at_s_v = at_s.value();
    let at_c_v = at_c.value();
    let mut fg_w = ArrayD::<f64>::zeros(IxDyn(&[1, h, w]));
    let mut bg_w = ArrayD::<f64>::zeros(IxDyn(&[1, h, w]));
    for yi in 0..h {
        for xi in 0..w {
            let a = at_s_v[[yi, xi]];
            fg_w[[0, yi, xi]] = masks.m[[yi, xi]] * masks.s[[yi, xi]] * a;
            bg_w[[0, yi, xi]] = masks.m_hat[[yi, xi]] * masks.s_hat[[yi, xi]] * a;
        }
    }
    let ch_w = Tensor::constant(at_c_v.into_shape_with_order(IxDyn(&[c, 1, 1])).unwrap());
    let diff_sq = f_t.sub(f_s).square().mul(&ch_w);
    let fg = diff_sq.mul(&Tensor::constant(fg_w)).sum_all();
    let bg = diff_sq.mul(&Tensor::constant(bg_w)).sum_all();

    let attn_l1 = at_s
        .sub(&as_s)
        .abs()
        .mean_all()
        .add(&at_c.sub(&as_c).abs().mean_all());

    Ok(fg
        .scale(config.sigma_fg)
        .add(&bg.scale(config.beta_bg))
        .add(&attn_l1.scale(config.gamma_attn)))
}

/// Parameters of one GcBlock: context conv W_k (C->1), bottleneck W_1
/// (C->C/2), layer norm, W_2 (C/2->C). Fresh per distillation run, shared
/// between the teacher and student branches, never serialized.
pub struct GcBlockParams {
    pub channels: usize,
    wk: Tensor,
    w1: Tensor,
    ln_gamma: Tensor,
    ln_beta: Tensor,
    w2: Tensor,
}

impl GcBlockParams {
    pub fn new(channels: usize, seed: u64) -> Self {
        assert!(channels >= 2, "GcBlock needs at least 2 channels");
        let c2 = channels / 2;
        let init = |name: &str, rows: usize, cols: usize| -> Tensor {
            let std = (2.0 / cols as f64).sqrt();
            let mut rng = param_rng(seed, &format!("gc.{name}"));
            Tensor::leaf(ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                (z * std) as f32 as f64
            }))
        };
        GcBlockParams {
            channels,
            wk: init("wk", 1, channels),
            w1: init("w1", c2, channels),
            ln_gamma: Tensor::leaf(ArrayD::from_elem(IxDyn(&[c2, 1]), 1.0)),
            ln_beta: Tensor::leaf(ArrayD::zeros(IxDyn(&[c2, 1]))),
            // zero-initialized last projection: the block starts as identity
            w2: Tensor::leaf(ArrayD::zeros(IxDyn(&[channels, c2]))),
        }
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        vec![
            self.wk.clone(),
            self.w1.clone(),
            self.ln_gamma.clone(),
            self.ln_beta.clone(),
            self.w2.clone(),
        ]
    }
}

/// G(F) = F + W_2(ReLU(LN(W_1(attention-pooled context)))) with the pooling
/// softmax taken over the level's pixels. Input and output are [C, H, W].
pub fn gc_block(feature: &Tensor, params: &GcBlockParams) -> Tensor {
    let shape = feature.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(c, params.channels, "GcBlock channel mismatch");
    let np = h * w;
    let f2 = feature.reshape(&[c, np]);
    let attn = params.wk.matmul(&f2).softmax_axis(1); // [1, Np]
    let pooled = f2.matmul(&attn.reshape(&[np, 1])); // [C, 1]
    let z = params.w1.matmul(&pooled); // [C/2, 1]
    let mean = z.mean_axis_keepdim(0);
    let centered = z.sub(&mean);
    let var = centered.square().mean_axis_keepdim(0);
    let normed = centered
        .div(&var.add_scalar(1e-5).sqrt())
        .mul(&params.ln_gamma)
        .add(&params.ln_beta);
    let delta = params.w2.matmul(&normed.relu()); // [C, 1]
    f2.add(&delta).reshape(&[c, h, w])
}

/// lambda * sum((G(F_T) - G(f_S))^2); the teacher side is detached but the
/// shared GcBlock parameters still learn through the student branch.
pub fn global_distill_loss(
    f_t: &Tensor,
    f_s: &Tensor,
    params: &GcBlockParams,
    lambda_global: f64,
) -> Result<Tensor> {
    if f_t.shape() != f_s.shape() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?} feature shapes",
            f_t.shape(),
            f_s.shape()
        )));
    }
    let gt = gc_block(&f_t.detach(), params);
    let gs = gc_block(f_s, params);
    Ok(gt.sub(&gs).square().sum_all().scale(lambda_global))
}

/// Learned 1x1 adaptor mapping student neck channels onto the teacher's
/// when the two configs disagree; trained with the student, then discarded.
pub struct ChannelAdaptor {
    pub weight: Tensor,
    pub bias: Tensor,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ChannelAdaptor {
    pub fn new(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        let std = (2.0 / in_channels as f64).sqrt();
        let mut rng = param_rng(seed, "fgd.adaptor");
        let weight = Tensor::leaf(ArrayD::from_shape_fn(
            IxDyn(&[out_channels, in_channels]),
            |_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                (z * std) as f32 as f64
            },
        ));
        let bias = Tensor::leaf(ArrayD::zeros(IxDyn(&[out_channels, 1])));
        ChannelAdaptor { weight, bias, in_channels, out_channels }
    }

    pub fn apply(&self, feature: &Tensor) -> Tensor {
        let shape = feature.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(c, self.in_channels, "adaptor channel mismatch");
        self.weight
            .matmul(&feature.reshape(&[c, h * w]))
            .add(&self.bias)
            .reshape(&[self.out_channels, h, w])
    }

    pub fn trainable(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Combined per-image feature distillation loss: sum over pyramid levels of
/// focal + global terms. `pyramid_t`/`pyramid_s` are per-level [C, H, W]
/// tensors aligned with `strides`.
pub fn feature_distill_loss(
    pyramid_t: &[(usize, Tensor)],
    pyramid_s: &[(usize, Tensor)],
    annotation: &Annotation,
    config: &FGDConfig,
    gc_params: &GcBlockParams,
    adaptor: Option<&ChannelAdaptor>,
) -> Result<Tensor> {
    config.validate()?;
    if pyramid_t.len() != pyramid_s.len() {
        return Err(Error::Shape(format!(
            "{} teacher levels vs {} student levels",
            pyramid_t.len(),
            pyramid_s.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for ((stride_t, f_t), (stride_s, f_s)) in pyramid_t.iter().zip(pyramid_s) {
        if stride_t != stride_s {
            return Err(Error::Shape(format!(
                "stride mismatch: {stride_t} vs {stride_s}"
            )));
        }
        let f_s = match adaptor {
            Some(a) => a.apply(f_s),
            None => f_s.clone(),
        };
        let shape = f_t.shape();
        let masks = build_masks(annotation, (shape[1], shape[2]), *stride_t);
        let focal = focal_distill_loss(f_t, &f_s, &masks, config)?;
        let global = global_distill_loss(f_t, &f_s, gc_params, config.lambda_global)?;
        let level = focal.add(&global);
        total = Some(match total {
            Some(t) => t.add(&level),
            None => level,
        });
    }
    total.ok_or_else(|| Error::Shape("empty feature pyramid".into()))
}
