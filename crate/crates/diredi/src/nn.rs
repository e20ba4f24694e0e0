//! Layers and parameter storage on top of the autograd engine.
//!
//! Every parameter is a named leaf tensor registered in a [`ParamStore`].
//! Layers keep clones of the same leaf handles, so checkpoint loading and
//! optimizer updates through the store are visible to the layers.

use crate::autograd::{batch_norm_eval, batch_norm_train, conv2d, Tensor};
use crate::{Error, Result};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Forward-pass mode. Training mode uses batch statistics in normalization
/// layers and updates their running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter registry. Iteration order is lexicographic by name.
#[derive(Default, Clone)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        let prev = self.map.insert(
            name.to_string(),
            Param { tensor, trainable },
        );
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn num_elements(&self) -> usize {
        self.map.values().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&self) {
        for p in self.map.values() {
            p.tensor.zero_grad();
        }
    }

    /// Overwrite one parameter's values; shape must match.
    pub fn set_value(&self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let p = self
            .map
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        if p.tensor.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: shape {:?} vs {:?}",
                p.tensor.shape(),
                value.shape()
            )));
        }
        p.tensor.set_data(value);
        Ok(())
    }

    /// SHA-256 over names, shapes and values (f32-rounded, little-endian).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.map {
            h.update(name.as_bytes());
            let d = p.tensor.data();
            for &s in d.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in d.iter() {
                h.update((v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Stop gradient tracking on every parameter; forward passes through a
    /// frozen store build no tape.
    pub fn freeze(&self) {
        for p in self.map.values() {
            p.tensor.set_requires_grad(false);
        }
    }

    /// Round every parameter through f32. Keeping weights on the f32 grid
    /// makes the later weight-delta arithmetic exact in f64 and makes
    /// checkpoints lossless.
    pub fn quantize_f32(&self) {
        for p in self.map.values() {
            let q = p.tensor.value().mapv(|v| v as f32 as f64);
            p.tensor.set_data(q);
        }
    }
}

/// Deterministic per-parameter RNG: the stream depends on the global seed
/// and the parameter name, not on registration order.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let out = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&out);
    ChaCha8Rng::from_seed(key)
}

fn kaiming_init(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = param_rng(seed, name);
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller from two uniforms keeps us off rand_distr.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        (z * std) as f32 as f64
    })
}

/// 2-D convolution layer with optional bias.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        seed: u64,
    ) -> Self {
        let wname = format!("{name}.weight");
        let fan_in = in_ch * kernel * kernel;
        let weight = Tensor::leaf(kaiming_init(
            &[out_ch, in_ch, kernel, kernel],
            fan_in,
            seed,
            &wname,
        ));
        store.register(&wname, weight.clone(), true);
        let bias_t = bias.then(|| {
            let bname = format!("{name}.bias");
            let b = Tensor::leaf(ArrayD::zeros(IxDyn(&[out_ch])));
            store.register(&bname, b.clone(), true);
            b
        });
        Conv2d { weight, bias: bias_t, stride, pad }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

/// Batch normalization with running statistics.
///
/// The running mean/variance are registered as non-trainable parameters so
/// they travel with checkpoints and weight sets. Interior mutability lets a
/// training forward pass update them through a shared reference.
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    updates: RefCell<u64>,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Self {
        let gamma = Tensor::leaf(ArrayD::from_elem(IxDyn(&[ch]), 1.0));
        let beta = Tensor::leaf(ArrayD::zeros(IxDyn(&[ch])));
        let running_mean = Tensor::constant(ArrayD::zeros(IxDyn(&[ch])));
        let running_var = Tensor::constant(ArrayD::from_elem(IxDyn(&[ch]), 1.0));
        store.register(&format!("{name}.gamma"), gamma.clone(), true);
        store.register(&format!("{name}.beta"), beta.clone(), true);
        store.register(&format!("{name}.running_mean"), running_mean.clone(), false);
        store.register(&format!("{name}.running_var"), running_var.clone(), false);
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
            updates: RefCell::new(0),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Tensor {
        match mode {
            Mode::Train => {
                let (y, mean, var) = batch_norm_train(x, &self.gamma, &self.beta, self.eps);
                let rm = self.running_mean.value();
                let rv = self.running_var.value();
                let rm1: Array1<f64> = rm.into_dimensionality().unwrap();
                let rv1: Array1<f64> = rv.into_dimensionality().unwrap();
                let m = self.momentum;
                let new_rm = &rm1 * (1.0 - m) + &mean * m;
                let new_rv = &rv1 * (1.0 - m) + &var * m;
                self.running_mean.set_data(new_rm.into_dyn());
                self.running_var.set_data(new_rv.into_dyn());
                *self.updates.borrow_mut() += 1;
                y
            }
            Mode::Eval => {
                let rm: Array1<f64> = self.running_mean.value().into_dimensionality().unwrap();
                let rv: Array1<f64> = self.running_var.value().into_dimensionality().unwrap();
                batch_norm_eval(x, &self.gamma, &self.beta, &rm, &rv, self.eps)
            }
        }
    }
}
