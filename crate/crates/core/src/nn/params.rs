use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{Network, ParamRole};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Xavier,
    He,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    /// Index of the owning layer; tensors of one layer share a group.
    pub group: usize,
    pub role: ParamRole,
    pub value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    fn new(name: String, group: usize, role: ParamRole, value: Tensor) -> Self {
        let n = value.len();
        Self {
            name,
            group,
            role,
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Named parameter tensors plus adaptive-moment optimizer state.
///
/// Every change to the values bumps `version`; a [`super::Tape`] remembers the
/// version it was recorded against so a backward pass over stale parameters
/// is rejected.
#[derive(Debug, Clone)]
pub struct ParamSet {
    params: Vec<Param>,
    step: u64,
    version: u64,
}

impl ParamSet {
    pub fn from_params(params: Vec<(String, usize, ParamRole, Tensor)>) -> Self {
        Self {
            params: params.into_iter().map(|(n, g, r, t)| Param::new(n, g, r, t)).collect(),
            step: 0,
            version: fresh_version(),
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Mutable access to the values; invalidates outstanding tapes.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        self.version = fresh_version();
        &mut self.params[i].value
    }

    /// Sets the named tensors to zero; unknown names are ignored.
    pub fn zero_named(&mut self, names: &[String]) {
        self.version = fresh_version();
        for p in self.params.iter_mut().filter(|p| names.contains(&p.name)) {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Number of distinct parameter groups (layers owning parameters).
    pub fn groups(&self) -> Vec<usize> {
        let mut g: Vec<usize> = self.params.iter().map(|p| p.group).collect();
        g.dedup();
        g
    }

    /// Zeroes first/second moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        for p in &mut self.params {
            p.m.iter_mut().for_each(|v| *v = 0.0);
            p.v.iter_mut().for_each(|v| *v = 0.0);
        }
        self.step = 0;
    }

    /// True when all values are bit-identical (optimizer state ignored).
    pub fn same_values(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

/// Samples initial parameters for `net`. Weight matrices use the chosen
/// scheme; biases and norm shifts start at zero, norm gains at one.
pub fn init_weights<R: Rng + ?Sized>(net: &Network, scheme: InitScheme, rng: &mut R) -> ParamSet {
    let mut out = Vec::new();
    for slot in net.param_slots() {
        let n: usize = slot.shape.iter().product();
        let data = match slot.role {
            ParamRole::Weight { fan_in, fan_out } => {
                let var = match scheme {
                    InitScheme::Xavier => 2.0 / (fan_in + fan_out) as f64,
                    InitScheme::He => 2.0 / fan_in as f64,
                };
                sample_normal(n, var.sqrt(), rng)
            }
            ParamRole::Embedding => sample_normal(n, 1.0, rng),
            ParamRole::Bias | ParamRole::Shift => vec![0.0; n],
            ParamRole::Gain => vec![1.0; n],
        };
        let value = Tensor::new(slot.shape.clone(), data).expect("slot shape");
        out.push((slot.name, slot.group, slot.role, value));
    }
    ParamSet::from_params(out)
}

fn sample_normal<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// One adaptive-moment step (β1 = 0.9, β2 = 0.999, ε = 1e-8, bias-corrected).
/// The set is left untouched when any gradient is non-finite.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    if grads.len() != params.params.len() {
        return Err(Error::LengthMismatch {
            expected: params.params.len(),
            found: grads.len(),
        });
    }
    for (p, g) in params.params.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                expected: p.value.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    params.step += 1;
    let t = params.step as f64;
    let c1 = 1.0 - ADAM_BETA1.powf(t);
    let c2 = 1.0 - ADAM_BETA2.powf(t);
    let (step, inv_c2) = (lr / c1, 1.0 / c2);
    for (p, g) in params.params.iter_mut().zip(grads) {
        let vals = p.value.data_mut();
        for (((w, &gi), m), v) in vals.iter_mut().zip(g.data()).zip(&mut p.m).zip(&mut p.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
            *w -= step * *m / ((*v * inv_c2).sqrt() + ADAM_EPS);
        }
    }
    params.version = fresh_version();
    Ok(())
}
