//! Named parameter containers, initialization, and updates.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, VarId};
use crate::error::{FamError, Result};

/// Named collection of differentiable parameters for one network.
///
/// Iteration order is the lexicographic order of names, which keeps
/// updates, checkpoints, and gradient extraction deterministic.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamSet {
    arrays: BTreeMap<String, Array2<f64>>,
    version: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            arrays: BTreeMap::new(),
            version: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.arrays.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_scalars(&self) -> usize {
        self.arrays.values().map(Array2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays
            .values()
            .all(|a| a.iter().all(|x| x.is_finite()))
    }

    /// Register every array as a differentiable leaf on `tape`.
    pub fn leaves(&self, tape: &mut Tape) -> ParamVars {
        let ids = self
            .arrays
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        ParamVars { ids }
    }

    /// Register every array as a non-differentiable constant (frozen network).
    pub fn constants(&self, tape: &mut Tape) -> ParamVars {
        let ids = self
            .arrays
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        ParamVars { ids }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape leaf ids for one registered [`ParamSet`].
pub struct ParamVars {
    ids: BTreeMap<String, VarId>,
}

impl ParamVars {
    pub fn id(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Extract gradients for every registered parameter.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> GradSet {
        let arrays = self
            .ids
            .iter()
            .map(|(k, &id)| (k.clone(), grads.wrt(tape, id)))
            .collect();
        GradSet { arrays }
    }
}

/// Gradient arrays shape-matched to a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradSet {
    arrays: BTreeMap<String, Array2<f64>>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let arrays = params
            .iter()
            .map(|(k, v)| (k.to_string(), Array2::zeros(v.dim())))
            .collect();
        GradSet { arrays }
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.arrays[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn all_finite(&self) -> bool {
        self.arrays
            .values()
            .all(|a| a.iter().all(|x| x.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.arrays
            .values()
            .map(|a| a.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale gradients so the global L2 norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for a in self.arrays.values_mut() {
                a.mapv_inplace(|x| x * s);
            }
        }
    }

    pub fn add_assign(&mut self, other: &GradSet) {
        for (k, v) in self.arrays.iter_mut() {
            *v += &other.arrays[k];
        }
    }
}

/// Orthogonal initialization via Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let transpose = rows < cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut a = Array2::zeros((n, m));
    a.mapv_inplace(|_: f64| rng.sample(StandardNormal));
    // orthonormalize columns (n >= m)
    for j in 0..m {
        for k in 0..j {
            let proj = a.column(j).dot(&a.column(k));
            let col_k = a.column(k).to_owned();
            a.column_mut(j).zip_mut_with(&col_k, |x, &y| *x -= proj * y);
        }
        let norm = a.column(j).dot(&a.column(j)).sqrt().max(1e-12);
        a.column_mut(j).mapv_inplace(|x| x / norm);
    }
    let a = if transpose { a.t().to_owned() } else { a };
    a * gain
}

/// Adam optimizer state for one [`ParamSet`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: BTreeMap<String, Array2<f64>> = params
            .iter()
            .map(|(k, a)| (k.to_string(), Array2::zeros(a.dim())))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One adaptive update step. Non-finite gradients leave the parameters
    /// untouched and report a numeric error so callers can log and continue.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) -> Result<()> {
        if !grads.all_finite() {
            return Err(FamError::Numeric(
                "non-finite gradient, update skipped".into(),
            ));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            let m = self.m.get_mut(name).expect("adam state matches params");
            let v = self.v.get_mut(name).expect("adam state matches params");
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / b1t;
                    let vhat = v / b2t;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        params.bump_version();
        Ok(())
    }
}

/// Polyak blend: target <- (1 - tau) * target + tau * online.
pub fn soft_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(FamError::Input(format!("tau {tau} outside [0, 1]")));
    }
    for (name, t) in target.iter_mut() {
        let o = online.get(name);
        if t.dim() != o.dim() {
            return Err(FamError::Input(format!("shape mismatch for {name}")));
        }
        t.zip_mut_with(o, |t, &o| *t = (1.0 - tau) * *t + tau * o);
    }
    target.bump_version();
    Ok(())
}
