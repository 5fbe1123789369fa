//! Named parameter store, Adam, and finite-difference gradient checking.

use std::collections::HashMap;

use ndarray::{Array2, Zip};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Ordered collection of named 2-D parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters<F> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Parameters<F> {
    pub fn new() -> Self {
        Parameters {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<F>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.names.len() - 1);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, i: usize) -> &Array2<F> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Array2<F> {
        &mut self.values[i]
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar entries.
    pub fn num_entries(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Parameters<G> {
        Parameters {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| G::c(x.f64()))).collect(),
            index: self.index.clone(),
        }
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor<F>)> {
        self.iter()
            .map(|(n, v)| (n.to_string(), Tensor::from_array2(v)))
            .collect()
    }

    /// Replaces values from `(name, tensor)` pairs; every stored name must be
    /// present with its exact shape, and no unknown names are accepted.
    pub fn load_tensors(&mut self, entries: &[(String, Tensor<F>)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::Contract(format!("unexpected parameter {name}")))?;
            let a = t.to_array2()?;
            if a.dim() != self.values[i].dim() {
                return Err(Error::Contract(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    a.dim(),
                    self.values[i].dim()
                )));
            }
            self.values[i] = a;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the full gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &Parameters<F>, config: AdamConfig) -> Self {
        let zeros = || (0..params.len()).map(|i| Array2::zeros(params.value(i).dim())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Returns the gradient norm before clipping.
pub fn optimizer_step<F: Real>(
    params: &mut Parameters<F>,
    grads: &[Array2<F>],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<f64> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.dim() != params.value(i).dim() {
            return Err(Error::Contract(format!(
                "gradient for {}: shape {:?}, expected {:?}",
                params.name(i),
                g.dim(),
                params.value(i).dim()
            )));
        }
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric {
            context: "gradient norm".into(),
        });
    }
    let cfg = state.config;
    let clip = match cfg.clip_norm {
        Some(c) if norm > c => F::c(c / norm),
        _ => F::one(),
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::c(cfg.beta1), F::c(cfg.beta2));
    let c1 = F::c(1.0 - cfg.beta1.powi(t));
    let c2 = F::c(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (F::c(lr), F::c(cfg.eps));
    for (i, g) in grads.iter().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        Zip::from(params.value_mut(i))
            .and(m)
            .and(v)
            .and(g)
            .for_each(|w, m, v, &g| {
                let g = g * clip;
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            });
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat entry index of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Entry counts above this are checked on a seeded random subsample.
pub const GRAD_CHECK_FULL_LIMIT: usize = 10_000;

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of `f` with central differences.
///
/// `f` returns the scalar value and the parameter gradients at the given
/// parameters. The relative error of an entry is
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<Func>(mut f: Func, params: &Parameters<f64>, eps: f64, seed: u64) -> Result<GradCheckReport>
where
    Func: FnMut(&Parameters<f64>) -> Result<(f64, Vec<Array2<f64>>)>,
{
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Contract("gradient count differs from parameter count".into()));
    }
    let total = params.num_entries();
    let mut slots: Vec<(usize, usize)> = Vec::with_capacity(total);
    for i in 0..params.len() {
        for j in 0..params.value(i).len() {
            slots.push((i, j));
        }
    }
    if total > GRAD_CHECK_FULL_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick: Vec<usize> = sample(&mut rng, total, GRAD_CHECK_FULL_LIMIT).into_vec();
        pick.sort_unstable();
        slots = pick.into_iter().map(|k| slots[k]).collect();
    }
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: slots.len(),
    };
    for (i, j) in slots {
        let orig = work.value(i).as_slice().expect("standard layout")[j];
        work.value_mut(i).as_slice_mut().expect("standard layout")[j] = orig + eps;
        let (fp, _) = f(&work)?;
        work.value_mut(i).as_slice_mut().expect("standard layout")[j] = orig - eps;
        let (fm, _) = f(&work)?;
        work.value_mut(i).as_slice_mut().expect("standard layout")[j] = orig;
        let num = (fp - fm) / (2.0 * eps);
        let a = analytic[i].as_slice().expect("standard layout")[j];
        let err = (a - num).abs() / a.abs().max(num.abs()).max(GRAD_CHECK_FLOOR);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((params.name(i).to_string(), j));
        }
    }
    Ok(report)
}
