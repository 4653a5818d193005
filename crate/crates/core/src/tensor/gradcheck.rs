use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundParams, ParameterStore};

/// Each retry divides the step by this factor.
const RETRY_SHRINK: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub probe_eps: f64,
    /// Probe at most this many coordinates per parameter (chosen at random), or all when `None`.
    pub max_probes_per_param: Option<usize>,
    pub seed: u64,
    /// Smaller steps tried when a probe straddles a ReLU/abs kink.
    pub kink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { probe_eps: 1e-5, max_probes_per_param: None, seed: 0, kink_retries: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// Coordinates compared.
    pub probes: usize,
    /// Coordinates left out because every step tried crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Flat index, analytic and numeric derivative of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn probes(&self) -> usize {
        self.params.iter().map(|p| p.probes).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, coordinate by coordinate.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, 1e-12)`.
/// A probe whose `θ±ε` evaluations change the sign pattern of any ReLU or
/// abs input (see [`Graph::kink_signature`]) is retried with a smaller step;
/// coordinates that never probe cleanly are counted as skipped.
pub fn grad_check<F>(store: &ParameterStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g)?;
    let out = f(&mut g, &bound)?;
    let base_signature = g.kink_signature();
    let mut grads = g.backward(out)?;

    let eval = |s: &ParameterStore<f64>, name: &str| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let bound = s.bind(&mut g)?;
        let v = f(&mut g, &bound).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteProbe(name.to_string()),
            other => other,
        })?;
        let t = g.value(v)?;
        let y = t.item().ok_or_else(|| Error::NonScalarLoss(t.shape().to_vec()))?;
        if !y.is_finite() {
            return Err(Error::NonFiniteProbe(name.to_string()));
        }
        Ok((y, g.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for (id, name, tensor) in store.iter() {
        let analytic = grads.take(bound[id]).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        let n = tensor.numel();
        let coords: Vec<usize> = match opts.max_probes_per_param {
            Some(k) if k < n => {
                let mut c = index::sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck { name: name.to_string(), probes: 0, skipped: 0, max_rel_error: 0.0, worst: None };
        for &i in &coords {
            let orig = tensor.data()[i];
            let mut eps = opts.probe_eps;
            let mut numeric = None;
            for _ in 0..=opts.kink_retries {
                work.tensor_mut(id).data_mut()[i] = orig + eps;
                let (fp, sp) = eval(&work, name)?;
                work.tensor_mut(id).data_mut()[i] = orig - eps;
                let (fm, sm) = eval(&work, name)?;
                work.tensor_mut(id).data_mut()[i] = orig;
                if sp == base_signature && sm == base_signature {
                    numeric = Some((fp - fm) / (2.0 * eps));
                    break;
                }
                eps /= RETRY_SHRINK;
            }
            let Some(numeric) = numeric else {
                check.skipped += 1;
                continue;
            };
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if check.worst.is_none() || rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst = Some((i, a, numeric));
            }
            check.probes += 1;
        }
        params.push(check);
    }
    let max_rel_error = params.iter().fold(0.0f64, |m, p| m.max(p.max_rel_error));
    Ok(GradCheckReport { max_rel_error, params })
}
