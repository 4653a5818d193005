//! Finite-difference gradient checks of every layer type, as a table.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fdt::{FdtBlock, FdtSpec, GlobalAttention, RegionalAttention};
use crate::nn::{BoundParams, Conv2d, FeedForward, LayerNorm, ParamBuilder, ParameterStore, ResidualBlock};
use crate::tensor::{grad_check, GradCheckOptions, Graph, Tensor, Var};
use crate::wfen::{Wfd, Wfu, WfenConfig, WfenModel};

/// Scopes accepted by [`run_scope`], in table order.
pub const SCOPES: [&str; 10] = ["conv", "norm", "residual", "ffn", "rsa", "gsa", "fdt", "wfd", "wfu", "model"];

/// Bound for single layers; the full model is allowed [`MODEL_TOLERANCE`].
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Central-difference step for single layers.
const LAYER_EPS: f64 = 1e-5;
/// The full model's loss carries ~1e-12 of roundoff, which a 1e-5 step
/// amplifies past the tolerance on its smallest gradients.
const MODEL_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub scope: String,
    pub max_rel_error: f64,
    pub probes: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Formats rows as an aligned text table.
pub fn format_table(rows: &[GradRow]) -> String {
    let mut s = format!("{:<10} {:>14} {:>8} {:>8} {:>10}  result\n", "scope", "max_rel_error", "probes", "skipped", "tolerance");
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>14.3e} {:>8} {:>8} {:>10.0e}  {}\n",
            r.scope,
            r.max_rel_error,
            r.probes,
            r.skipped,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Casts to f64 and nudges every value so no bias, gain or temperature sits
/// at its special initial value.
fn jitter(store: ParameterStore<f32>, rng: &mut ChaCha8Rng, amount: f64) -> ParameterStore<f64> {
    let mut s = store.cast::<f64>();
    let names: Vec<String> = s.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        let t = s.get(&name).map(|t| t.map(|v| v + rng.random_range(-amount..amount)));
        if let Some(t) = t {
            // shapes are unchanged, so this cannot fail
            let _ = s.set(&name, t);
        }
    }
    s
}

fn probe_layer<F>(
    scope: &str,
    store: ParameterStore<f32>,
    input_shape: &[usize],
    probes: Option<usize>,
    (tolerance, probe_eps): (f64, f64),
    seed: u64,
    layer: F,
) -> Result<GradRow>
where
    F: Fn(&mut Graph<f64>, &BoundParams, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = jitter(store, &mut rng, 0.1);
    let input = store.insert("input", random(input_shape, &mut rng))?;
    let out_shape = {
        let mut g = Graph::new();
        let p = store.bind(&mut g)?;
        let y = layer(&mut g, &p, p[input])?;
        g.value(y)?.shape().to_vec()
    };
    let weights = random(&out_shape, &mut rng);
    let report = grad_check(
        &store,
        |g, p| {
            let y = layer(g, p, p[input])?;
            let r = g.input(weights.clone())?;
            let y = g.mul(y, r)?;
            g.sum(y)
        },
        &GradCheckOptions { max_probes_per_param: probes, seed, probe_eps, ..Default::default() },
    )?;
    Ok(GradRow {
        scope: scope.to_string(),
        max_rel_error: report.max_rel_error,
        probes: report.probes(),
        skipped: report.skipped(),
        tolerance,
    })
}

fn spec(channels: usize, shifted: bool) -> FdtSpec {
    FdtSpec { channels, window: 4, shifted, heads: 2, shuffle: true, ffn_expansion: 2 }
}

/// Runs one scope of the suite (see [`SCOPES`]) in 64-bit arithmetic.
pub fn run_scope(scope: &str, seed: u64) -> Result<GradRow> {
    let mut b = ParamBuilder::new(seed);
    let t = (LAYER_TOLERANCE, LAYER_EPS);
    match scope {
        "conv" => {
            let c1 = Conv2d::new(&mut b, "c1", 3, 4, 3, 2, 1, 1)?;
            let c2 = Conv2d::depthwise3(&mut b, "c2", 4)?;
            let c3 = Conv2d::new(&mut b, "c3", 4, 6, 3, 1, 1, 2)?;
            probe_layer(scope, b.finish(), &[2, 3, 8, 8], Some(24), t, seed, |g, p, x| {
                let y = c1.forward(g, p, x)?;
                let y = c2.forward(g, p, y)?;
                c3.forward(g, p, y)
            })
        }
        "norm" => {
            let n = LayerNorm::new(&mut b, "norm", 5)?;
            probe_layer(scope, b.finish(), &[2, 5, 3, 3], None, t, seed, |g, p, x| n.forward(g, p, x))
        }
        "residual" => {
            let r = ResidualBlock::new(&mut b, "res", 6, 4)?;
            probe_layer(scope, b.finish(), &[1, 6, 5, 5], Some(24), t, seed, |g, p, x| r.forward(g, p, x))
        }
        "ffn" => {
            let f = FeedForward::new(&mut b, "ffn", 4, 2)?;
            probe_layer(scope, b.finish(), &[1, 4, 4, 4], Some(24), t, seed, |g, p, x| f.forward(g, p, x))
        }
        "rsa" => {
            let a = RegionalAttention::new(&mut b, "rsa", 4, 4, true)?;
            probe_layer(scope, b.finish(), &[1, 4, 8, 8], Some(24), t, seed, |g, p, x| a.forward(g, p, x))
        }
        "gsa" => {
            let a = GlobalAttention::new(&mut b, "gsa", 4, 2, true)?;
            probe_layer(scope, b.finish(), &[1, 4, 8, 8], Some(24), t, seed, |g, p, x| a.forward(g, p, x))
        }
        "fdt" => {
            let f = FdtBlock::new(&mut b, "fdt", spec(4, true))?;
            probe_layer(scope, b.finish(), &[1, 4, 8, 8], Some(12), t, seed, |g, p, x| f.forward(g, p, x))
        }
        "wfd" => {
            let w = Wfd::new(&mut b, "wfd", spec(4, false), 8)?;
            probe_layer(scope, b.finish(), &[1, 4, 8, 8], Some(12), t, seed, |g, p, x| w.forward(g, p, x))
        }
        "wfu" => {
            let w = Wfu::new(&mut b, "wfu", 4)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let dec = random(&[1, 4, 4, 4], &mut rng);
            probe_layer(scope, b.finish(), &[1, 4, 8, 8], Some(24), t, seed, |g, p, x| {
                let d = g.input(dec.clone())?;
                w.forward(g, p, x, d)
            })
        }
        "model" => {
            let (model, store) = WfenModel::new(&WfenConfig::tiny(), seed)?;
            probe_layer(scope, store, &[1, 3, 16, 16], Some(2), (MODEL_TOLERANCE, MODEL_EPS), seed, |g, p, x| model.forward(g, p, x))
        }
        other => Err(Error::arg(
            "gradcheck",
            format!("unknown scope `{other}`; valid: all, {}", SCOPES.join(", ")),
        )),
    }
}

/// Runs `scope`, or every scope for `"all"`.
pub fn run(scope: &str, seed: u64) -> Result<Vec<GradRow>> {
    if scope == "all" {
        SCOPES.iter().map(|s| run_scope(s, seed)).collect()
    } else {
        Ok(alloc::vec![run_scope(scope, seed)?])
    }
}
