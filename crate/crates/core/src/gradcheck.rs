//! Central-difference certification of the analytic gradients.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::model_flops;
use crate::autodiff::{GradFault, Graph};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{dmtnet_forward, param_specs, Ctx};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Evaluates `f` with coordinate `index` of `name` moved by `+h` and `-h`,
/// restoring the parameter afterwards.
fn evaluate_pair<F, V>(f: &mut F, store: &mut ParamStore<f64>, name: &str, index: usize, h: f64) -> Result<(V, V)>
where
    F: FnMut(&ParamStore<f64>) -> Result<V>,
{
    let orig = store.value(name)?.data()[index];
    store.value_mut(name)?.data_mut()[index] = orig + h;
    let plus = f(store);
    store.value_mut(name)?.data_mut()[index] = orig - h;
    let minus = f(store);
    store.value_mut(name)?.data_mut()[index] = orig;
    Ok((plus?, minus?))
}

fn central_difference<F>(f: &mut F, store: &mut ParamStore<f64>, name: &str, index: usize, h: f64) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let (plus, minus) = evaluate_pair(f, store, name, index, h)?;
    if !(plus.is_finite() && minus.is_finite()) {
        return Err(Error::NonFinite(format!("objective is {plus} / {minus} around `{name}`[{index}]")));
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Numeric gradient of `f` at `params` for every coordinate, in store order.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamStore<f64>, h: f64) -> Result<Vec<(String, Tensor<f64>)>>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::arg(format!("step must be positive, got {h}")));
    }
    let mut store = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for e in params.iter() {
        let mut g = Tensor::zeros(e.value.shape().to_vec());
        for i in 0..e.value.len() {
            g.data_mut()[i] = central_difference(&mut f, &mut store, &e.name, i, h)?;
        }
        out.push((e.name.clone(), g));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradInput {
    Random,
    Zero,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Largest relative error that passes.
    pub tolerance: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    /// Upper bound on the floating-point work of the numeric pass.
    pub flop_budget: u128,
    pub input_size: (usize, usize),
    pub input: GradInput,
    /// Perturbs every parameter away from its initializer so no family
    /// sits at an exact zero.
    pub randomize_params: bool,
    pub fault: Option<GradFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            coords_per_param: None,
            flop_budget: 2_000_000_000_000,
            input_size: (8, 8),
            input: GradInput::Random,
            randomize_params: true,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGradCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_abs_analytic: f64,
    pub max_rel_err: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub params: Vec<ParamGradCheck>,
    pub tolerance: f64,
    pub step: f64,
    pub pass: bool,
    pub worst: String,
    pub worst_rel_err: f64,
    /// Last failing tensor in forward order. Gradient errors only flow
    /// toward the inputs, so this is where a faulty backward rule enters.
    pub fault_origin: Option<String>,
    pub coordinates_checked: usize,
}

impl GradReport {
    pub fn to_text(&self) -> String {
        let width = self.params.iter().map(|p| p.name.len()).max().unwrap_or(4).max(9);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>7}  {:>12}  {:>10}", "parameter", "checked", "max |grad|", "max rel");
        for p in &self.params {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7}  {:>12.4e}  {:>10.3e}",
                p.name, p.checked, p.max_abs_analytic, p.max_rel_err
            );
        }
        let _ = writeln!(
            s,
            "{} coordinates, h = {:e}; worst `{}` at {:.3e} (tolerance {:e}): {}",
            self.coordinates_checked,
            self.step,
            self.worst,
            self.worst_rel_err,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        );
        if let Some(origin) = &self.fault_origin {
            let _ = writeln!(s, "last failing parameter in forward order: `{origin}`");
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random::<f64>())
}

/// Compares backpropagated gradients of a scalar function of the network
/// output against central differences on every parameter of a small network, in `f64`.
pub fn grad_check(cfg: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradReport> {
    cfg.validate()?;
    let (h, w) = opts.input_size;
    let specs = param_specs(cfg);
    let coords: usize = specs
        .iter()
        .map(|s| opts.coords_per_param.map_or(s.numel(), |k| k.min(s.numel())))
        .sum();
    let work = 2 * coords as u128 * model_flops(cfg, h, w)?;
    if work > opts.flop_budget {
        return Err(Error::Budget(format!(
            "checking {coords} coordinates needs ~{work} flops, budget is {}",
            opts.flop_budget
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::<f64>::from_specs(&specs, seed)?;
    if opts.randomize_params {
        for (e, spec) in params.iter_mut().zip(&specs) {
            let data = e.value.data_mut().iter_mut();
            match spec.init {
                // Slopes and gains keep their sign and rough size.
                Init::Constant(c) if c != 0.0 => data.for_each(|v| *v *= rng.random_range(0.6..1.4)),
                // Attention-scale weights grow until logits are of order one.
                Init::TruncNormal { .. } => data.for_each(|v| *v += rng.random_range(-0.6..0.6)),
                // Biases and shifts stay at zero; offsets would only inflate
                // activations and with them the rounding noise.
                Init::Zeros if spec.shape.len() == 1 => {}
                _ => data.for_each(|v| *v += rng.random_range(-0.25..0.25)),
            }
        }
    }
    let shape = [1, 3, h, w];
    let (right, left) = match opts.input {
        GradInput::Random => (uniform_tensor(&mut rng, shape), uniform_tensor(&mut rng, shape)),
        GradInput::Zero => (Tensor::zeros(shape), Tensor::zeros(shape)),
    };
    // A fixed random linear functional of the output keeps the objective's
    // own curvature out of the comparison.
    let weights = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));

    let mut graph = Graph::new();
    if let Some(fault) = opts.fault {
        graph = graph.with_fault(fault);
    }
    let ctx = Ctx::new(&graph, &params);
    let (r, l) = (graph.constant(right.clone()), graph.constant(left.clone()));
    let out = dmtnet_forward(&ctx, cfg, &r, &l, None)?;
    let loss = graph.sum(&graph.mul(&out, &graph.constant(weights.clone()))?);
    let grads = graph.backward(&loss)?;

    let mut forward = |store: &ParamStore<f64>| -> Result<Tensor<f64>> {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, store);
        let (r, l) = (g.constant(right.clone()), g.constant(left.clone()));
        let out = dmtnet_forward(&ctx, cfg, &r, &l, None)?.into_tensor();
        if !out.is_finite() {
            return Err(Error::NonFinite("network output during finite differencing".into()));
        }
        Ok(out)
    };
    // The outputs are differenced before weighting, which avoids cancelling
    // two large sums against each other.
    let mut numeric = |store: &mut ParamStore<f64>, name: &str, i: usize| -> Result<f64> {
        let (plus, minus) = evaluate_pair(&mut forward, store, name, i, opts.h)?;
        let delta: f64 = plus.data().iter().zip(minus.data()).zip(weights.data()).map(|((p, m), w)| (p - m) * w).sum();
        Ok(delta / (2.0 * opts.h))
    };

    let mut store = params.clone();
    let mut reports = Vec::with_capacity(specs.len());
    for spec in &specs {
        let n = spec.numel();
        let zeros = Tensor::zeros(spec.shape.clone());
        let analytic = grads.param(&spec.name).unwrap_or(&zeros);
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of `{}`", spec.name)));
        }
        let indices: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => {
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut rep = ParamGradCheck {
            name: spec.name.clone(),
            numel: n,
            checked: indices.len(),
            max_abs_analytic: analytic.max_abs(),
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in indices {
            let num = numeric(&mut store, &spec.name, i)?;
            let err = relative_error(analytic.data()[i], num);
            if err > rep.max_rel_err {
                rep.max_rel_err = err;
                rep.worst_index = i;
                rep.worst_analytic = analytic.data()[i];
                rep.worst_numeric = num;
            }
        }
        reports.push(rep);
    }

    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map(|p| (p.name.clone(), p.max_rel_err))
        .unwrap_or_default();
    let fault_origin = reports.iter().rev().find(|p| p.max_rel_err >= opts.tolerance).map(|p| p.name.clone());
    Ok(GradReport {
        pass: worst.1 < opts.tolerance,
        fault_origin,
        coordinates_checked: reports.iter().map(|p| p.checked).sum(),
        params: reports,
        tolerance: opts.tolerance,
        step: opts.h,
        worst: worst.0,
        worst_rel_err: worst.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamSpec};

    #[test]
    fn quadratic() {
        let mut s = ParamStore::<f64>::new();
        s.insert("theta", Tensor::from_vec([1], vec![3.0]).unwrap()).unwrap();
        let g = finite_diff_grad(|p| Ok(p.value("theta")?.data()[0].powi(2)), &s, 1e-3).unwrap();
        assert!((g[0].1.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let s = ParamStore::<f64>::from_specs(&[ParamSpec::new("a", [4], Init::FanIn { fan_in: 1 })], 0).unwrap();
        let g = finite_diff_grad(|_| Ok(1.5), &s, 1e-5).unwrap();
        assert!(g[0].1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let s = ParamStore::<f64>::from_specs(&[ParamSpec::new("a", [1], Init::Zeros)], 0).unwrap();
        assert!(matches!(finite_diff_grad(|_| Ok(f64::NAN), &s, 1e-5), Err(Error::NonFinite(_))));
        assert!(finite_diff_grad(|_| Ok(0.0), &s, 0.0).is_err());
    }

    #[test]
    fn oversized_config_exceeds_budget() {
        let err = grad_check(&ModelConfig::full(2), 0, &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Budget(_)), "{err}");
    }
}
