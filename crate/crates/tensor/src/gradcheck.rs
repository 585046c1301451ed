//! Central finite-difference verification of reverse-mode gradients.
//!
//! The check runs entirely in `f64`. A loss is described by a builder closure
//! that records a forward pass on a fresh [`Graph`]; every evaluation uses the
//! same graph seed so dropout masks are reproduced exactly.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Upper bound on coordinates probed per tensor (randomly sampled beyond it).
    pub max_coords: usize,
    pub seed: u64,
    /// Graph mode used for every evaluation.
    pub training: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            max_coords: 24,
            seed: 7,
            training: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric, floor);
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some(Mismatch {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol && self.max_rel_err.is_finite()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compares analytic gradients of a scalar loss against central differences,
/// for every differentiable input and every trainable parameter in `store`.
pub fn check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(cfg.training, cfg.seed);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, store, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new(cfg.training, cfg.seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, store, &vars)?;
    let grads = g.backward(loss)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    grads.accumulate_into(&mut analytic_store);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut report = GradCheckReport::default();
    let h = cfg.step;

    let mut work_inputs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let an = grads.get(v).unwrap_or(&zeros).data().to_vec();
        for i in coords(inputs[k].len(), cfg.max_coords, &mut rng) {
            let orig = work_inputs[k].data()[i];
            work_inputs[k].data_mut()[i] = orig + h;
            let fp = eval(store, &work_inputs)?;
            work_inputs[k].data_mut()[i] = orig - h;
            let fm = eval(store, &work_inputs)?;
            work_inputs[k].data_mut()[i] = orig;
            report.record(&format!("input[{k}]"), i, an[i], (fp - fm) / (2.0 * h), cfg.floor);
        }
    }

    let mut work = store.clone();
    let ids: Vec<_> = store
        .params()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.name.clone(), p.value.len()))
        .collect();
    for (id, name, len) in ids {
        let an = analytic_store.param(id).grad.data().to_vec();
        for i in coords(len, cfg.max_coords, &mut rng) {
            let orig = work.param(id).value.data()[i];
            work.param_mut(id).value.data_mut()[i] = orig + h;
            let fp = eval(&work, inputs)?;
            work.param_mut(id).value.data_mut()[i] = orig - h;
            let fm = eval(&work, inputs)?;
            work.param_mut(id).value.data_mut()[i] = orig;
            report.record(&name, i, an[i], (fp - fm) / (2.0 * h), cfg.floor);
        }
    }
    Ok(report)
}
