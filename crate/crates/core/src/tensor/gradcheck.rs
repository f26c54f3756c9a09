//! Central finite-difference gradient checking.
//!
//! Only forward values are used to build the numerical estimate, so a check
//! stays independent of the backward rules it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Result, Tensor, Var};

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn record(&mut self, tensor: usize, index: usize, analytic: f64, numeric: f64) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(Mismatch { tensor, index, analytic, numeric });
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.or(self.worst);
        }
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights,
/// so every output entry contributes to the checked gradient.
pub fn random_projection(g: &mut Graph<'_>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let wv = g.constant(w);
    let p = g.mul(out, wv)?;
    g.sum(p)
}

/// Checks d f / d inputs for a scalar-valued `f`.
pub fn check_inputs<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport::default();
    let mut xs = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[ti].shape());
        let analytic = grads.wrt(*v).unwrap_or(&zero).clone();
        for i in 0..inputs[ti].numel() {
            let orig = xs[ti].data()[i];
            xs[ti].data_mut()[i] = orig + eps;
            let up = eval(&xs)?;
            xs[ti].data_mut()[i] = orig - eps;
            let down = eval(&xs)?;
            xs[ti].data_mut()[i] = orig;
            report.record(ti, i, analytic.data()[i], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Checks d f / d params at the given `(parameter, flat index)` coordinates.
pub fn check_params<F>(store: &mut ParamStore, coords: &[(ParamId, usize)], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic: Vec<f64> = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        let grads = g.backward(out)?;
        coords
            .iter()
            .map(|&(id, i)| grads.param(id).map_or(0.0, |t| t.data()[i]))
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };
    let mut report = GradCheckReport::default();
    for (&(id, i), &a) in coords.iter().zip(&analytic) {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + eps;
        let up = eval(store)?;
        store.value_mut(id).data_mut()[i] = orig - eps;
        let down = eval(store)?;
        store.value_mut(id).data_mut()[i] = orig;
        report.record(id.index(), i, a, (up - down) / (2.0 * eps));
    }
    Ok(report)
}

/// Samples up to `per_param` coordinates from every parameter in the store.
pub fn sample_coords(store: &ParamStore, per_param: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for id in store.ids() {
        let n = store.value(id).numel();
        if n <= per_param {
            out.extend((0..n).map(|i| (id, i)));
        } else {
            out.extend((0..per_param).map(|_| (id, rng.gen_range(0..n))));
        }
    }
    out
}
