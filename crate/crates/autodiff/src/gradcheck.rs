//! Central finite-difference verification of tape gradients.

use crate::error::{contract_err, Error, Result};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub probes: usize,
    pub eps: f64,
    pub seed: u64,
    /// Negate the analytic gradient (checker self-test).
    pub flip_backward: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { probes: 20, eps: 1e-5, seed: 0, flip_backward: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<T, F>(f: &mut F, params: &ParamStore<T>) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>, &mut Tape<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(params, &mut tape)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(contract_err("grad_check", format!("model returned shape {:?}", v.shape())));
    }
    let v = v.item().as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check", detail: format!("forward value {v}") });
    }
    Ok(v)
}

/// Compares analytic gradients against `(f(θ+ε) − f(θ−ε)) / 2ε` at
/// `probes` randomly chosen trainable coordinates. A parameter is chosen
/// uniformly first, then a coordinate within it, so small tensors such as
/// biases are probed as often as large weight matrices.
pub fn grad_check<T, F>(
    mut model_fn: F,
    params: &mut ParamStore<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>, &mut Tape<T>) -> Result<Var>,
{
    if opts.probes == 0 {
        return Err(contract_err("grad_check", "probe_count must be at least 1"));
    }
    let mut tape = Tape::new();
    tape.set_flip_gradients(opts.flip_backward);
    let loss = model_fn(params, &mut tape)?;
    let lv = tape.value(loss);
    if !lv.is_scalar() || !lv.all_finite() {
        return Err(Error::NonFinite { op: "grad_check", detail: format!("forward value {lv:?}") });
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    if names.is_empty() {
        return Err(contract_err("grad_check", "no trainable parameters"));
    }
    let mut rng = RngState::new(opts.seed);
    let eps = T::from_f64_lossy(opts.eps);
    let mut probes = Vec::with_capacity(opts.probes);
    for _ in 0..opts.probes {
        let name = &names[rng.below(names.len())];
        let numel = params.value(name)?.numel();
        let index = rng.below(numel);
        let analytic = grads.param(name).map_or(0.0, |g| g.data()[index].as_f64());

        let original = params.value(name)?.data()[index];
        let set = |p: &mut ParamStore<T>, v: T| {
            p.get_mut(name).expect("known param").value.data_mut()[index] = v;
        };
        set(params, original + eps);
        let plus = eval_scalar(&mut model_fn, params);
        set(params, original - eps);
        let minus = eval_scalar(&mut model_fn, params);
        set(params, original);
        let numeric = (plus? - minus?) / (2.0 * opts.eps);

        probes.push(Probe {
            param: name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { probes, max_rel_error })
}
