use crate::error::{Error, Result};

use super::{Graph, ParamStore, Tensor, Var};

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_abs_err: f64,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)`.
    pub rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the recorded gradient of a scalar function against central differences.
///
/// `f` must build a scalar from the given leaf on the given graph. The function
/// is evaluated twice at `x` first; differing results make the report unreliable.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone())?;
        let out = f(&mut g, v)?;
        let value = g.value(out);
        if value.len() != 1 {
            return Err(Error::Contract(format!("gradcheck needs a scalar function, got {:?}", value.shape())));
        }
        Ok(value.item())
    };

    let base = eval(x)?;
    if base.to_bits() != eval(x)?.to_bits() {
        return Err(Error::Unreliable("function is not deterministic".into()));
    }

    let mut g = Graph::new();
    let leaf = g.input(x.clone())?;
    let out = f(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }
    Ok(compare(analytic, numeric, tol))
}

/// Anything that owns a [`ParamStore`].
pub trait Parametrized {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Parametrized for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose difference stencil straddled a non-differentiable point.
    pub kinks: usize,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct ParamGradcheckReport {
    pub params: Vec<ParamCheck>,
    pub rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl ParamGradcheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Central-difference check of every parameter gradient of a scalar loss.
///
/// At most `max_per_param` entries of each parameter are probed, spread
/// evenly. An entry is skipped as a kink when its forward and backward
/// one-sided differences disagree by more than `kink_tol` relative to the
/// parameter's gradient scale; such entries cannot be checked by finite
/// differences, and an incorrect analytic gradient does not cause them.
pub fn gradcheck_params<M, F>(
    model: &mut M,
    f: F,
    eps: f64,
    tol: f64,
    max_per_param: usize,
) -> Result<ParamGradcheckReport>
where
    M: Parametrized,
    F: Fn(&M, &mut Graph) -> Result<Var>,
{
    const KINK_TOL: f64 = 1e-3;
    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(m, &mut g)?;
        Ok(g.value(out).item())
    };
    let base = eval(model)?;
    if base.to_bits() != eval(model)?.to_bits() {
        return Err(Error::Unreliable("loss is not deterministic".into()));
    }
    let mut g = Graph::new();
    let out = f(model, &mut g)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract("gradcheck_params needs a scalar loss".into()));
    }
    let grads = g.backward(out)?.to_buffer(model.params().len());
    drop(g);

    let ids: Vec<_> = model.params().iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    let mut checks = Vec::with_capacity(ids.len());
    for (id, name, len) in ids {
        let analytic_full = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        let count = len.min(max_per_param.max(1));
        let mut analytic = Vec::with_capacity(count);
        let mut numeric = Vec::with_capacity(count);
        let mut one_sided = Vec::with_capacity(count);
        for j in 0..count {
            let i = j * len / count;
            let orig = model.params().value(id).data()[i];
            model.params_mut().value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(model)?;
            model.params_mut().value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(model)?;
            model.params_mut().value_mut(id).data_mut()[i] = orig;
            analytic.push(analytic_full[i]);
            numeric.push((plus - minus) / (2.0 * eps));
            one_sided.push(((plus - base) / eps, (base - minus) / eps));
        }
        let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(0.0, f64::max);
        let mut kept_a = Vec::with_capacity(count);
        let mut kept_n = Vec::with_capacity(count);
        let mut kinks = 0;
        for ((a, n), (fwd, bwd)) in analytic.into_iter().zip(numeric).zip(one_sided) {
            if (fwd - bwd).abs() > KINK_TOL * scale.max(1e-12) {
                kinks += 1;
            } else {
                kept_a.push(a);
                kept_n.push(n);
            }
        }
        let report = compare(kept_a, kept_n, tol);
        checks.push(ParamCheck { name, checked: count, kinks, rel_err: report.rel_err });
    }
    let rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(ParamGradcheckReport { params: checks, rel_err, tol, passed: rel_err < tol })
}

pub(crate) fn compare(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> GradcheckReport {
    let max_abs_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(&numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let rel_err = if scale > 0.0 { max_abs_err / scale } else { max_abs_err };
    GradcheckReport { analytic, numeric, max_abs_err, rel_err, tol, passed: rel_err < tol }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let report = gradcheck(|g, v| { let s = g.mul(v, v)?; g.sum(s) }, &x, DEFAULT_EPS, 1e-6).unwrap();
        assert!((report.analytic[0] - 6.0).abs() < 1e-12);
        assert!((report.numeric[0] - 6.0).abs() < 1e-8);
        assert!(report.passed);
    }

    #[test]
    fn softmax_cross_entropy_chain() {
        let x = Tensor::new(&[5], vec![0.3, -1.2, 0.8, 2.0, -0.4]).unwrap();
        let report = gradcheck(
            |g, v| {
                let p = g.softmax(v, 0)?;
                let w = g.constant(Tensor::new(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0])?)?;
                let s = g.mul(p, w)?;
                let s = g.sum(s)?;
                let ce = g.cross_entropy(v, 0, &[2])?;
                g.add(s, ce)
            },
            &x,
            DEFAULT_EPS,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "rel err {}", report.rel_err);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = gradcheck(|g, v| { let s = g.faulty_square(v)?; g.sum(s) }, &x, DEFAULT_EPS, 1e-6).unwrap();
        assert!(!report.passed);
        assert!(report.rel_err > 0.1);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let err = gradcheck(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let s = g.affine(v, 1.0, calls.get())?;
                g.sum(s)
            },
            &x,
            DEFAULT_EPS,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Unreliable(_)));
    }
}
