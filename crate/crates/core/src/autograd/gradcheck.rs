//! Central finite-difference verification of analytic gradients.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_output<T: Scalar>(tape: &Tape<'_, T>, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item().as_f64())
}

/// Worst coordinate of a check.
#[derive(Clone, Debug)]
pub struct Worst {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest coordinate-wise `relative_error`.
    pub max_rel_error: f64,
    /// Largest per-tensor `‖a - n‖ / max(‖a‖, ‖n‖, 1e-8)`.
    pub max_normwise_error: f64,
    pub worst: Option<Worst>,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn add_tensor(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let mut diff = 0.0;
        let (mut na, mut nn) = (0.0, 0.0);
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            let err = relative_error(a, n);
            if self.worst.is_none() || err > self.max_rel_error {
                self.max_rel_error = err;
                self.worst = Some(Worst {
                    tensor: name.to_string(),
                    index: i,
                    analytic: a,
                    numeric: n,
                });
            }
        }
        let normwise = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8);
        self.max_normwise_error = self.max_normwise_error.max(normwise);
        self.coordinates += analytic.len();
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.clone();
        }
        self.max_normwise_error = self.max_normwise_error.max(other.max_normwise_error);
        self.coordinates += other.coordinates;
    }
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// of step `h`.
pub fn check_gradient<T, F>(params: &ParamStore<T>, f: F, x: &Tensor<T>, h: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>, Var) -> Result<Var>,
{
    if !x.is_finite() {
        return Err(Error::contract("gradient check input must be finite"));
    }
    let mut tape = Tape::new(params);
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let y = f(&mut tape, xv)?;
    scalar_output(&tape, y)?;
    tape.backward(y)?;
    let analytic: Vec<f64> = tape.grad(xv).iter().map(|g| g.as_f64()).collect();

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new(params);
        let xv = tape.leaf(probe);
        let y = f(&mut tape, xv)?;
        scalar_output(&tape, y)
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += T::of(h);
        let mut minus = x.clone();
        minus.data_mut()[i] -= T::of(h);
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    let mut report = GradCheckReport::default();
    report.add_tensor("input", &analytic, &numeric);
    Ok(report)
}

/// Finite-difference check of every coordinate of every parameter in `store`
/// for the scalar built by `f`.
pub fn check_param_gradients<T, F>(store: &mut ParamStore<T>, f: F, h: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let y = f(&mut tape)?;
        scalar_output(&tape, y)?;
        tape.backward(y)?;
        let grads = tape.into_gradients();
        store
            .iter()
            .map(|(id, _, t)| {
                grads
                    .to_dense(id, t.numel(), t.cols())
                    .iter()
                    .map(|g| g.as_f64())
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new(store);
        let y = f(&mut tape)?;
        scalar_output(&tape, y)
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let mut numeric = Vec::with_capacity(store.get(id).numel());
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + T::of(h);
            let fp = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - T::of(h);
            let fm = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        let name = store.name(id).to_string();
        report.add_tensor(&name, &analytic[id.index()], &numeric);
    }
    Ok(report)
}
