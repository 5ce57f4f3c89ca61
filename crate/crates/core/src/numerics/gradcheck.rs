//! Central-difference verification of reverse-mode gradients.

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub entries: usize,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for every entry of every parameter in `params`.
///
/// The relative error of one entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    for &p in params {
        if !store.is_trainable(p) {
            return Err(Error::Config(format!(
                "parameter {} is frozen; cannot check its gradient",
                store.get(p).name
            )));
        }
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let out = f(&mut tape, store)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::Numerical(format!("function value {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut max_rel: f64 = 0.0;
    let mut entries = 0;
    for &p in params {
        let n = store.value(p).len();
        let analytic: Vec<f64> = grads
            .params()
            .get(p)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient for {}", store.get(p).name)));
        }
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.value(p).data()[j];
            store.value_mut(p).data_mut()[j] = orig + eps;
            let plus = eval(store);
            store.value_mut(p).data_mut()[j] = orig - eps;
            let minus = eval(store);
            store.value_mut(p).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        entries,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0), true).unwrap();
        let r = grad_check(&mut store, &[x], 1e-5, 1e-7, |tape, s| {
            let v = tape.param(s, x);
            tape.mul(v, v)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.entries, 1);
    }

    #[test]
    fn rejects_bad_step_and_frozen() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0), false).unwrap();
        let f = |tape: &mut Tape, s: &ParamStore| Ok(tape.param(s, x));
        assert!(grad_check(&mut store, &[x], 1e-2, 1e-4, f).is_err());
        assert!(grad_check(&mut store, &[x], 1e-5, 1e-4, f).is_err());
    }

    #[test]
    fn non_finite_is_numerical_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0), true).unwrap();
        let r = grad_check(&mut store, &[x], 1e-5, 1e-4, |tape, s| {
            let v = tape.param(s, x);
            Ok(tape.scale(v, f64::INFINITY))
        });
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
