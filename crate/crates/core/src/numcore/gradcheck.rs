//! Central finite-difference checks of tape gradients.

use super::{ParamStore, Tape, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Number of scalar coordinates compared.
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the reverse-mode gradient of `loss` with respect to every scalar in
/// `store` against `(L(θ + h) − L(θ − h)) / 2h`.
pub fn check_params<F>(store: &ParamStore<f64>, loss: F, h: f64, floor: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    tape.backward_into(l, &mut analytic)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let l = loss(&mut t, s)?;
        Ok(t.value(l).item())
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in store.ids().collect::<Vec<_>>() {
        for i in 0..store.value(id).numel() {
            let x = store.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = x + h;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = x - h;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).grad.data()[i];
            worst = worst.max(rel_error(a, numeric, floor));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn cubic_passes_and_wrong_gradient_is_caught() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("x", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let cubic = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let x = t.param(s, id);
            let x2 = t.mul(x, x)?;
            let x3 = t.mul(x2, x)?;
            Ok(t.sum(x3))
        };
        let ok = check_params(&store, cubic, 1e-5, 1e-6).unwrap();
        assert_eq!(ok.checked, 3);
        assert!(ok.max_rel_error < 1e-8, "{ok:?}");

        // x·x·x recorded but the loss silently uses a constant copy of x once
        let broken = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let x = t.param(s, id);
            let c = t.constant(s.value(id).clone());
            let x2 = t.mul(x, c)?;
            let x3 = t.mul(x2, c)?;
            Ok(t.sum(x3))
        };
        let bad = check_params(&store, broken, 1e-5, 1e-6).unwrap();
        assert!(bad.max_rel_error > 0.5, "{bad:?}");
    }
}
