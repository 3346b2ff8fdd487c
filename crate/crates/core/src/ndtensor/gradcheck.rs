//! Central finite-difference check of tape gradients.

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::TensorError;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// Gradients below this magnitude are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of `f` with central differences of step `h`
/// for every entry of every parameter. `f` must be deterministic.
pub fn gradcheck<T, E, F>(params: &mut ParamSet<T>, f: F, h: f64) -> Result<GradCheck, E>
where
    T: Real,
    E: From<TensorError>,
    F: for<'t> Fn(&'t Tape<T>, &ParamSet<T>) -> Result<Var<'t, T>, E>,
{
    params.zero_grad();
    let tape = Tape::new();
    let loss = f(&tape, params)?;
    tape.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|i| {
            let p = params.by_index(i);
            p.grad()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    params.zero_grad();

    let eval = |params: &ParamSet<T>| -> Result<f64, E> {
        let tape = Tape::new();
        let v = f(&tape, params)?.item().as_f64();
        Ok(v)
    };
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for i in 0..params.len() {
        for k in 0..params.by_index(i).numel() {
            let orig = params.by_index(i).data()[k];
            params.by_index_mut(i).data_mut()[k] = orig + T::of(h);
            let up = eval(params)?;
            params.by_index_mut(i).data_mut()[k] = orig - T::of(h);
            let down = eval(params)?;
            params.by_index_mut(i).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            out.checked += 1;
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = format!("{}[{k}]", params.name_of(i));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Tensor;

    #[test]
    fn quadratic_passes() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::matrix(2, 2, vec![0.3, -0.2, 0.5, 0.1]).unwrap());
        let r = gradcheck(
            &mut p,
            |tape, ps| -> Result<_, TensorError> {
                let w = ps.bind(tape, "w")?;
                Ok(w.matmul(w)?.tanh().sum())
            },
            1e-6,
        )
        .unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
