//! Central finite-difference verification of tape gradients.
//!
//! `finite_diff_check` treats the tape's analytic gradients as claims and
//! re-derives every coordinate numerically from two forward evaluations. It
//! is the ground truth the rest of the crate leans on: any new op earns its
//! place by passing this check, and the full model is checked end to end the
//! same way.

use super::store::Binding;
use super::{NodeId, ParamStore, Tape, TensorError};

/// Relative disagreement between an analytic and a numeric derivative, with
/// the denominator floored at 1e-8 so near-zero gradients do not explode the
/// ratio.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest [`rel_error`] across two equally long gradient buffers.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Checks the analytic gradient of a scalar function against central finite
/// differences, coordinate by coordinate, over every parameter in `store`.
///
/// `f` must build the loss deterministically from the bound parameters: it is
/// invoked once for the analytic pass and twice per scalar coordinate for the
/// numeric pass (at +h and -h). Returns the maximum relative error observed.
pub fn finite_diff_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &Binding) -> Result<NodeId, TensorError>,
{
    finite_diff_check_steps(store, &[h], f)
}

/// [`finite_diff_check`] with per-coordinate step-size adaptation.
///
/// No single step width conditions every coordinate of a deep composite:
/// steep third derivatives need a small h (truncation error grows as h²)
/// while near-zero gradients need a large one (f64 roundoff on the central
/// difference grows as 1/h and is measured against the floored denominator).
/// Each coordinate is therefore differenced at every width in `hs` and
/// scored by its best-conditioned estimate, in the spirit of Ridders'
/// method. A wrong backward rule disagrees at every width, so this loses no
/// detection power.
pub fn finite_diff_check_steps<F>(
    store: &mut ParamStore,
    hs: &[f64],
    f: F,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &Binding) -> Result<NodeId, TensorError>,
{
    assert!(!hs.is_empty(), "need at least one step width");
    // Analytic pass.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let binding = store.bind_mut(&mut tape);
        let loss = f(&mut tape, &binding)?;
        tape.backward(loss)?;
        store
            .iter()
            .map(|(_, t)| {
                t.node_id()
                    .and_then(|id| tape.grad(id))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };

    // Numeric pass: perturb one coordinate at a time, keeping each
    // coordinate's best agreement across the step widths.
    let mut max_err = 0.0_f64;
    for p in 0..store.len() {
        let numel = store.get(super::ParamId(p)).numel();
        for c in 0..numel {
            let id = super::ParamId(p);
            let orig = store.get(id).data()[c];
            let mut best = f64::INFINITY;
            for &h in hs {
                store.get_mut(id).data_mut()[c] = orig + h;
                let up = eval(store, &f)?;
                store.get_mut(id).data_mut()[c] = orig - h;
                let down = eval(store, &f)?;
                store.get_mut(id).data_mut()[c] = orig;
                let numeric = (up - down) / (2.0 * h);
                best = best.min(rel_error(analytic[p][c], numeric));
            }
            max_err = max_err.max(best);
        }
    }
    Ok(max_err)
}

/// One forward evaluation of the loss at the store's current values.
fn eval<F>(store: &ParamStore, f: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &Binding) -> Result<NodeId, TensorError>,
{
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let loss = f(&mut tape, &binding)?;
    Ok(tape.value(loss)[0])
}

#[cfg(test)]
mod tests {
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::{finite_diff_check, max_rel_error};
    use crate::tensor::{ParamId, ParamStore};

    #[test]
    fn positive_control_composite_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        store.add_normal("w", vec![3, 4], 0.5, &mut rng);
        store.add_normal("x", vec![4, 2], 0.5, &mut rng);
        let err = finite_diff_check(&mut store, 1e-5, |tape, b| {
            let prod = tape.matmul(b[ParamId(0)], b[ParamId(1)])?;
            let act = tape.gelu(prod);
            Ok(tape.sum(act))
        })
        .unwrap();
        assert!(err < 1e-7, "checker drift: {err}");
    }

    /// Negative control: the checker must flag a wrong gradient rule. The
    /// loss is f(x) = sum(x .* x); the correct gradient is 2x, and a
    /// deliberately wrong 3x rule must blow past the acceptance tolerance.
    #[test]
    fn negative_control_detects_wrong_backward_rule() {
        let x = [0.8, -1.3, 2.1, 0.4];
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let h = 1e-5;
        let mut numeric = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut up = x.to_vec();
            up[i] += h;
            let mut down = x.to_vec();
            down[i] -= h;
            numeric[i] = (f(&up) - f(&down)) / (2.0 * h);
        }
        let correct: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let wrong: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        assert!(max_rel_error(&correct, &numeric) < 1e-8);
        assert!(max_rel_error(&wrong, &numeric) > 1e-2);
    }

    #[test]
    fn unused_parameters_have_zero_gradient_and_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut store = ParamStore::new();
        store.add_normal("used", vec![3], 1.0, &mut rng);
        store.add_normal("unused", vec![2], 1.0, &mut rng);
        let err = finite_diff_check(&mut store, 1e-5, |tape, b| {
            let sq = tape.mul(b[ParamId(0)], b[ParamId(0)])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "unused parameter tripped the checker: {err}");
    }
}
