//! Central-difference gradient checking.
//!
//! The reported figure per coordinate is
//! `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)` and the check
//! returns the maximum over all probed coordinates.

use super::{Tape, TensorError, TensorId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

fn scalar_of(tape: &Tape, id: TensorId) -> Result<f64, TensorError> {
    let v = tape.value(id);
    if v.len() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.shape(id).to_vec(),
        });
    }
    Ok(v[0])
}

/// Check the gradient of a scalar-valued graph function of one tensor.
///
/// `build` receives a fresh tape plus the id of the input leaf and must
/// return the id of a scalar output. Returns the maximum relative error over
/// all coordinates of `x`.
pub fn grad_check<F>(
    mut build: F,
    x: &[f64],
    shape: &[usize],
    step: f64,
) -> Result<f64, TensorError>
where
    F: for<'p> FnMut(&mut Tape<'p>, TensorId) -> Result<TensorId, TensorError>,
{
    assert!(step > 0.0, "grad_check step must be positive");
    let report = grad_check_params(
        |tape, ids| build(tape, ids[0]),
        &[(x, shape)],
        step,
        None,
        0,
    )?;
    Ok(report.max_rel_err)
}

/// Gradient check over several input tensors at once (e.g. every parameter
/// array of a model). When `max_coords_per_input` is set, that many
/// coordinates per input are probed, chosen by a seeded shuffle; otherwise
/// every coordinate is probed.
pub fn grad_check_params<F>(
    mut build: F,
    inputs: &[(&[f64], &[usize])],
    step: f64,
    max_coords_per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'p> FnMut(&mut Tape<'p>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    assert!(step > 0.0, "grad_check step must be positive");

    // Analytic gradients from a single reverse pass.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .map(|(v, s)| tape.leaf(v.to_vec(), s.to_vec(), true))
            .collect();
        let loss = build(&mut tape, &ids)?;
        let value = scalar_of(&tape, loss)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        tape.backward(loss)?;
        ids.iter()
            .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(id).len()]))
            .collect()
    };
    if analytic.iter().flatten().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }

    // One forward evaluation at perturbed inputs; all leaves are constants.
    let mut eval = |perturbed: &[Vec<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = perturbed
            .iter()
            .zip(inputs)
            .map(|(v, (_, s))| tape.leaf(v.clone(), s.to_vec(), false))
            .collect();
        let loss = build(&mut tape, &ids)?;
        let value = scalar_of(&tape, loss)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(value)
    };

    let mut work: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    for (pi, (values, _)) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords_per_input {
            Some(limit) if values.len() > limit => {
                let mut all: Vec<usize> = (0..values.len()).collect();
                all.shuffle(&mut rng);
                let mut sel = all[..limit].to_vec();
                sel.sort_unstable();
                sel
            }
            _ => (0..values.len()).collect(),
        };
        for c in coords {
            let orig = work[pi][c];
            work[pi][c] = orig + step;
            let up = eval(&work)?;
            work[pi][c] = orig - step;
            let down = eval(&work)?;
            work[pi][c] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_rel = max_rel.max(rel_err(analytic[pi][c], numeric));
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sum_of_squares_passes_with_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum(sq)
            },
            &x,
            &[10],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "sum of squares grad check err = {err}");
    }

    #[test]
    fn softmax_then_sum_is_constant_with_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            |tape, x| {
                let s = tape.softmax(x, 0)?;
                tape.sum(s)
            },
            &x,
            &[6],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax-sum grad check err = {err}");
    }

    #[test]
    fn sampled_coordinates_cover_requested_count() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64) / 100.0 + 0.01).collect();
        let report = grad_check_params(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                tape.sum(sq)
            },
            &[(&x, &[100usize] as &[usize])],
            1e-5,
            Some(13),
            42,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 13);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn non_finite_function_is_reported() {
        let x = vec![-1.0];
        let err = grad_check(|tape, x| tape.log(x), &x, &[1], 1e-5);
        assert!(matches!(err, Err(TensorError::NonFinite { .. })));
    }
}
