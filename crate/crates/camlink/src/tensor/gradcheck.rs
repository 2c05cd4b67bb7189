//! Central finite-difference gradient checking.
//!
//! The checker is an oracle independent of the backward pass: it only needs
//! repeated forward evaluations of the loss under perturbed inputs, so it
//! validates every gradient rule the tape implements.

use super::{DTensor, Tape, TensorId};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a finite-difference sweep over all input elements.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn assert_within(&self, tol: f64) {
        assert!(
            self.max_rel_err <= tol,
            "gradient check failed: max rel err {:.3e} > tol {:.3e} over {} elements",
            self.max_rel_err,
            tol,
            self.checked
        );
    }
}

/// Compares analytic gradients of `build` against central finite differences
/// over every element of every input.
///
/// `build` receives a fresh tape plus one differentiable leaf per input and
/// must return a scalar loss. Relative error uses a 1e-6 denominator floor so
/// near-zero gradient pairs compare on absolute terms.
pub fn check_gradients<F>(inputs: &[DTensor], step: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |tensors: &[DTensor], build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::Contract(
                "gradient check requires a scalar loss".into(),
            ));
        }
        Ok(tape.value(loss).data()[0])
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf gradient populated").to_vec())
        .collect();

    let mut checked = 0;
    let mut max_rel_err: f64 = 0.0;
    let mut work: Vec<DTensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let plus = eval(&work, &mut build)?;
            work[ti].data_mut()[ei] = orig - step;
            let minus = eval(&work, &mut build)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        checked,
        max_rel_err,
    })
}

/// Uniform random tensor in [-1, 1), for randomized gradient checks.
pub fn random_tensor(shape: &[usize], rng: &mut impl rand::Rng) -> DTensor {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    DTensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Finite-difference check over every element of every parameter in a set.
///
/// `build` runs a forward pass against bound parameters and returns a scalar
/// loss; it is re-evaluated under elementwise perturbations of a cloned
/// parameter set and compared to one analytic backward pass.
pub fn check_param_gradients<F>(
    params: &super::ParamSet,
    step: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &super::Binding) -> Result<TensorId>,
{
    let eval = |params: &super::ParamSet, build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let binding = params.bind_all(&mut tape);
        let loss = build(&mut tape, &binding)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let binding = params.bind_all(&mut tape);
    let loss = build(&mut tape, &binding)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract(
            "gradient check requires a scalar loss".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic = binding.grads(&tape)?;

    let mut work = params.clone();
    let paths: Vec<String> = params.paths().map(String::from).collect();
    let mut checked = 0;
    let mut max_rel_err: f64 = 0.0;
    for path in &paths {
        let numel = params.get(path).expect("listed path").data.len();
        for ei in 0..numel {
            let orig = work.get(path).unwrap().data[ei];
            work.get_mut(path).unwrap().data[ei] = orig + step;
            let plus = eval(&work, &mut build)?;
            work.get_mut(path).unwrap().data[ei] = orig - step;
            let minus = eval(&work, &mut build)?;
            work.get_mut(path).unwrap().data[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[path][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        checked,
        max_rel_err,
    })
}
