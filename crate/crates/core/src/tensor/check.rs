//! Finite-difference gradient checking.

use super::tape::{NodeId, Tape};
use super::{Tensor, TensorError};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, one input tensor at a time.
///
/// Returns the maximum over all entries of
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, TensorError>,
{
    grad_check_multi(
        |tape, ids| f(tape, ids[0]),
        std::slice::from_ref(x),
        h,
    )
}

/// Multi-input variant of [`grad_check`]: every entry of every input is
/// perturbed in turn.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");

    // Analytic gradients in one reverse sweep.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = perturbed
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect();
        let loss = f(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: tape.value(loss).shape().to_vec(),
            });
        }
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err: f64 = 0.0;
    for (ti, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[ti].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let ad = analytic[ti][i];
            let err = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
