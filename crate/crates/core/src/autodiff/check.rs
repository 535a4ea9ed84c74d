use super::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing a tape gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |g_analytic − g_fd| / max(1, |g_fd|)`.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
}

/// Checks the tape gradient of a scalar function against central differences
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
///
/// `f` records its computation on the given tape starting from the leaf for
/// `x` and returns a one-element node.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point.clone());
        let out = f(&mut tape, leaf)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out, &Tensor::ones(tape.value(out).shape()))?;
    let analytic = grads.get(leaf);

    let mut numeric = vec![0.0; x.len()];
    let mut probe = x.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    let numeric = Tensor::new(x.shape(), numeric)?;

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = (a - n).abs() / n.abs().max(1.0);
        if e.is_nan() || e > max_rel_err {
            max_rel_err = e;
            worst_index = i;
            if e.is_nan() {
                break;
            }
        }
    }
    Ok(GradCheck {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}

fn scalar_of(tape: &Tape<f64>, out: NodeId) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Dimension(format!(
            "gradient check needs a scalar output, got shape {:?}",
            v.shape()
        )));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::Evaluation(format!("function returned {s}")));
    }
    Ok(s)
}
