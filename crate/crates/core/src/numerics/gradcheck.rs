use super::tape::{BackwardMutation, Tape, Var};
use super::tensor::Tensor;
use super::NumericError;

/// Outcome of comparing taped gradients against central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Compares the gradient of `f` at `params` with central finite differences
/// of step `h`, returning the worst relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh tape with every parameter registered as a trainable
/// leaf (in the order given) and must return a scalar loss.
pub fn grad_check<'a, F>(params: &[Tensor], h: f64, f: F) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var, NumericError>,
{
    grad_check_with_mutation(params, h, None, f)
}

pub fn grad_check_with_mutation<'a, F>(
    params: &[Tensor],
    h: f64,
    mutation: Option<BackwardMutation>,
    f: F,
) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var, NumericError>,
{
    if !(h > 0.0) {
        return Err(NumericError::Shape(format!("finite-difference step must be positive, got {h}")));
    }

    let mut tape = Tape::with_mutation(mutation);
    let vars: Vec<Var> = params.iter().map(|p| tape.param_owned(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(NumericError::NonFinite(format!("objective evaluated to {value}")));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.numel()))
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor]| -> Result<f64, NumericError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.param_owned(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.scalar(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericError::NonFinite(format!("objective evaluated to {v}")))
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = grad[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        checked,
    })
}
