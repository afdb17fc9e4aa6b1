use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Scales every tape gradient by 1.01 before comparison. Test hook used
    /// to confirm the checker can fail.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-6,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Gradients below this magnitude are compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(loss_fn: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}

/// Compares tape gradients of a scalar loss against central differences
/// `(f(θ+eps) - f(θ-eps)) / (2 eps)` for every element of every parameter.
///
/// `loss_fn` must be deterministic: anything stochastic (dropout masks,
/// region partitions, normalization extrema) has to be fixed by the caller.
/// The loss is re-evaluated at the base point before and after probing and
/// any bitwise difference is reported as an error.
pub fn grad_check<F>(mut loss_fn: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let base = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    drop(tape);

    if evaluate(&mut loss_fn, params)?.to_bits() != base.to_bits() {
        return Err(Error::GradCheck(
            "loss function is not deterministic across evaluations".into(),
        ));
    }

    let fault = if opts.inject_fault { 1.01 } else { 1.0 };
    let mut probe = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].numel());
        let mut worst = 0.0f64;
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            probe[pi].data_mut()[i] = orig + opts.eps;
            let up = evaluate(&mut loss_fn, &probe)?;
            probe[pi].data_mut()[i] = orig - opts.eps;
            let down = evaluate(&mut loss_fn, &probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            worst = worst.max(rel_error(analytic[i] * fault, numeric));
        }
        checks.push(ParamCheck {
            index: pi,
            max_rel_error: worst,
            passed: worst <= opts.tol,
        });
    }

    if evaluate(&mut loss_fn, params)?.to_bits() != base.to_bits() {
        return Err(Error::GradCheck(
            "loss function changed value after probing".into(),
        ));
    }

    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        params: checks,
        passed,
    })
}
