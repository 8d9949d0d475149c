use super::{Trace, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error over every probed entry.
    pub max_rel_error: f64,
    /// Max relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    /// Number of probed entries.
    pub probes: usize,
    /// Analytic and numeric values at the worst entry.
    pub worst: (f64, f64),
    /// Probes whose step was shortened so that both stencil points stay on
    /// the smooth piece containing the base point.
    pub narrowed: usize,
}

/// Times the step is divided by 4 before giving up on finding a stencil
/// that avoids a kink.
const MAX_NARROWING: usize = 8;

/// Relative error used throughout: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(program: &F, params: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Trace, &[Var]) -> Result<Var>,
{
    let mut tr = Trace::new();
    let vars: Vec<Var> = params.iter().map(|p| tr.leaf(p.clone())).collect();
    let out = program(&mut tr, &vars)?;
    let v = tr.value(out);
    if v.numel() != 1 {
        return Err(Error::shape(format!("program output must be scalar, got {:?}", v.shape())));
    }
    Ok((v.item(), tr.branch_signature()))
}

/// Compares reverse-mode gradients of a scalar `program` against central
/// differences with step `eps`, over every entry of every parameter.
/// Returns the max relative error.
///
/// When a stencil point would cross a max tie, a leaky ReLU kink, a GeM
/// clamp or a triplet hinge, the step for that entry is divided by 4 until
/// it does not.
pub fn grad_check<F>(program: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Trace, &[Var]) -> Result<Var>,
{
    Ok(grad_check_sampled(program, params, eps, usize::MAX)?.max_rel_error)
}

/// Like [`grad_check`] but probes at most `max_entries` evenly spaced
/// entries per parameter tensor.
pub fn grad_check_sampled<F>(
    program: F,
    params: &[Tensor],
    eps: f64,
    max_entries: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Trace, &[Var]) -> Result<Var>,
{
    let first = evaluate(&program, params)?;
    let second = evaluate(&program, params)?;
    if first.0.to_bits() != second.0.to_bits() || first.1 != second.1 {
        return Err(Error::NonDeterministic {
            first: first.0,
            second: second.0,
        });
    }

    let mut tr = Trace::new();
    let vars: Vec<Var> = params.iter().map(|p| tr.leaf(p.clone())).collect();
    let out = program(&mut tr, &vars)?;
    let grads = tr.backward(out)?;

    let mut per_param = Vec::with_capacity(params.len());
    let mut probes = 0;
    let mut narrowed = 0;
    let mut worst_pair = (0.0, 0.0);
    let mut worst_all: f64 = -1.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let analytic = grads
            .data(vars[pi])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let count = n.min(max_entries.max(1));
        let mut worst: f64 = 0.0;
        for k in 0..count {
            let idx = if count == n { k } else { k * n / count };
            let base = param.data()[idx];
            let mut h = eps;
            let mut numeric = 0.0;
            for attempt in 0..=MAX_NARROWING {
                work[pi] = with_entry(param, idx, base + h);
                let plus = evaluate(&program, &work)?;
                work[pi] = with_entry(param, idx, base - h);
                let minus = evaluate(&program, &work)?;
                numeric = (plus.0 - minus.0) / (2.0 * h);
                if plus.1 == first.1 && minus.1 == first.1 {
                    narrowed += usize::from(attempt > 0);
                    break;
                }
                h /= 4.0;
            }
            work[pi] = param.clone();
            let err = relative_error(analytic[idx], numeric);
            worst = worst.max(err);
            if err > worst_all {
                worst_all = err;
                worst_pair = (analytic[idx], numeric);
            }
            probes += 1;
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_param.iter().cloned().fold(0.0, f64::max),
        per_param,
        probes,
        worst: worst_pair,
        narrowed,
    })
}

fn with_entry(t: &Tensor, idx: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[idx] = value;
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}
