use super::{Graph, Tensor, Var};
use crate::error::{IdrError, Result};

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-3;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic| + |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step evaluations crossed a kink (leaky-relu
    /// threshold, pooling argmax change, L1 sign flip) and were excluded.
    pub skipped_kinks: usize,
}

fn evaluate<F>(forward: &F, params: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = forward(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(IdrError::shape("grad_check forward must return a scalar"));
    }
    Ok((g, vars, out))
}

/// Checks the gradient of a scalar-valued `forward` with respect to every
/// coordinate of `params` (or an evenly strided subset of at most
/// `max_per_param` coordinates per tensor).
pub fn grad_check<F>(
    forward: F,
    params: &[Tensor<f64>],
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&forward, params)?;
    let base_pattern = g.activation_pattern();
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let stride = match max_per_param {
            Some(cap) if cap > 0 && p.len() > cap => p.len().div_ceil(cap),
            _ => 1,
        };
        for idx in (0..p.len()).step_by(stride) {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + FD_STEP;
            let (gp, _, op) = evaluate(&forward, &work)?;
            work[pi].data_mut()[idx] = orig - FD_STEP;
            let (gm, _, om) = evaluate(&forward, &work)?;
            work[pi].data_mut()[idx] = orig;
            if gp.activation_pattern() != base_pattern || gm.activation_pattern() != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (gp.value(op).data()[0] - gm.value(om).data()[0]) / (2.0 * FD_STEP);
            let a = analytic[pi][idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
