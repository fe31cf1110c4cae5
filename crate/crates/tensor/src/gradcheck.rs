use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`]: the worst relative error seen per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
    /// Probes left out because the loss has a kink inside `[x - h, x + h]`.
    pub kinks: usize,
    pub probes: usize,
}

impl GradCheckReport {
    /// Every scored probe is within tolerance and at most a tenth of the
    /// probes were skipped at kinks.
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e <= self.tol) && self.kinks * 10 <= self.probes
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

fn evaluate<F>(forward: &mut F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let root = forward(&mut tape, &vars)?;
    Ok((tape, vars, root))
}

fn loss_at<F>(forward: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, root) = evaluate(forward, params)?;
    let v = tape.scalar_value(root)?;
    if !v.is_finite() {
        return Err(TensorError::Numerical(format!("forward produced {v}")));
    }
    Ok(v as f64)
}

/// Compares reverse-mode gradients against central differences.
///
/// The error for one element is `|analytic - numeric| / max(1, |numeric|)`.
/// When the central difference misses but the analytic value matches one of
/// the one-sided slopes, the probe straddles a non-differentiable point (a
/// ReLU switching sign, say); it is counted in `kinks` instead of scored.
/// With `max_probes = Some(k)` only `k` evenly spaced elements of each
/// parameter are perturbed, which keeps large kernels affordable.
pub fn grad_check<F>(mut forward: F, params: &mut [Tensor], h: f32, tol: f64, max_probes: Option<usize>) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::Usage("grad_check: step must be positive".into()));
    }
    let (mut tape, vars, root) = evaluate(&mut forward, params)?;
    let center = tape.scalar_value(root)? as f64;
    tape.backward(root)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    drop(tape);

    let mut max_rel_error = Vec::with_capacity(params.len());
    let mut kinks = 0;
    let mut probe_count = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(TensorError::Numerical(format!("parameter {pi}: analytic gradient {bad}")));
        }
        let n = params[pi].len();
        let probes: Vec<usize> = match max_probes {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        probe_count += probes.len();
        for j in probes {
            let orig = params[pi].data()[j];
            params[pi].data_mut()[j] = orig + h;
            let up = loss_at(&mut forward, params);
            params[pi].data_mut()[j] = orig - h;
            let down = loss_at(&mut forward, params);
            params[pi].data_mut()[j] = orig;
            // Use the perturbations actually representable in f32.
            let (up, down) = (up?, down?);
            let span = (orig + h) as f64 - (orig - h) as f64;
            let slope_up = (up - center) / ((orig + h) as f64 - orig as f64);
            let slope_down = (center - down) / (orig as f64 - (orig - h) as f64);
            let numeric = (up - down) / span;
            let g = grad[j] as f64;
            let err = (g - numeric).abs() / numeric.abs().max(1.0);
            let one_sided = ((g - slope_up).abs() / slope_up.abs().max(1.0)).min((g - slope_down).abs() / slope_down.abs().max(1.0));
            if err > tol && one_sided <= tol {
                kinks += 1;
                continue;
            }
            worst = worst.max(err);
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error,
        tol,
        kinks,
        probes: probe_count,
    })
}
