//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Worst-case disagreement between tape gradients and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Input name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Magnitude below which errors are measured absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// Differentiates `build` (which must return a scalar) with respect to every
/// probe tensor and compares against `(f(x+h) - f(x-h)) / 2h`, entry by
/// entry. Relative error is `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn gradcheck<F>(probes: &[(&str, Tensor)], h: f64, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probes
            .iter()
            .zip(values)
            .map(|((name, _), t)| g.input(name, t.clone()))
            .collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = probes
        .iter()
        .map(|(name, t)| g.input(name, t.clone()))
        .collect();
    let out = build(&mut g, &vars)?;
    let analytic = g.backward(out)?;

    let mut values: Vec<Tensor> = probes.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, (name, t)) in probes.iter().enumerate() {
        let a = analytic.get(name).expect("probe registered");
        for idx in 0..t.len() {
            let orig = t.data()[idx];
            values[pi].data_mut()[idx] = orig + h;
            let fp = eval(&values)?;
            values[pi].data_mut()[idx] = orig - h;
            let fm = eval(&values)?;
            values[pi].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let av = a.data()[idx];
            let denom = av.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            let rel = (av - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((name.to_string(), idx));
            }
        }
    }
    Ok(report)
}
