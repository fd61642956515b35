//! Central finite-difference verification of tape gradients.

use super::matrix::DenseMatrix;
use super::optim::{ParamId, ParameterSet};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation for `(f(θ+δ) - f(θ-δ)) / 2δ`.
    pub delta: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Denominator floor so near-zero gradients are judged on absolute error.
    pub floor: f64,
    /// Entries probed per parameter; larger parameters are subsampled.
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            delta: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            max_entries: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// (entry index, analytic, numeric) at the worst entry.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn failing(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| g.max_rel_error >= self.tolerance)
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Runs `forward` once with backpropagation, then compares every parameter
/// group against central differences of the forward value.
pub fn finite_difference_check<F>(params: &ParameterSet, forward: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<DenseMatrix> = params
        .iter()
        .map(|(_, _, p)| DenseMatrix::zeros(p.shape().0, p.shape().1))
        .collect();
    for (var, id) in tape.param_bindings() {
        if let Some(g) = grads.get(var) {
            analytic[id.0].add_assign(g);
        }
    }
    compare_with_finite_differences(params, &analytic, &forward, opts)
}

/// Compares supplied analytic gradients (one per parameter, in set order)
/// with central differences of `forward`.
pub fn compare_with_finite_differences<F>(
    params: &ParameterSet,
    analytic: &[DenseMatrix],
    forward: &F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet, &mut Tape) -> Result<Var>,
{
    let eval = |set: &ParameterSet| -> Result<f64> {
        let mut t = Tape::new();
        let l = forward(set, &mut t)?;
        Ok(t.scalar(l))
    };
    let mut work = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    for id in params.ids() {
        let grad = &analytic[id.0];
        let entries = probe_entries(grad, opts.max_entries);
        let mut report = GroupReport {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            entries_checked: entries.len(),
            worst: None,
        };
        for &e in &entries {
            let numeric = central_difference(&mut work, id, e, opts.delta, &eval)?;
            let a = grad.as_slice()[e];
            let rel = relative_error(a, numeric, opts.floor);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((e, a, numeric));
            }
        }
        groups.push(report);
    }
    Ok(GradCheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}

fn central_difference(
    work: &mut ParameterSet,
    id: ParamId,
    entry: usize,
    delta: f64,
    eval: &dyn Fn(&ParameterSet) -> Result<f64>,
) -> Result<f64> {
    let original = work.value(id).as_slice()[entry];
    work.get_mut(id).value.as_mut_slice()[entry] = original + delta;
    let plus = eval(work)?;
    work.get_mut(id).value.as_mut_slice()[entry] = original - delta;
    let minus = eval(work)?;
    work.get_mut(id).value.as_mut_slice()[entry] = original;
    Ok((plus - minus) / (2.0 * delta))
}

/// Every entry when small; otherwise the largest-magnitude half plus an even stride.
fn probe_entries(grad: &DenseMatrix, max: usize) -> Vec<usize> {
    let n = grad.len();
    if n <= max {
        return (0..n).collect();
    }
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| {
        grad.as_slice()[b]
            .abs()
            .total_cmp(&grad.as_slice()[a].abs())
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = by_mag[..max / 2].to_vec();
    let stride = (n / (max - max / 2)).max(1);
    picked.extend((0..n).step_by(stride).take(max - max / 2));
    picked.sort_unstable();
    picked.dedup();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(set: &ParameterSet, tape: &mut Tape) -> Result<Var> {
        let w = tape.param(set, ParamId(0));
        Ok(tape.scale(w, 3.0))
    }

    #[test]
    fn linear_model_is_exact() {
        let mut set = ParameterSet::new();
        set.add("w", DenseMatrix::scalar(0.7));
        let report = finite_difference_check(&set, linear, GradCheckOptions::default()).unwrap();
        let (_, a, n) = report.groups[0].worst.unwrap();
        assert_eq!(a, 3.0);
        assert!((n - 3.0).abs() < 1e-8);
        assert!(report.passed());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut set = ParameterSet::new();
        set.add("w", DenseMatrix::row_vector(&[0.2, -0.4]));
        let forward = |s: &ParameterSet, t: &mut Tape| -> Result<Var> {
            let w = t.param(s, ParamId(0));
            let q = t.tanh(w);
            Ok(t.sum(q))
        };
        let exact = finite_difference_check(&set, forward, GradCheckOptions::default()).unwrap();
        assert!(exact.passed());
        let analytic = vec![DenseMatrix::row_vector(&[
            1.0 - 0.2f64.tanh().powi(2) + 0.1,
            1.0 - 0.4f64.tanh().powi(2),
        ])];
        let report = compare_with_finite_differences(&set, &analytic, &forward, GradCheckOptions::default()).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.05);
        assert_eq!(report.failing().count(), 1);
    }

    #[test]
    fn probing_covers_largest_gradients() {
        let mut g = DenseMatrix::zeros(10, 20);
        g.as_mut_slice()[137] = 5.0;
        let e = probe_entries(&g, 16);
        assert!(e.contains(&137));
        assert!(e.len() <= 16);
    }
}
