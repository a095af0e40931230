//! Central finite differences against reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor; coordinates whose gradients are both below it are
    /// effectively compared in absolute terms.
    pub floor: f64,
    /// One-sided slopes that disagree by more than this (relative to
    /// `max(1, |central|)`) mark a non-differentiable point.
    pub kink_ratio: f64,
}

impl GradCheckConfig {
    pub fn double() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-4,
            kink_ratio: 0.1,
        }
    }

    pub fn single() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1e-3,
            kink_ratio: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric gradient at the worst coordinate.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Coordinates skipped because the function has a kink there.
    pub excluded: Vec<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares precomputed analytic gradients with central differences of
/// `value`, which is evaluated in double precision.
pub fn compare_gradients(
    analytic: &[Vec<f64>],
    inputs: &[Tensor<f64>],
    mut value: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let want: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let got: Vec<usize> = analytic.iter().map(Vec::len).collect();
    if want != got {
        return Err(Error::Shape {
            op: "compare_gradients",
            left: want,
            right: got,
        });
    }
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let base = value(&work)?;
    let h = cfg.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
        excluded: Vec::new(),
        tolerance: cfg.tolerance,
    };
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &exact) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = value(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = value(&work)?;
            work[i].data_mut()[j] = orig;

            let central = (plus - minus) / (2.0 * h);
            let right = (plus - base) / h;
            let left = (base - minus) / h;
            if (right - left).abs() > cfg.kink_ratio * central.abs().max(1.0) {
                report.excluded.push((i, j));
                continue;
            }
            let err = relative_error(exact, central, cfg.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.worst_values = (exact, central);
            }
        }
    }
    Ok(report)
}

/// Gradient check of a scalar function built on a double-precision tape.
pub fn grad_check(
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    compare_gradients(
        &analytic,
        inputs,
        |xs| {
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).data()[0])
        },
        cfg,
    )
}
