//! Small dense linear-algebra and optimisation helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Numerically stable logistic function.
#[inline]
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    let x = a.clone().lu().solve(b).ok_or(Error::Singular(context))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular(context))
    }
}

pub fn inverse(a: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let inv = a.clone().try_inverse().ok_or(Error::Singular(context))?;
    if inv.iter().all(|v| v.is_finite()) {
        Ok(inv)
    } else {
        Err(Error::Singular(context))
    }
}

/// Ratio of the smallest to the largest eigenvalue of a symmetric matrix.
pub fn reciprocal_condition(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return 1.0;
    }
    let eig = sym.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Settings for the damped Newton maximiser.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Convergence threshold on the gradient max-norm.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Coefficient norm beyond which a non-vanishing gradient is read as separation.
    pub separation_norm: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 30,
            separation_norm: 30.0,
        }
    }
}

/// Outcome of [`newton_maximize`].
#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Objective evaluation: value, gradient and Hessian.
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Maximises a smooth concave objective by Newton's method with step halving.
pub fn newton_maximize<F>(
    start: Vec<f64>,
    opts: NewtonOptions,
    solver: &'static str,
    mut eval: F,
) -> Result<NewtonResult>
where
    F: FnMut(&[f64]) -> Evaluation,
{
    let mut x = start;
    let mut current = eval(&x);
    for iter in 0..=opts.max_iter {
        let gnorm = current.gradient.amax();
        if !gnorm.is_finite() || !current.value.is_finite() {
            return Err(Error::NonConvergence {
                solver,
                iterations: iter,
                residual: gnorm,
            });
        }
        if gnorm <= opts.tol {
            return Ok(NewtonResult {
                x,
                value: current.value,
                gradient_norm: gnorm,
                iterations: iter,
            });
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > opts.separation_norm {
            return Err(Error::Separation(solver));
        }
        if iter == opts.max_iter {
            break;
        }
        let neg_h = -current.hessian.clone();
        let step = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&current.gradient),
            None => solve(&neg_h, &current.gradient, solver)?,
        };
        // near the optimum the objective change drops below its rounding
        // error, so a step that keeps the value within that noise and shrinks
        // the gradient is also accepted
        let slack = 1e-12 * (1.0 + current.value.abs());
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_halvings {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            if trial == x {
                break;
            }
            let next = eval(&trial);
            let improves = next.value > current.value
                || (next.value >= current.value - slack && next.gradient.amax() < gnorm);
            if next.value.is_finite() && improves {
                accepted = Some((trial, next));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, next)) => {
                x = trial;
                current = next;
            }
            None => {
                return Err(Error::NonConvergence {
                    solver,
                    iterations: iter,
                    residual: gnorm,
                })
            }
        }
    }
    Err(Error::NonConvergence {
        solver,
        iterations: opts.max_iter,
        residual: current.gradient.amax(),
    })
}
