//! Normalised gradient descent with Armijo backtracking.
//!
//! The search direction is the negative gradient scaled so that the largest
//! parameter group moves by exactly the step length (mm). The first trial
//! step is `min(2 * previous accepted step, step_init)`; it is halved until
//! the Armijo condition holds, and the first step that satisfies it is taken.

use crate::error::{Error, Result};

pub(crate) const ARMIJO_C: f64 = 1e-4;
pub(crate) const BACKTRACK: f64 = 0.5;
const MIN_STEP_FRACTION: f64 = 1e-6;

#[derive(Clone, Debug)]
pub(crate) struct Evaluation {
    pub metric: f64,
    pub bending: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

pub(crate) struct Settings {
    pub max_iters: usize,
    pub step_init: f64,
    pub grad_tol: f64,
    /// Parameters are moved in groups of this size; the step bounds the
    /// Euclidean norm of each group.
    pub group: usize,
    pub level: usize,
}

pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub converged: bool,
}

fn group_max_norm(g: &[f64], group: usize) -> f64 {
    g.chunks(group)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Minimises from `x0`. `eval` returns `Ok(None)` for infeasible points, which
/// count as failed trials. `record(iteration, eval)` sees every accepted state.
pub(crate) fn descend<E, R>(
    x0: Vec<f64>,
    settings: &Settings,
    mut eval: E,
    mut record: R,
) -> Result<Outcome>
where
    E: FnMut(&[f64]) -> Result<Option<Evaluation>>,
    R: FnMut(usize, &Evaluation),
{
    let mut x = x0;
    let mut cur = eval(&x)?.ok_or(Error::EmptyOverlap)?;
    if !cur.total.is_finite() {
        return Err(Error::NonFiniteCost {
            level: settings.level,
            iteration: 0,
        });
    }
    record(0, &cur);
    let min_step = settings.step_init * MIN_STEP_FRACTION;
    let mut last_step = settings.step_init;
    let mut converged = false;
    let mut trial = vec![0.0; x.len()];

    for it in 1..=settings.max_iters {
        let norm = group_max_norm(&cur.grad, settings.group);
        if !(norm > 1e-300) {
            converged = true;
            break;
        }
        let slope = -cur.grad.iter().map(|g| g * g).sum::<f64>() / norm;
        let mut step = (2.0 * last_step).min(settings.step_init);
        let mut accepted = None;
        while step >= min_step {
            for ((t, xi), gi) in trial.iter_mut().zip(&x).zip(&cur.grad) {
                *t = xi - step * gi / norm;
            }
            match eval(&trial)? {
                Some(e) if !e.total.is_finite() => {
                    return Err(Error::NonFiniteCost {
                        level: settings.level,
                        iteration: it,
                    })
                }
                Some(e) if e.total <= cur.total + ARMIJO_C * step * slope => {
                    accepted = Some(e);
                    break;
                }
                _ => step *= BACKTRACK,
            }
        }
        let Some(next) = accepted else {
            converged = true;
            break;
        };
        let decrease = (cur.total - next.total) / cur.total.abs().max(1e-300);
        std::mem::swap(&mut x, &mut trial);
        cur = next;
        last_step = step;
        record(it, &cur);
        if decrease < settings.grad_tol {
            converged = true;
            break;
        }
    }
    Ok(Outcome { x, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic_monotonically() {
        let target = [3.0, -2.0, 0.5];
        let settings = Settings {
            max_iters: 500,
            step_init: 1.0,
            grad_tol: 0.0,
            group: 1,
            level: 1,
        };
        let mut totals = Vec::new();
        let out = descend(
            vec![0.0; 3],
            &settings,
            |x| {
                let total: f64 = x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
                let grad = x.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
                Ok(Some(Evaluation {
                    metric: total,
                    bending: 0.0,
                    total,
                    grad,
                }))
            },
            |_, e| totals.push(e.total),
        )
        .unwrap();
        assert!(out.converged);
        for (a, b) in out.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(totals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn nan_trial_aborts() {
        let settings = Settings {
            max_iters: 5,
            step_init: 1.0,
            grad_tol: 0.0,
            group: 1,
            level: 2,
        };
        let r = descend(
            vec![0.0],
            &settings,
            |x| {
                let total = if x[0] == 0.0 { 1.0 } else { f64::NAN };
                Ok(Some(Evaluation {
                    metric: total,
                    bending: 0.0,
                    total,
                    grad: vec![1.0],
                }))
            },
            |_, _| {},
        );
        assert!(matches!(r, Err(Error::NonFiniteCost { level: 2, .. })));
    }
}
