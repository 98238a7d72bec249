//! Central finite-difference certification of analytic gradients.

use rand::seq::index;
use serde::Serialize;

use super::kinks;
use super::param::HasParams;
use super::rng::rng_from_seed;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per block; blocks this small or smaller are checked exhaustively.
    pub coords_per_block: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-3,
            coords_per_block: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockError {
    pub name: String,
    /// Coordinates compared against the finite difference.
    pub checked: usize,
    /// Coordinates whose `±h` evaluations straddled a ReLU or clamp boundary.
    pub straddled: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub tolerance: f64,
    /// Total straddled coordinates, excluded from the error.
    pub straddled: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the gradients left in `model` by `loss_and_grad` against central
/// differences of the loss it returns.
///
/// `loss_and_grad` must zero the gradients, run forward and backward, and
/// return the loss. It is called twice up front to confirm determinism.
///
/// A central difference across a kink is not a derivative estimate. When the
/// branch pattern recorded by [`super::kinks`] differs between `θ+h` and
/// `θ−h`, the coordinate is counted as straddled instead of compared. The
/// check fails if any non-empty block ends up with no compared coordinate.
pub fn check_gradients<M, F>(
    model: &mut M,
    mut loss_and_grad: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: HasParams + ?Sized,
    F: FnMut(&mut M) -> Result<f64>,
{
    if opts.step <= 0.0 || !opts.step.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {}",
            opts.step
        )));
    }

    let loss0 = loss_and_grad(model)?;
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    let loss1 = loss_and_grad(model)?;
    if loss0.to_bits() != loss1.to_bits() {
        return Err(Error::Determinism(format!("loss {loss0:e} then {loss1:e}")));
    }
    for (p, g) in model.params().iter().zip(&analytic) {
        if p.grad
            .data()
            .iter()
            .zip(g)
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(Error::Determinism(format!(
                "gradient of {} changed between calls",
                p.name
            )));
        }
    }

    let mut rng = rng_from_seed(opts.seed);
    let plan: Vec<Vec<usize>> = model
        .params()
        .iter()
        .map(|p| {
            let candidates: Vec<usize> = match p.touched_rows() {
                Some(rows) if !rows.is_empty() => {
                    let cols = p.value.cols();
                    let mut c: Vec<usize> = rows
                        .iter()
                        .flat_map(|&r| r * cols..(r + 1) * cols)
                        .collect();
                    c.sort_unstable();
                    c
                }
                _ => (0..p.len()).collect(),
            };
            if candidates.len() <= opts.coords_per_block {
                candidates
            } else {
                index::sample(&mut rng, candidates.len(), opts.coords_per_block)
                    .into_iter()
                    .map(|i| candidates[i])
                    .collect()
            }
        })
        .collect();

    let mut blocks = Vec::with_capacity(plan.len());
    for (bi, coords) in plan.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut straddled = 0;
        for &c in coords {
            let orig = model.params()[bi].value.data()[c];
            model.params_mut()[bi].value.data_mut()[c] = orig + opts.step;
            let (plus, plus_branches) = kinks::record(|| loss_and_grad(model));
            model.params_mut()[bi].value.data_mut()[c] = orig - opts.step;
            let (minus, minus_branches) = kinks::record(|| loss_and_grad(model));
            model.params_mut()[bi].value.data_mut()[c] = orig;
            if plus_branches != minus_branches {
                straddled += 1;
                continue;
            }
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[bi][c], numeric));
        }
        if straddled > 0 && straddled == coords.len() {
            worst = f64::INFINITY;
        }
        blocks.push(BlockError {
            name: model.params()[bi].name.clone(),
            checked: coords.len() - straddled,
            straddled,
            max_rel_error: worst,
        });
    }
    // leave the analytic gradients in place for the caller
    loss_and_grad(model)?;

    let (max_rel_error, worst_param) = blocks.iter().fold((0.0f64, String::new()), |(m, n), b| {
        if b.max_rel_error > m || n.is_empty() {
            (b.max_rel_error.max(m), b.name.clone())
        } else {
            (m, n)
        }
    });
    Ok(GradCheckReport {
        pass: max_rel_error < opts.tolerance,
        straddled: blocks.iter().map(|b| b.straddled).sum(),
        tolerance: opts.tolerance,
        max_rel_error,
        worst_param,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamBlock, Tensor};

    fn scalar(x: f64) -> Vec<ParamBlock> {
        vec![ParamBlock::new("x", Tensor::vector(vec![x]).unwrap())]
    }

    #[test]
    fn square_loss_passes() {
        let mut p = scalar(3.0);
        let report = check_gradients(
            &mut p,
            |p| {
                let x = p[0].value.data()[0];
                p[0].grad.data_mut()[0] = 2.0 * x;
                Ok(x * x)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
        assert_eq!(report.worst_param, "x");
    }

    #[test]
    fn constant_loss_passes() {
        let mut p = scalar(1.0);
        let report = check_gradients(
            &mut p,
            |p| {
                p[0].zero_grad();
                Ok(4.2)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn doubled_backward_fails() {
        let mut p = scalar(3.0);
        let report = check_gradients(
            &mut p,
            |p| {
                let x = p[0].value.data()[0];
                p[0].grad.data_mut()[0] = 4.0 * x;
                Ok(x * x)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn straddled_kink_is_excluded_not_compared() {
        // relu(x) at x = 0.5e-4: the ±h evaluations sit on opposite sides
        let mut p = scalar(0.5e-4);
        let report = check_gradients(
            &mut p,
            |p| {
                let mut t = p[0].value.clone();
                crate::numerics::relu_inplace(&mut t);
                p[0].grad.data_mut()[0] = if t.data()[0] > 0.0 { 1.0 } else { 0.0 };
                Ok(t.data()[0])
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.straddled, 1);
        assert_eq!(report.blocks[0].checked, 0);
        assert!(!report.pass, "a block with nothing compared must not pass");
    }

    #[test]
    fn relu_away_from_kink_is_compared() {
        let mut p = scalar(0.3);
        let report = check_gradients(
            &mut p,
            |p| {
                let mut t = p[0].value.clone();
                crate::numerics::relu_inplace(&mut t);
                p[0].grad.data_mut()[0] = if t.data()[0] > 0.0 {
                    2.0 * t.data()[0]
                } else {
                    0.0
                };
                Ok(t.data()[0] * t.data()[0])
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.straddled, 0);
        assert!(report.pass);
    }

    #[test]
    fn nondeterministic_closure_is_rejected() {
        let mut p = scalar(1.0);
        let mut calls = 0.0;
        let err = check_gradients(
            &mut p,
            |_| {
                calls += 1.0;
                Ok(calls)
            },
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Determinism(_)));
    }
}
