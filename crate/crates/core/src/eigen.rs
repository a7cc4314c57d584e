//! Power iteration for the largest eigenvalue of a symmetric pencil
//! `B x = λ A x` with `A` SPD and `B` symmetric positive semidefinite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::dot;

#[derive(Clone, Debug)]
pub struct EigenEstimate {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PowerOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerOptions {
    fn default() -> Self {
        PowerOptions {
            tol: 1e-4,
            max_iter: 300,
            seed: 0x5eed,
        }
    }
}

/// Iterate `x ← A⁻¹ B x` from a seeded random start until the Rayleigh
/// quotient `xᵀBx / xᵀAx` changes by at most `tol` relative.
pub fn generalized_power_iteration<FB, FA, FS>(
    n: usize,
    mut apply_b: FB,
    mut apply_a: FA,
    mut solve_a: FS,
    opts: PowerOptions,
) -> Result<EigenEstimate>
where
    FB: FnMut(&[f64]) -> Result<Vec<f64>>,
    FA: FnMut(&[f64]) -> Result<Vec<f64>>,
    FS: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if n == 0 {
        return Ok(EigenEstimate {
            value: 0.0,
            vector: Vec::new(),
            iterations: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut ax = apply_a(&x)?;
    normalize(&mut x, &mut ax);
    let mut last = f64::NAN;
    for it in 1..=opts.max_iter {
        let bx = apply_b(&x)?;
        let xbx = dot(&x, &bx);
        // xᵀAx = 1 after normalization.
        let lambda = xbx.max(0.0);
        if lambda <= f64::MIN_POSITIVE || bx.iter().all(|&v| v == 0.0) {
            return Ok(EigenEstimate {
                value: 0.0,
                vector: x,
                iterations: it,
            });
        }
        if last.is_finite() && (lambda - last).abs() <= opts.tol * lambda {
            return Ok(EigenEstimate {
                value: lambda,
                vector: x,
                iterations: it,
            });
        }
        last = lambda;
        x = solve_a(&bx)?;
        ax = apply_a(&x)?;
        normalize(&mut x, &mut ax);
    }
    Err(Error::Solver {
        iterations: opts.max_iter,
        residual: f64::NAN,
        context: format!("power iteration stagnated; last Rayleigh quotient {last:e}"),
    })
}

fn normalize(x: &mut [f64], ax: &mut [f64]) {
    let s = dot(x, ax).max(0.0).sqrt();
    if s > 0.0 {
        x.iter_mut().for_each(|v| *v /= s);
        ax.iter_mut().for_each(|v| *v /= s);
    }
}
