//! Finite-difference gradient checking.
//!
//! Compares reverse-mode gradients of a scalar-valued function against
//! central differences computed at two step sizes, h and h/2. When the
//! two numeric estimates disagree with each other the coordinate sits
//! too close to a kink (ReLU boundary, max-pool argmax switch, clamp
//! edge) for the difference quotient to mean anything, so it is skipped
//! and counted rather than compared. Points exactly on a kink evaluate
//! both sides symmetrically and pass the consistency filter; callers
//! should not place coordinates there.

use super::{no_grad, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    /// True when at least one coordinate was comparable and the worst
    /// relative error stays under `tol`.
    pub fn ok(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

fn eval_at<F>(f: &F, base: &[f64], shape: &[usize], coord: usize, delta: f64) -> f64
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    no_grad(|| {
        let mut data = base.to_vec();
        data[coord] += delta;
        let x = Tensor::from_vec(data, shape).expect("base length matches shape");
        f(&x).item()
    })
}

/// Check d f(x)/dx at `x0` on the given coordinates. `f` must produce a
/// scalar tensor. Relative error per coordinate is
/// |analytic − numeric| / max(|analytic|, |numeric|, 1).
pub fn check_gradient<F>(
    f: F,
    x0: &[f64],
    shape: &[usize],
    h: f64,
    coords: &[usize],
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    let x = Tensor::from_vec(x0.to_vec(), shape)?.with_grad();
    let y = f(&x);
    y.backward()?;
    let analytic = x.grad().ok_or(TensorError::UntrackedBackward)?;

    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;

    for &c in coords {
        assert!(c < x0.len(), "coordinate {c} out of range for {} inputs", x0.len());
        let n_h = (eval_at(&f, x0, shape, c, h) - eval_at(&f, x0, shape, c, -h)) / (2.0 * h);
        let h2 = h / 2.0;
        let n_h2 = (eval_at(&f, x0, shape, c, h2) - eval_at(&f, x0, shape, c, -h2)) / (2.0 * h2);

        let scale = n_h.abs().max(n_h2.abs()).max(1.0);
        if (n_h - n_h2).abs() > 1e-4 * scale {
            skipped += 1;
            continue;
        }

        let a = analytic[c].to_f64();
        let rel = (a - n_h2).abs() / a.abs().max(n_h2.abs()).max(1.0);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
        checked += 1;
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        mean_rel_err: if checked > 0 {
            sum_rel / checked as f64
        } else {
            0.0
        },
        checked,
        skipped,
    })
}
