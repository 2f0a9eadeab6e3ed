//! Central finite-difference checking utilities.
//!
//! These are the independent oracles used to verify reverse-mode gradients:
//! for a scalar function f and direction d, the directional derivative is
//! estimated as (f(x+εd) − f(x−εd)) / 2ε and compared against ⟨∇f, d⟩.

use rand::Rng;

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_RTOL: f64 = 1e-4;

/// Relative closeness with an absolute floor for near-zero pairs.
pub fn rel_close(a: f64, b: f64, rtol: f64) -> bool {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        return (a - b).abs() < 1e-9;
    }
    (a - b).abs() / scale.max(1e-6) <= rtol
}

/// Central finite difference of f along d.
pub fn directional_fd(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], d: &[f64], eps: f64) -> f64 {
    let plus: Vec<f64> = x.iter().zip(d).map(|(&v, &dv)| v + eps * dv).collect();
    let minus: Vec<f64> = x.iter().zip(d).map(|(&v, &dv)| v - eps * dv).collect();
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

/// Random unit direction.
pub fn random_direction(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in d.iter_mut() {
        *v /= norm;
    }
    d
}

/// Verify an analytic gradient against central finite differences along
/// `directions` random unit directions. Returns the worst relative error.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    eps: f64,
    directions: usize,
    rng: &mut impl Rng,
) -> f64 {
    assert_eq!(x.len(), grad.len());
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let d = random_direction(rng, x.len());
        let fd = directional_fd(&mut f, x, &d, eps);
        let analytic: f64 = grad.iter().zip(&d).map(|(&g, &dv)| g * dv).sum();
        let scale = fd.abs().max(analytic.abs());
        let err = if scale < 1e-9 {
            (fd - analytic).abs()
        } else {
            (fd - analytic).abs() / scale.max(1e-6)
        };
        worst = worst.max(err);
    }
    worst
}
