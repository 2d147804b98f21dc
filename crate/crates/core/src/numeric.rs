//! Small numerical helpers shared by the modules.

use roots::{find_root_brent, Convergency};

struct XTol {
    tol: f64,
    max_iter: usize,
}

impl Convergency<f64> for XTol {
    fn is_root_found(&mut self, y: f64) -> bool {
        y == 0.0
    }

    fn is_converged(&mut self, x1: f64, x2: f64) -> bool {
        (x1 - x2).abs() <= self.tol + 4.0 * f64::EPSILON * x1.abs().max(x2.abs())
    }

    fn is_iteration_limit_reached(&mut self, iter: usize) -> bool {
        iter >= self.max_iter
    }
}

/// Brent's method on a sign-changing bracket; `None` if the bracket is invalid
/// or the iteration cap is hit.
pub fn brent<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, xtol: f64) -> Option<f64> {
    let mut conv = XTol {
        tol: xtol,
        max_iter: 200,
    };
    find_root_brent(a, b, f, &mut conv).ok()
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_pi(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Wrap an angle into `[0, 2 pi)`.
pub fn wrap_two_pi(a: f64) -> f64 {
    let r = a.rem_euclid(std::f64::consts::TAU);
    if r >= std::f64::consts::TAU {
        0.0
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_cube_root() {
        let r = brent(|x| x * x * x - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-12);
        assert!(brent(|x| x * x + 1.0, -1.0, 1.0, 1e-14).is_none());
    }

    #[test]
    fn wrapping() {
        assert!((wrap_pi(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_two_pi(-0.5) - (std::f64::consts::TAU - 0.5)).abs() < 1e-15);
    }
}
