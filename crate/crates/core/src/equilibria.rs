//! Lagrange points, critical energies and Hill-region components.

use serde::{Deserialize, Serialize};

use crate::dynamics::jacobi_h;
use crate::error::{Error, Result};
use crate::numeric::brent;
use crate::phase::{earth_position, moon_position, SystemSpec, UnregState, V3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangeSet {
    pub mu: f64,
    /// Positions sorted by critical value; ties keep the collinear points first.
    pub points: [V3; 5],
    pub values: [f64; 5],
}

impl LagrangeSet {
    pub fn h_l1(&self) -> f64 {
        self.values[0]
    }

    pub fn h_l2(&self) -> f64 {
        self.values[1]
    }

    pub fn l1(&self) -> V3 {
        self.points[0]
    }
}

/// `U(q) = -mu/|q - m| - (1 - mu)/|q - e| - (q1^2 + q2^2)/2`, the value of the
/// Jacobi Hamiltonian at zero rotating-frame velocity.
pub fn effective_potential(mu: f64, q: &V3) -> f64 {
    let rm = (q - moon_position(mu)).norm();
    let re = (q - earth_position(mu)).norm();
    let earth = if mu < 1.0 { (1.0 - mu) / re } else { 0.0 };
    -mu / rm - earth - 0.5 * (q[0] * q[0] + q[1] * q[1])
}

pub fn effective_gradient(mu: f64, q: &V3) -> V3 {
    let dm = q - moon_position(mu);
    let de = q - earth_position(mu);
    let rm = dm.norm();
    let re = de.norm();
    let mut g = dm * (mu / rm.powi(3)) - V3::new(q[0], q[1], 0.0);
    if mu < 1.0 {
        g += de * ((1.0 - mu) / re.powi(3));
    }
    g
}

fn collinear_root(mu: f64, a: f64, b: f64) -> Result<f64> {
    let dx = |x: f64| effective_gradient(mu, &V3::new(x, 0.0, 0.0))[0];
    let mut x = brent(dx, a, b, 1e-15).ok_or_else(|| Error::OutOfRange(format!("no collinear point in [{a}, {b}]")))?;
    // Newton polish with a numerical second derivative
    for _ in 0..3 {
        let h = 1e-6;
        let d2 = (dx(x + h) - dx(x - h)) / (2.0 * h);
        let step = dx(x) / d2;
        if !step.is_finite() || step.abs() > 1e-8 {
            break;
        }
        x -= step;
    }
    Ok(x)
}

pub fn lagrange_points(mu: f64) -> Result<LagrangeSet> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::OutOfRange(format!("mu = {mu} not in (0, 1)")));
    }
    let m1 = mu - 1.0;
    let e1 = mu;
    let delta = 1e-6;
    let xs = [
        collinear_root(mu, -2.0, m1 - delta)?,
        collinear_root(mu, m1 + delta, e1 - delta)?,
        collinear_root(mu, e1 + delta, 2.0)?,
    ];
    let h3 = 0.75f64.sqrt();
    let mut pts: Vec<V3> = xs.iter().map(|&x| V3::new(x, 0.0, 0.0)).collect();
    pts.push(V3::new(mu - 0.5, h3, 0.0));
    pts.push(V3::new(mu - 0.5, -h3, 0.0));
    let spec = SystemSpec {
        mu,
        c: 0.0,
        chart: crate::phase::Chart::Moon,
        stark_zeeman: None,
    };
    let mut pairs = Vec::with_capacity(5);
    for (i, q) in pts.into_iter().enumerate() {
        let s = UnregState {
            q,
            p: V3::new(-q[1], q[0], 0.0),
        };
        pairs.push((jacobi_h(&s, &spec)?, i, q));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(LagrangeSet {
        mu,
        points: [pairs[0].2, pairs[1].2, pairs[2].2, pairs[3].2, pairs[4].2],
        values: [pairs[0].0, pairs[1].0, pairs[2].0, pairs[3].0, pairs[4].0],
    })
}

/// Energy shortcuts used by the command line.
pub fn auto_below_l1(mu: f64) -> Result<f64> {
    Ok(lagrange_points(mu)?.h_l1() - 0.2)
}

pub fn auto_above_l1(mu: f64) -> Result<f64> {
    let l = lagrange_points(mu)?;
    Ok(l.h_l1() + (0.05f64).min((l.h_l2() - l.h_l1()) / 4.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HillLabel {
    MoonComponent,
    EarthComponent,
    MergedComponent,
    Unbounded,
    Forbidden,
}

const GRID_HALF_WIDTH: f64 = 2.0;
const GRID_CELLS: usize = 400;

/// Connected component of the Hill region containing `q`.
///
/// Admissible points are pushed down to the plane `q3 = 0` (the potential
/// decreases with `|q3|`), then a flood fill on a planar grid decides whether
/// the component reaches the far field. Bounded components are split at `L1`
/// when `c < H(L1)`.
pub fn hill_label(q: &V3, c: f64, spec: &SystemSpec) -> HillLabel {
    let mu = spec.mu;
    if effective_potential(mu, q) > c {
        return HillLabel::Forbidden;
    }
    if q[0].abs() >= GRID_HALF_WIDTH || q[1].abs() >= GRID_HALF_WIDTH {
        return HillLabel::Unbounded;
    }
    let n = GRID_CELLS;
    let h = 2.0 * GRID_HALF_WIDTH / n as f64;
    let centre = |i: usize| -GRID_HALF_WIDTH + (i as f64 + 0.5) * h;
    let cell = |x: f64| (((x + GRID_HALF_WIDTH) / h) as usize).min(n - 1);
    let allowed = |i: usize, j: usize| effective_potential(mu, &V3::new(centre(i), centre(j), 0.0)) <= c;
    let start = (cell(q[0]), cell(q[1]));
    let mut seen = vec![false; n * n];
    let mut stack = vec![start];
    seen[start.0 * n + start.1] = true;
    let mut reaches_edge = false;
    while let Some((i, j)) = stack.pop() {
        if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
            reaches_edge = true;
            break;
        }
        for (di, dj) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (a, b) = ((i as i64 + di) as usize, (j as i64 + dj) as usize);
            if !seen[a * n + b] && allowed(a, b) {
                seen[a * n + b] = true;
                stack.push((a, b));
            }
        }
    }
    if reaches_edge {
        return HillLabel::Unbounded;
    }
    if mu >= 1.0 {
        return HillLabel::MoonComponent;
    }
    let l = match lagrange_points(mu) {
        Ok(l) => l,
        Err(_) => return HillLabel::Unbounded,
    };
    if c >= l.h_l1() {
        HillLabel::MergedComponent
    } else {
        // the middle collinear point separates the two lobes
        let mid = l
            .points
            .iter()
            .find(|p| p[1] == 0.0 && p[0] > mu - 1.0 && p[0] < mu)
            .map(|p| p[0])
            .unwrap_or(0.0);
        if q[0] < mid {
            HillLabel::MoonComponent
        } else {
            HillLabel::EarthComponent
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_masses() {
        let l = lagrange_points(0.5).unwrap();
        assert!(l.l1().norm() < 1e-13);
        assert!((l.h_l1() + 2.0).abs() < 1e-13);
        let l4 = l.points.iter().find(|p| p[1] > 0.5).unwrap();
        assert!((l4 - V3::new(0.0, 0.75f64.sqrt(), 0.0)).norm() < 1e-15);
        assert!(effective_gradient(0.5, l4).norm() < 1e-10);
    }

    #[test]
    fn residuals_values_and_ordering() {
        for mu in [0.01, 0.1, 0.3, 0.45, 0.5, 0.7, 0.9, 0.999] {
            let l = lagrange_points(mu).unwrap();
            let spec = SystemSpec::moon(mu, 0.0).unwrap();
            for (p, v) in l.points.iter().zip(l.values) {
                assert!(effective_gradient(mu, p).norm() < 1e-10, "mu={mu} p={p:?}");
                let s = UnregState {
                    q: *p,
                    p: V3::new(-p[1], p[0], 0.0),
                };
                assert!((jacobi_h(&s, &spec).unwrap() - v).abs() < 1e-12);
            }
            assert!(l.values.windows(2).all(|w| w[0] <= w[1]));
            assert!((l.values[3] - l.values[4]).abs() < 1e-12);
            if mu < 0.5 {
                assert!(l.values[0] < l.values[1] && l.values[1] < l.values[2]);
            }
        }
    }

    #[test]
    fn h_l1_bound() {
        for mu in [0.1, 0.3, 0.5, 0.7, 0.9, 0.999] {
            assert!(lagrange_points(mu).unwrap().h_l1() <= -1.5);
        }
    }

    #[test]
    fn out_of_range() {
        assert!(matches!(lagrange_points(1.0), Err(Error::OutOfRange(_))));
        assert!(matches!(lagrange_points(0.0), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn hill_labels() {
        let mu = 0.3;
        let spec = SystemSpec::moon(mu, 0.0).unwrap();
        let l = lagrange_points(mu).unwrap();
        let below = l.h_l1() - 0.1;
        let m = moon_position(mu);
        let e = earth_position(mu);
        assert_eq!(
            hill_label(&(m + V3::new(1e-3, 0.0, 0.0)), below, &spec),
            HillLabel::MoonComponent
        );
        assert_eq!(
            hill_label(&(e + V3::new(0.0, 1e-3, 0.0)), below, &spec),
            HillLabel::EarthComponent
        );
        assert_eq!(hill_label(&V3::new(10.0, 0.0, 0.0), below, &spec), HillLabel::Unbounded);
        assert_eq!(hill_label(&V3::new(0.0, 1.9, 0.0), below, &spec), HillLabel::Unbounded);
        assert_eq!(hill_label(&l.l1(), below, &spec), HillLabel::Forbidden);
        let above = auto_above_l1(mu).unwrap();
        assert!(above <= l.h_l1() + 0.05);
        assert_eq!(hill_label(&l.l1(), above, &spec), HillLabel::MergedComponent);
        assert_eq!(
            hill_label(&(m + V3::new(0.0, 0.0, 1e-3)), above, &spec),
            HillLabel::MergedComponent
        );
    }
}
