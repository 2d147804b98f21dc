//! Closed-form rotating Kepler problem (`mu = 1`): period law, exact return
//! map on the geodesic page, circular orbits, polar fixed points and
//! invariant circles.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{angular_momentum_reg, f_eval, random_unit4, scale_to_level};
use crate::error::{Error, Result};
use crate::numeric::brent;
use crate::phase::{RegState, SystemSpec, V3, V4};

/// Period law in the printed form `pi / (2 (-K)^{3/2})`.
pub fn kepler_period(k: f64) -> Result<f64> {
    if k >= 0.0 {
        return Err(Error::NonNegativeEnergy(k));
    }
    Ok(PI / (2.0 * (-k).powf(1.5)))
}

/// Period of a Kepler ellipse with `K = |p|^2/2 - 1/|q|`: `2 pi (-2K)^{-3/2}`.
/// This is the measured first-return time of the rotating Kepler flow.
pub fn kepler_return_period(k: f64) -> Result<f64> {
    if k >= 0.0 {
        return Err(Error::NonNegativeEnergy(k));
    }
    Ok(TAU * (-2.0 * k).powf(-1.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeplerContext {
    pub c: f64,
}

impl KeplerContext {
    pub fn new(c: f64) -> Result<Self> {
        if !(c < 0.0) {
            return Err(Error::EnergyDomain(c));
        }
        Ok(Self { c })
    }

    pub fn spec(&self) -> SystemSpec {
        SystemSpec::rotating_kepler(self.c)
    }

    /// Rotation angle of the return map on the level set of `L`.
    pub fn rotation_angle(&self, l: f64) -> Result<f64> {
        kepler_return_period(self.c - l).map_err(|_| Error::EnergyDomain(self.c - l))
    }

    /// Generating function `G(L) = -2 pi (2(L - c))^{-1/2}`, with
    /// `G'(L)` equal to the rotation angle.
    pub fn generating_function(&self, l: f64) -> Result<f64> {
        if l - self.c <= 0.0 {
            return Err(Error::EnergyDomain(self.c - l));
        }
        Ok(-TAU / (2.0 * (l - self.c)).sqrt())
    }

    /// The polar fixed points `x+` (north) and `x-` (south) of the return map.
    pub fn polar_fixed_points(&self) -> (RegState, RegState) {
        (
            RegState::new([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]),
            RegState::new([-1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, -0.5 / self.c]),
        )
    }

    /// `f` restricted to the rotating Kepler problem: `1 + (1 - xi0)(L - c - 1/2)`.
    pub fn f(&self, xi0: f64, l: f64) -> f64 {
        1.0 + (1.0 - xi0) * (l - self.c - 0.5)
    }
}

fn rot(a: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Apply the return map `R_r` on the geodesic page. With
/// `L = xi2 eta1 - xi1 eta2` the flow of `L` turns `(xi1, xi2)` clockwise,
/// so the map rotates both planes by `-T(c - L)`.
pub fn analytic_return(r: &RegState, ctx: &KeplerContext) -> Result<RegState> {
    if r.xi[3].abs() > 1e-10 || r.eta[3] < -1e-10 {
        return Err(Error::OutsidePage(format!("xi3 = {}, eta3 = {}", r.xi[3], r.eta[3])));
    }
    let l = angular_momentum_reg(r);
    let a = -ctx.rotation_angle(l)?;
    let (x1, x2) = rot(a, r.xi[1], r.xi[2]);
    let (e1, e2) = rot(a, r.eta[1], r.eta[2]);
    Ok(RegState::new([r.xi[0], x1, x2, r.xi[3]], [r.eta[0], e1, e2, r.eta[3]]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircularOrbits {
    pub c: f64,
    pub r_dir: f64,
    pub r_ret: f64,
    pub r_unbounded: f64,
    pub p_dir: f64,
    pub p_ret: f64,
    /// Radii `(dir, ret, unbounded)` from the Cardano expressions, absent
    /// when the guard selected the root-finder branch.
    pub cardano: Option<[f64; 3]>,
    /// Radii `(dir, ret, unbounded)` from bracketed root finding.
    pub bracketed: [f64; 3],
}

fn cardano_radii(c: f64) -> [f64; 3] {
    let disc = Complex64::new(24.0 * c * c * c + 81.0, 0.0).sqrt() * 6.0;
    let u = (Complex64::new(-54.0 - 8.0 * c * c * c, 0.0) + disc).cbrt();
    let v = (Complex64::new(54.0 + 8.0 * c * c * c, 0.0) + disc).cbrt();
    let su = u / 6.0 + (2.0 / 3.0) * c * c / u - c / 3.0;
    let sv = v / 6.0 + (2.0 / 3.0) * c * c / v + c / 3.0;
    let r_unb = (su * su).re;
    let r_ret = (sv * sv).re;
    [c * c - r_unb - r_ret, r_ret, r_unb]
}

fn polish(mut s: f64, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..3 {
        let d = df(s);
        if d == 0.0 {
            break;
        }
        let next = s - f(s) / d;
        if !next.is_finite() || (next - s).abs() > 1e-6 {
            break;
        }
        s = next;
    }
    s
}

fn bracketed_radii(c: f64) -> Result<[f64; 3]> {
    // sqrt(r) solves 2 s^3 + 2 c s^2 + 1 = 0 (direct, unbounded) or
    // 2 s^3 - 2 c s^2 - 1 = 0 (retrograde).
    let h = |s: f64| 2.0 * s * s * s + 2.0 * c * s * s + 1.0;
    let dh = |s: f64| 6.0 * s * s + 4.0 * c * s;
    let k = |s: f64| 2.0 * s * s * s - 2.0 * c * s * s - 1.0;
    let dk = |s: f64| 6.0 * s * s - 4.0 * c * s;
    let smin = -2.0 * c / 3.0;
    let fail = || Error::SamplingFailure(format!("circular orbit bracket failed at c = {c}"));
    let s_dir = if h(smin) >= 0.0 {
        smin
    } else {
        polish(brent(h, 0.0, smin, 1e-16).ok_or_else(fail)?, h, dh)
    };
    let s_unb = if h(smin) >= 0.0 {
        smin
    } else {
        polish(brent(h, smin, 1.0 - c, 1e-16).ok_or_else(fail)?, h, dh)
    };
    let s_ret = polish(brent(k, 0.0, 1.0 - 2.0 * c, 1e-16).ok_or_else(fail)?, k, dk);
    Ok([s_dir * s_dir, s_ret * s_ret, s_unb * s_unb])
}

/// Radii and momenta of the planar circular orbits at energy `c <= -3/2`.
pub fn circular_orbits(c: f64) -> Result<CircularOrbits> {
    if c > -1.5 {
        return Err(Error::SupercriticalEnergy(c));
    }
    let bracketed = bracketed_radii(c)?;
    let cardano = if (24.0 * c * c * c + 81.0).abs() < 1e-8 {
        None
    } else {
        Some(cardano_radii(c))
    };
    let [r_dir, r_ret, r_unbounded] = cardano.unwrap_or(bracketed);
    Ok(CircularOrbits {
        c,
        r_dir,
        r_ret,
        r_unbounded,
        p_dir: 1.0 / r_dir.sqrt(),
        p_ret: 1.0 / r_ret.sqrt(),
        cardano,
        bracketed,
    })
}

/// An invariant circle of the return map inside the geodesic page: fixed
/// `xi0 = x`, `(xi1, xi2)` and `(eta1, eta2)` rotating together.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantCircle {
    pub x: f64,
    /// `(eta0, eta1, eta2)` at the base point `(x, sqrt(1 - x^2), 0, 0)`,
    /// projected to the tangent space there.
    pub eta_fix: V3,
    pub eta3: f64,
    pub l: f64,
}

impl InvariantCircle {
    pub fn point(&self, t: f64) -> RegState {
        let w = (1.0 - self.x * self.x).max(0.0).sqrt();
        let (x1, x2) = rot(t, w, 0.0);
        let (e1, e2) = rot(t, self.eta_fix[1], self.eta_fix[2]);
        RegState::new([self.x, x1, x2, 0.0], [self.eta_fix[0], e1, e2, self.eta3])
    }

    /// Angle parameter of a point of the circle.
    pub fn parameter(&self, r: &RegState) -> f64 {
        r.xi[2].atan2(r.xi[1])
    }
}

pub fn invariant_circle(x: f64, eta_fix: &V3, ctx: &KeplerContext) -> Result<InvariantCircle> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::OutsidePage(format!("x = {x} outside [-1, 1]")));
    }
    let base = V4::new(x, (1.0 - x * x).max(0.0).sqrt(), 0.0, 0.0);
    let e = V4::new(eta_fix[0], eta_fix[1], eta_fix[2], 0.0);
    let e = e - base * base.dot(&e);
    let l = base[2] * e[1] - base[1] * e[2];
    let f = ctx.f(x, l);
    let slack = 1.0 / (f * f) - e.norm_squared();
    if f <= 0.0 || slack < -1e-14 {
        return Err(Error::OutsidePage(format!("|eta_fix| f = {} > 1", e.norm() * f)));
    }
    Ok(InvariantCircle {
        x,
        eta_fix: V3::new(e[0], e[1], e[2]),
        eta3: slack.max(0.0).sqrt(),
        l,
    })
}

/// Random interior point of the geodesic page on `Q = 1/2`, with
/// `eta3 >= margin |eta|`.
pub fn sample_page<R: Rng + ?Sized>(ctx: &KeplerContext, margin: f64, rng: &mut R) -> Result<RegState> {
    let spec = ctx.spec();
    for _ in 0..1000 {
        let mut xi = random_unit4(rng);
        xi[3] = 0.0;
        let n = xi.norm();
        if n < 1e-6 {
            continue;
        }
        xi /= n;
        let mut e = random_unit4(rng);
        e -= xi * xi.dot(&e);
        e[3] = e[3].abs();
        let Ok(r) = scale_to_level(&xi, &e, &spec) else {
            continue;
        };
        if r.eta[3] < margin * r.eta.norm() || ctx.c - angular_momentum_reg(&r) >= 0.0 {
            continue;
        }
        if f_eval(&r, &spec)?.f <= 0.0 {
            continue;
        }
        return Ok(r);
    }
    Err(Error::SamplingFailure("no interior page point found".into()))
}
