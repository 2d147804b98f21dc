//! Phase-space types and the Moser coordinate transitions.
//!
//! Unregularized states live in the rotating frame with the Moon at
//! `(mu - 1, 0, 0)` and the Earth at `(mu, 0, 0)`. A regularized state is a
//! point of T*S^3 seen inside T*R^4; the chart decides which primary sits at
//! the origin before the stereographic swap of positions and momenta.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type V3 = Vector3<f64>;
pub type V4 = Vector4<f64>;

/// Guard for `reg_to_unreg` near the north pole.
pub const COLLISION_GUARD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnregState {
    pub q: V3,
    pub p: V3,
}

impl UnregState {
    pub fn new(q: [f64; 3], p: [f64; 3]) -> Self {
        Self {
            q: V3::from(q),
            p: V3::from(p),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.q[0], self.q[1], self.q[2], self.p[0], self.p[1], self.p[2]]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            q: V3::new(v[0], v[1], v[2]),
            p: V3::new(v[3], v[4], v[5]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegState {
    pub xi: V4,
    pub eta: V4,
}

impl RegState {
    pub fn new(xi: [f64; 4], eta: [f64; 4]) -> Self {
        Self {
            xi: V4::from(xi),
            eta: V4::from(eta),
        }
    }

    pub fn to_array(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        out[..4].copy_from_slice(self.xi.as_slice());
        out[4..].copy_from_slice(self.eta.as_slice());
        out
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            xi: V4::new(v[0], v[1], v[2], v[3]),
            eta: V4::new(v[4], v[5], v[6], v[7]),
        }
    }

    /// Largest violation of `|xi| = 1` and `<xi, eta> = 0`.
    pub fn constraint_residual(&self) -> f64 {
        (self.xi.norm_squared() - 1.0).abs().max(self.xi.dot(&self.eta).abs())
    }

    /// Spatial part `(xi1, xi2, xi3)`.
    pub fn xi_vec(&self) -> V3 {
        V3::new(self.xi[1], self.xi[2], self.xi[3])
    }

    /// Spatial part `(eta1, eta2, eta3)`.
    pub fn eta_vec(&self) -> V3 {
        V3::new(self.eta[1], self.eta[2], self.eta[3])
    }

    /// Chart-local position `y = eta0 xi_vec + (1 - xi0) eta_vec`, defined everywhere.
    pub fn local_position(&self) -> V3 {
        self.xi_vec() * self.eta[0] + self.eta_vec() * (1.0 - self.xi[0])
    }

    /// Euclidean distance in R^8.
    pub fn distance(&self, other: &RegState) -> f64 {
        ((self.xi - other.xi).norm_squared() + (self.eta - other.eta).norm_squared()).sqrt()
    }
}

/// Which primary is moved to the origin before regularizing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Chart {
    Moon,
    Earth,
    /// A general Stark-Zeeman system with its Coulomb centre at the origin.
    SingleCenter,
}

/// A Stark-Zeeman field `H = 1/2 |p + A(y)|^2 - g/|y| + V1(y)` in chart-local
/// coordinates. `A` must have vanishing third component and depend on
/// `(y1, y2)` only.
pub trait StarkZeemanField: Send + Sync + fmt::Debug {
    fn coupling(&self) -> f64;

    /// `A(y)` together with its Jacobian, `jac[(i, j)] = dA_i/dy_j`.
    fn magnetic(&self, y: &V3) -> (V3, Matrix3<f64>);

    /// `V1(y)` and its gradient.
    fn potential(&self, y: &V3) -> (f64, V3);

    /// `W = 1/2 |A|^2 + V1` and its gradient. Override when the sum cancels
    /// analytically.
    fn reduced_potential(&self, y: &V3) -> (f64, V3) {
        let (a, jac) = self.magnetic(y);
        let (v, gv) = self.potential(y);
        (0.5 * a.norm_squared() + v, jac.transpose() * a + gv)
    }

    /// Marks the system whose regularized `f` is identically one.
    fn is_round_sphere(&self) -> bool {
        false
    }
}

#[derive(Clone)]
pub struct SystemSpec {
    pub mu: f64,
    pub c: f64,
    pub chart: Chart,
    pub stark_zeeman: Option<Arc<dyn StarkZeemanField>>,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("mu", &self.mu)
            .field("c", &self.c)
            .field("chart", &self.chart)
            .field("stark_zeeman", &self.stark_zeeman)
            .finish()
    }
}

impl SystemSpec {
    /// Restricted three-body problem regularized at the given primary.
    pub fn new(mu: f64, c: f64, chart: Chart) -> Result<Self> {
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(Error::OutOfRange(format!("mu = {mu} not in (0, 1]")));
        }
        if chart == Chart::SingleCenter {
            return Err(Error::ConfigError(
                "SingleCenter chart needs a Stark-Zeeman field".into(),
            ));
        }
        if chart == Chart::Earth && mu >= 1.0 {
            return Err(Error::OutOfRange("Earth chart needs mu < 1".into()));
        }
        if !c.is_finite() {
            return Err(Error::OutOfRange(format!("c = {c}")));
        }
        Ok(Self {
            mu,
            c,
            chart,
            stark_zeeman: None,
        })
    }

    pub fn moon(mu: f64, c: f64) -> Result<Self> {
        Self::new(mu, c, Chart::Moon)
    }

    pub fn earth(mu: f64, c: f64) -> Result<Self> {
        Self::new(mu, c, Chart::Earth)
    }

    /// Rotating Kepler problem: `mu = 1`, primary at the origin.
    pub fn rotating_kepler(c: f64) -> Self {
        Self {
            mu: 1.0,
            c,
            chart: Chart::Moon,
            stark_zeeman: None,
        }
    }

    pub fn stark_zeeman(field: Arc<dyn StarkZeemanField>, c: f64) -> Result<Self> {
        if !(field.coupling() > 0.0) {
            return Err(Error::OutOfRange("coupling must be positive".into()));
        }
        Ok(Self {
            mu: 1.0,
            c,
            chart: Chart::SingleCenter,
            stark_zeeman: Some(field),
        })
    }

    pub fn with_c(&self, c: f64) -> Self {
        Self { c, ..self.clone() }
    }

    pub fn with_chart(&self, chart: Chart) -> Result<Self> {
        match chart {
            Chart::SingleCenter => Err(Error::ConfigError("use SystemSpec::stark_zeeman".into())),
            _ => Self::new(self.mu, self.c, chart),
        }
    }

    pub fn is_three_body(&self) -> bool {
        self.stark_zeeman.is_none()
    }

    pub fn moon_position(&self) -> V3 {
        moon_position(self.mu)
    }

    pub fn earth_position(&self) -> V3 {
        earth_position(self.mu)
    }

    /// Position of the regularized primary.
    pub fn origin(&self) -> V3 {
        match self.chart {
            Chart::Moon => self.moon_position(),
            Chart::Earth => self.earth_position(),
            Chart::SingleCenter => V3::zeros(),
        }
    }

    /// Coulomb coupling `g` of the regularized primary: `mu` or `1 - mu`.
    pub fn coupling(&self) -> f64 {
        match (&self.stark_zeeman, self.chart) {
            (Some(field), _) => field.coupling(),
            (None, Chart::Earth) => 1.0 - self.mu,
            (None, _) => self.mu,
        }
    }

    /// The energy level of `Q` containing the regularized component.
    pub fn q_level(&self) -> f64 {
        0.5 * self.coupling().powi(2)
    }
}

pub fn moon_position(mu: f64) -> V3 {
    V3::new(mu - 1.0, 0.0, 0.0)
}

pub fn earth_position(mu: f64) -> V3 {
    V3::new(mu, 0.0, 0.0)
}

/// Moser map: swap positions and momenta (`x = -p`) and project `x`
/// stereographically onto S^3.
pub fn unreg_to_reg(s: &UnregState, spec: &SystemSpec) -> RegState {
    let y = s.q - spec.origin();
    let x = -s.p;
    let n = x.norm_squared() + 1.0;
    let xy = x.dot(&y);
    let xv = x * (2.0 / n);
    let ev = y * (0.5 * n) - x * xy;
    RegState {
        xi: V4::new((n - 2.0) / n, xv[0], xv[1], xv[2]),
        eta: V4::new(xy, ev[0], ev[1], ev[2]),
    }
}

pub fn reg_to_unreg(r: &RegState, spec: &SystemSpec) -> Result<UnregState> {
    let s = 1.0 - r.xi[0];
    if s < COLLISION_GUARD {
        return Err(Error::CollisionLocus(s));
    }
    let x = r.xi_vec() / s;
    Ok(UnregState {
        q: r.local_position() + spec.origin(),
        p: -x,
    })
}

/// Renormalize `xi` and remove the component of `eta` along it.
pub fn project_to_ts3(xi: &V4, eta: &V4) -> Result<RegState> {
    let n = xi.norm();
    if !(n >= 1e-9) {
        return Err(Error::DegenerateInput(format!("|xi| = {n:e}")));
    }
    let xi = xi / n;
    let eta = eta - xi * xi.dot(eta);
    Ok(RegState { xi, eta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rest_above_moon_maps_to_south_pole() {
        let spec = SystemSpec::moon(0.3, -2.0).unwrap();
        let m = spec.moon_position();
        let s = UnregState {
            q: m + V3::new(0.0, 0.0, 1.0),
            p: V3::zeros(),
        };
        let r = unreg_to_reg(&s, &spec);
        assert_eq!(r.xi, V4::new(-1.0, 0.0, 0.0, 0.0));
        assert_eq!(r.eta, V4::new(0.0, 0.0, 0.0, 0.5));
        let back = reg_to_unreg(&r, &spec).unwrap();
        assert!((back.q - s.q).norm() < 1e-15);
        assert!(back.p.norm() < 1e-15);
    }

    #[test]
    fn north_pole_is_guarded() {
        let spec = SystemSpec::moon(0.3, -2.0).unwrap();
        let x = (1.0 - (1.0 - 1e-12_f64).powi(2)).sqrt();
        let r = RegState::new([1.0 - 1e-12, x, 0.0, 0.0], [0.0, 0.0, 0.3, 0.0]);
        assert!(matches!(reg_to_unreg(&r, &spec), Err(Error::CollisionLocus(_))));
    }

    #[test]
    fn projection_examples() {
        let r = project_to_ts3(&V4::new(2.0, 0.0, 0.0, 0.0), &V4::new(1.0, 1.0, 0.0, 0.0)).unwrap();
        assert_eq!(r.xi, V4::new(1.0, 0.0, 0.0, 0.0));
        assert_eq!(r.eta, V4::new(0.0, 1.0, 0.0, 0.0));
        assert!(matches!(
            project_to_ts3(&V4::new(1e-10, 0.0, 0.0, 0.0), &V4::zeros()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn projection_is_idempotent_on_constrained_pairs() {
        let xi = V4::new(0.5, 0.5, 0.5, 0.5);
        let eta = V4::new(0.3, -0.3, 0.1, -0.1);
        let r = project_to_ts3(&xi, &eta).unwrap();
        assert!((r.xi - xi).amax() < 1e-15);
        assert!((r.eta - eta).amax() < 1e-15);
    }

    #[test]
    fn earth_chart_translates_by_earth() {
        let spec = SystemSpec::earth(0.3, -2.0).unwrap();
        let s = UnregState::new([0.3, 0.0, 0.5], [0.0, 0.0, 0.0]);
        let r = unreg_to_reg(&s, &spec);
        assert!((r.eta[3] - 0.25).abs() < 1e-15);
    }
}
