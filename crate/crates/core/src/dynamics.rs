//! Hamiltonians and vector fields, unregularized and Moser-regularized.
//!
//! The regularized Hamiltonian is `Q = 1/2 f^2 |eta|^2` with
//! `f = 1 + (1 - xi0) b + M`, `b = -(c + 1/2) + W(y)` and `M = -<xi_vec, A(y)>`,
//! where `y = eta0 xi_vec + (1 - xi0) eta_vec` is the chart-local position.
//! Everything is written against [`StarkZeemanField`], so the Earth chart and
//! custom fields reuse the same chain rule.

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::brent;
use crate::phase::{Chart, RegState, StarkZeemanField, SystemSpec, UnregState, V3, V4};

const COLLISION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegTangent {
    pub d_xi: V4,
    pub d_eta: V4,
}

impl RegTangent {
    /// `<xi, d_xi>` and `<d_xi, eta> + <xi, d_eta>`.
    pub fn tangency_residual(&self, r: &RegState) -> (f64, f64) {
        (r.xi.dot(&self.d_xi), self.d_xi.dot(&r.eta) + r.xi.dot(&self.d_eta))
    }

    pub fn to_array(&self) -> [f64; 8] {
        RegState {
            xi: self.d_xi,
            eta: self.d_eta,
        }
        .to_array()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnregTangent {
    pub d_q: V3,
    pub d_p: V3,
}

/// The restricted three-body field in the coordinates of one chart.
#[derive(Clone, Copy, Debug)]
pub struct ThreeBodyField {
    pub mu: f64,
    pub chart: Chart,
}

impl ThreeBodyField {
    fn origin_x(&self) -> f64 {
        match self.chart {
            Chart::Earth => self.mu,
            _ => self.mu - 1.0,
        }
    }

    /// Mass and position of the primary that is not regularized.
    fn other(&self) -> (f64, V3) {
        match self.chart {
            Chart::Earth => (self.mu, V3::new(self.mu - 1.0, 0.0, 0.0)),
            _ => (1.0 - self.mu, V3::new(self.mu, 0.0, 0.0)),
        }
    }

    fn other_offset(&self, y: &V3) -> V3 {
        let (_, e) = self.other();
        y + V3::new(self.origin_x(), 0.0, 0.0) - e
    }
}

impl StarkZeemanField for ThreeBodyField {
    fn coupling(&self) -> f64 {
        match self.chart {
            Chart::Earth => 1.0 - self.mu,
            _ => self.mu,
        }
    }

    fn magnetic(&self, y: &V3) -> (V3, Matrix3<f64>) {
        let a = V3::new(y[1], -(y[0] + self.origin_x()), 0.0);
        let jac = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        (a, jac)
    }

    fn potential(&self, y: &V3) -> (f64, V3) {
        let (w, gw) = self.reduced_potential(y);
        let q = y + V3::new(self.origin_x(), 0.0, 0.0);
        (w - 0.5 * (q[0] * q[0] + q[1] * q[1]), gw - V3::new(q[0], q[1], 0.0))
    }

    fn reduced_potential(&self, y: &V3) -> (f64, V3) {
        let (g, _) = self.other();
        if g == 0.0 {
            return (0.0, V3::zeros());
        }
        let d = self.other_offset(y);
        let r = d.norm();
        (-g / r, d * (g / (r * r * r)))
    }
}

/// The system with `f = 1`: geodesic flow of the round three-sphere.
#[derive(Clone, Copy, Debug, Default)]
pub struct RoundSphere;

impl StarkZeemanField for RoundSphere {
    fn coupling(&self) -> f64 {
        1.0
    }

    fn magnetic(&self, _y: &V3) -> (V3, Matrix3<f64>) {
        (V3::zeros(), Matrix3::zeros())
    }

    fn potential(&self, _y: &V3) -> (f64, V3) {
        (0.0, V3::zeros())
    }

    fn is_round_sphere(&self) -> bool {
        true
    }
}

/// Field data at a chart-local position.
#[derive(Clone, Copy, Debug)]
pub struct FieldEval {
    pub a: V3,
    pub da: Matrix3<f64>,
    pub w: f64,
    pub grad_w: V3,
    pub grad_v1: V3,
}

pub fn field_eval(spec: &SystemSpec, y: &V3) -> Result<FieldEval> {
    let eval = |field: &dyn StarkZeemanField| {
        let (a, da) = field.magnetic(y);
        let (w, grad_w) = field.reduced_potential(y);
        let (_, grad_v1) = field.potential(y);
        FieldEval {
            a,
            da,
            w,
            grad_w,
            grad_v1,
        }
    };
    match &spec.stark_zeeman {
        Some(field) => Ok(eval(field.as_ref())),
        None => {
            let field = ThreeBodyField {
                mu: spec.mu,
                chart: spec.chart,
            };
            let (g, _) = field.other();
            if g > 0.0 {
                let d = field.other_offset(y).norm();
                if d < COLLISION_TOL {
                    return Err(Error::OtherPrimaryCollision(d));
                }
            }
            Ok(eval(&field))
        }
    }
}

/// `f`, its decomposition and its gradient at a regularized state.
#[derive(Clone, Copy, Debug)]
pub struct FEval {
    pub f: f64,
    pub b: f64,
    pub m: f64,
    pub f_xi: V4,
    pub f_eta: V4,
}

fn is_round(spec: &SystemSpec) -> bool {
    spec.stark_zeeman.as_ref().is_some_and(|f| f.is_round_sphere())
}

pub fn f_eval(r: &RegState, spec: &SystemSpec) -> Result<FEval> {
    if is_round(spec) {
        return Ok(FEval {
            f: 1.0,
            b: 0.0,
            m: 0.0,
            f_xi: V4::zeros(),
            f_eta: V4::zeros(),
        });
    }
    let s = 1.0 - r.xi[0];
    let xv = r.xi_vec();
    let ev = r.eta_vec();
    let y = r.local_position();
    let fe = field_eval(spec, &y)?;
    let b = -(spec.c + 0.5) + fe.w;
    let m = -xv.dot(&fe.a);
    let f = 1.0 + s * b + m;
    // d f / d z = (ds/dz) b + G . dy/dz - (d xi_vec/dz) . A
    let g = fe.grad_w * s - fe.da.transpose() * xv;
    let f_xi = V4::new(
        -b - g.dot(&ev),
        r.eta[0] * g[0] - fe.a[0],
        r.eta[0] * g[1] - fe.a[1],
        r.eta[0] * g[2] - fe.a[2],
    );
    let f_eta = V4::new(g.dot(&xv), s * g[0], s * g[1], s * g[2]);
    Ok(FEval { f, b, m, f_xi, f_eta })
}

/// `f` for the three-body problem from its closed form, independent of
/// [`f_eval`]: `f = 1 + (1 - xi0) b + M` with `b`, `M` written out directly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FParts {
    pub f: f64,
    pub b: f64,
    pub m: f64,
}

pub fn f_3bp(r: &RegState, spec: &SystemSpec) -> Result<FParts> {
    if !spec.is_three_body() {
        return Err(Error::ConfigError("f_3bp needs a three-body system".into()));
    }
    let (x0, x1, x2, x3) = (r.xi[0], r.xi[1], r.xi[2], r.xi[3]);
    let (e0, e1, e2, e3) = (r.eta[0], r.eta[1], r.eta[2], r.eta[3]);
    let s = 1.0 - x0;
    // separation vector from the other primary, and the other mass
    let (shift, g_other, m_lin) = match spec.chart {
        Chart::Earth => (1.0, spec.mu, x2 * spec.mu),
        _ => (-1.0, 1.0 - spec.mu, -x2 * (1.0 - spec.mu)),
    };
    let d = ((e1 * s + x1 * e0 + shift).powi(2) + (e2 * s + x2 * e0).powi(2) + (e3 * s + x3 * e0).powi(2)).sqrt();
    let coulomb = if g_other > 0.0 {
        if d < COLLISION_TOL {
            return Err(Error::OtherPrimaryCollision(d));
        }
        g_other / d
    } else {
        0.0
    };
    let l = x2 * e1 - x1 * e2;
    let b = -(spec.c + 0.5) - coulomb;
    let m = s * l + m_lin;
    let f = 1.0 + s * (-(spec.c + 0.5) + l) + m_lin - s * coulomb;
    Ok(FParts { f, b, m })
}

pub fn q_reg(r: &RegState, spec: &SystemSpec) -> Result<f64> {
    let f = f_eval(r, spec)?.f;
    Ok(0.5 * f * f * r.eta.norm_squared())
}

/// Hamiltonian vector field of `Q` on T*S^3 with `omega = d eta ^ d xi`.
pub fn x_q(r: &RegState, spec: &SystemSpec) -> Result<RegTangent> {
    let nn = r.eta.norm_squared();
    if is_round(spec) {
        return Ok(RegTangent {
            d_xi: r.eta,
            d_eta: -r.xi * nn,
        });
    }
    let fe = f_eval(r, spec)?;
    Ok(x_q_from(r, &fe))
}

pub(crate) fn x_q_from(r: &RegState, fe: &FEval) -> RegTangent {
    let nn = r.eta.norm_squared();
    let f = fe.f;
    let fe_xi = fe.f_eta.dot(&r.xi);
    let fe_eta = fe.f_eta.dot(&r.eta);
    let fx_xi = fe.f_xi.dot(&r.xi);
    let d_xi = (r.eta * f + (fe.f_eta - r.xi * fe_xi) * nn) * f;
    let d_eta = (r.eta * fe_xi - fe.f_xi - r.xi * (f + fe_eta - fx_xi)) * (nn * f);
    RegTangent { d_xi, d_eta }
}

/// Rate of unregularized time along the `X_Q` flow, `f (1 - xi0) |eta|^2`;
/// equals `g |y|` on the energy surface.
pub fn physical_time_rate(r: &RegState, spec: &SystemSpec) -> Result<f64> {
    let f = f_eval(r, spec)?.f;
    Ok(f * (1.0 - r.xi[0]) * r.eta.norm_squared())
}

fn primary_distances(s: &UnregState, spec: &SystemSpec) -> Result<(f64, f64)> {
    let rm = (s.q - spec.moon_position()).norm();
    let re = (s.q - spec.earth_position()).norm();
    if rm < COLLISION_TOL || (spec.mu < 1.0 && re < COLLISION_TOL) {
        return Err(Error::CollisionInput(rm.min(re)));
    }
    Ok((rm, re))
}

/// Jacobi Hamiltonian `1/2 |p|^2 - mu/|q - m| - (1 - mu)/|q - e| + p1 q2 - p2 q1`.
pub fn jacobi_h(s: &UnregState, spec: &SystemSpec) -> Result<f64> {
    let (rm, re) = primary_distances(s, spec)?;
    let earth = if spec.mu < 1.0 { (1.0 - spec.mu) / re } else { 0.0 };
    Ok(0.5 * s.p.norm_squared() - spec.mu / rm - earth + s.p[0] * s.q[1] - s.p[1] * s.q[0])
}

/// The unregularized Hamiltonian of the system: Jacobi for the three-body
/// problem, `1/2 |p + A|^2 - g/|q| + V1` for a custom field.
pub fn hamiltonian(s: &UnregState, spec: &SystemSpec) -> Result<f64> {
    match &spec.stark_zeeman {
        None => jacobi_h(s, spec),
        Some(field) => {
            let r = s.q.norm();
            if r < COLLISION_TOL {
                return Err(Error::CollisionInput(r));
            }
            let (a, _) = field.magnetic(&s.q);
            let (v1, _) = field.potential(&s.q);
            Ok(0.5 * (s.p + a).norm_squared() - field.coupling() / r + v1)
        }
    }
}

pub fn x_h(s: &UnregState, spec: &SystemSpec) -> Result<UnregTangent> {
    match &spec.stark_zeeman {
        None => {
            let (rm, re) = primary_distances(s, spec)?;
            let (q, p, mu) = (s.q, s.p, spec.mu);
            let dm = q - spec.moon_position();
            let de = q - spec.earth_position();
            let mut force = -dm * (mu / (rm * rm * rm));
            if mu < 1.0 {
                force -= de * ((1.0 - mu) / (re * re * re));
            }
            Ok(UnregTangent {
                d_q: V3::new(p[0] + q[1], p[1] - q[0], p[2]),
                d_p: V3::new(p[1], -p[0], 0.0) + force,
            })
        }
        Some(field) => {
            let r = s.q.norm();
            if r < COLLISION_TOL {
                return Err(Error::CollisionInput(r));
            }
            let (a, da) = field.magnetic(&s.q);
            let (_, gv1) = field.potential(&s.q);
            let v = s.p + a;
            let g = field.coupling();
            Ok(UnregTangent {
                d_q: v,
                d_p: -(da.transpose() * v) - s.q * (g / (r * r * r)) - gv1,
            })
        }
    }
}

/// Kepler energy `1/2 |p|^2 - 1/|q - m|` of the rotating Kepler problem.
pub fn kepler_k(s: &UnregState, spec: &SystemSpec) -> f64 {
    0.5 * s.p.norm_squared() - 1.0 / (s.q - spec.moon_position()).norm()
}

/// Angular momentum with the Jacobi sign, `p1 q2 - p2 q1`.
pub fn angular_momentum(s: &UnregState) -> f64 {
    s.p[0] * s.q[1] - s.p[1] * s.q[0]
}

/// The same angular momentum in regularized coordinates, `xi2 eta1 - xi1 eta2`.
pub fn angular_momentum_reg(r: &RegState) -> f64 {
    r.xi[2] * r.eta[1] - r.xi[1] * r.eta[2]
}

/// Scale `eta_dir` so that the state lands on `Q = g^2/2`, taking the
/// smallest positive scale. Along the scaling the chart-local position moves
/// out from the primary, so the first root sits on the component containing it.
pub fn scale_to_level(xi: &V4, eta_dir: &V4, spec: &SystemSpec) -> Result<RegState> {
    let base = crate::phase::project_to_ts3(xi, eta_dir)?;
    let n = base.eta.norm();
    if n < 1e-12 {
        return Err(Error::DegenerateInput("eta direction tangent part vanishes".into()));
    }
    let dir = base.eta / n;
    let g = spec.coupling();
    let k = |s: f64| -> f64 {
        let r = RegState {
            xi: base.xi,
            eta: dir * s,
        };
        match f_eval(&r, spec) {
            Ok(fe) => s * fe.f - g,
            Err(_) => f64::NAN,
        }
    };
    let mut lo = 1e-6 * g;
    let mut k_lo = k(lo);
    if !(k_lo < 0.0) {
        return Err(Error::SamplingFailure(
            "level function not negative near the primary".into(),
        ));
    }
    let mut hi = lo;
    let mut k_hi = k_lo;
    while k_hi < 0.0 {
        lo = hi;
        k_lo = k_hi;
        hi *= 1.01;
        if hi > 1e6 {
            return Err(Error::SamplingFailure("no level crossing along the ray".into()));
        }
        k_hi = k(hi);
        if k_hi.is_nan() {
            return Err(Error::SamplingFailure("ray hits a singularity".into()));
        }
    }
    let _ = k_lo;
    let mut s =
        brent(k, lo, hi, 1e-15 * hi).ok_or_else(|| Error::SamplingFailure("bracketed level solve failed".into()))?;
    // Newton polish on s f(s) = g
    for _ in 0..3 {
        let r = RegState {
            xi: base.xi,
            eta: dir * s,
        };
        let fe = f_eval(&r, spec)?;
        let dk = fe.f + s * fe.f_eta.dot(&dir);
        let step = (s * fe.f - g) / dk;
        if !step.is_finite() || step.abs() > 1e-6 * s {
            break;
        }
        s -= step;
    }
    Ok(RegState {
        xi: base.xi,
        eta: dir * s,
    })
}

/// Uniform `xi` on S^3 and a uniform tangent direction, scaled to the level set.
pub fn sample_level_set<R: Rng + ?Sized>(spec: &SystemSpec, rng: &mut R) -> Result<RegState> {
    let xi = random_unit4(rng);
    let eta = V4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    scale_to_level(&xi, &eta, spec)
}

pub fn random_unit4<R: Rng + ?Sized>(rng: &mut R) -> V4 {
    loop {
        let v = V4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{reg_to_unreg, unreg_to_reg};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_reg(rng: &mut ChaCha8Rng, scale: f64) -> RegState {
        let xi = random_unit4(rng);
        let eta = V4::from_fn(|_, _| rng.gen_range(-1.0..1.0)) * scale;
        crate::phase::project_to_ts3(&xi, &eta).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn jacobi_circular_orbit_value() {
        let spec = SystemSpec::rotating_kepler(-1.5);
        let s = UnregState::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert!((jacobi_h(&s, &spec).unwrap() + 1.5).abs() < 1e-15);
    }

    #[test]
    fn jacobi_guards_collisions() {
        let spec = SystemSpec::moon(0.3, -2.0).unwrap();
        let s = UnregState {
            q: spec.earth_position() + V3::new(1e-13, 0.0, 0.0),
            p: V3::zeros(),
        };
        assert!(matches!(jacobi_h(&s, &spec), Err(Error::CollisionInput(_))));
    }

    #[test]
    fn jacobi_matches_completed_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mu = rng.gen_range(0.05..0.95);
            let spec = SystemSpec::moon(mu, -2.0).unwrap();
            let s = UnregState {
                q: V3::from_fn(|_, _| rng.gen_range(-1.5..1.5)),
                p: V3::from_fn(|_, _| rng.gen_range(-1.5..1.5)),
            };
            let (q, p) = (s.q, s.p);
            let rm = (q - spec.moon_position()).norm();
            let re = (q - spec.earth_position()).norm();
            let square = 0.5 * ((p[0] + q[1]).powi(2) + (p[1] - q[0]).powi(2) + p[2] * p[2]);
            let v1 = -(1.0 - mu) / re - 0.5 * (q[0] * q[0] + q[1] * q[1]);
            let h = jacobi_h(&s, &spec).unwrap();
            assert!((h - (square + v1 - mu / rm)).abs() < 1e-12);
            assert!((h - hamiltonian(&s, &spec).unwrap()).abs() == 0.0);
        }
    }

    #[test]
    fn f_is_one_at_north_pole() {
        let spec = SystemSpec::moon(0.4, -1.9).unwrap();
        let r = RegState::new([1.0, 0.0, 0.0, 0.0], [0.0, 0.3, -0.7, 0.2]);
        assert!((f_eval(&r, &spec).unwrap().f - 1.0).abs() < 1e-15);
        assert!((f_3bp(&r, &spec).unwrap().f - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotating_kepler_f_closed_form() {
        let spec = SystemSpec::rotating_kepler(-2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let r = random_reg(&mut rng, 1.0);
            let expect = 1.0 + (1.0 - r.xi[0]) * (2.0 - 0.5 + angular_momentum_reg(&r));
            assert!((f_eval(&r, &spec).unwrap().f - expect).abs() < 1e-14);
            assert!((f_3bp(&r, &spec).unwrap().f - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn direct_f_matches_generic_composition_both_charts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for chart in [Chart::Moon, Chart::Earth] {
            for _ in 0..500 {
                let spec = SystemSpec::new(rng.gen_range(0.05..0.95), -1.8, chart).unwrap();
                let r = random_reg(&mut rng, 0.8);
                let direct = f_3bp(&r, &spec).unwrap();
                let generic = f_eval(&r, &spec).unwrap();
                assert!((direct.f - generic.f).abs() < 1e-14);
                assert!((direct.b - generic.b).abs() < 1e-14);
                assert!((direct.m - generic.m).abs() < 1e-14);
                let composed = 1.0 + (1.0 - r.xi[0]) * direct.b + direct.m;
                assert!((direct.f - composed).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn f_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for chart in [Chart::Moon, Chart::Earth] {
            for _ in 0..300 {
                let spec = SystemSpec::new(rng.gen_range(0.05..0.95), -1.7, chart).unwrap();
                let r = random_reg(&mut rng, 0.8);
                let fe = f_eval(&r, &spec).unwrap();
                let x = r.to_array();
                for k in 0..8 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[k] += h;
                    xm[k] -= h;
                    let fp = f_3bp(&RegState::from_slice(&xp), &spec).unwrap().f;
                    let fm = f_3bp(&RegState::from_slice(&xm), &spec).unwrap().f;
                    let fd = (fp - fm) / (2.0 * h);
                    let an = if k < 4 { fe.f_xi[k] } else { fe.f_eta[k - 4] };
                    assert!(rel_close(an, fd, 1e-6), "k={k} an={an} fd={fd}");
                }
            }
        }
    }

    #[test]
    fn round_sphere_q_and_field() {
        let spec = SystemSpec::stark_zeeman(std::sync::Arc::new(RoundSphere), -3.0).unwrap();
        let r = RegState::new([0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.6, 0.8]);
        assert_eq!(q_reg(&r, &spec).unwrap(), 0.5);
        let x = x_q(&r, &spec).unwrap();
        assert_eq!(x.d_xi, r.eta);
        assert_eq!(x.d_eta, -r.xi);
    }

    #[test]
    fn level_set_projection_hits_level() {
        let spec = SystemSpec::moon(0.5, -1.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let r = sample_level_set(&spec, &mut rng).unwrap();
            assert!((q_reg(&r, &spec).unwrap() - 0.125).abs() < 1e-10);
            assert!(r.constraint_residual() < 1e-12);
        }
    }

    fn fd_pairing_check(spec: &SystemSpec, r: &RegState) {
        let x = x_q(r, spec).unwrap();
        let (t1, t2) = x.tangency_residual(r);
        assert!(t1.abs() < 1e-10 && t2.abs() < 1e-10);
        // tangent basis of T*S^3: perturb along 8 coordinate directions and project
        let h = 1e-6;
        let scale = x.d_xi.norm() + x.d_eta.norm();
        for k in 0..8 {
            let mut v = [0.0; 8];
            v[k] = 1.0;
            let mut vx = V4::from_column_slice(&v[..4]);
            let mut ve = V4::from_column_slice(&v[4..]);
            // tangent projection: <xi, vx> = 0, <vx, eta> + <xi, ve> = 0
            vx -= r.xi * r.xi.dot(&vx);
            ve -= r.xi * (vx.dot(&r.eta) + r.xi.dot(&ve));
            let shift = |t: f64| crate::phase::project_to_ts3(&(r.xi + vx * t), &(r.eta + ve * t)).unwrap();
            let dq = (q_reg(&shift(h), spec).unwrap() - q_reg(&shift(-h), spec).unwrap()) / (2.0 * h);
            let omega = x.d_eta.dot(&vx) - x.d_xi.dot(&ve);
            assert!(
                (omega + dq).abs() < 1e-6 * (1.0 + scale),
                "k={k} omega={omega} -dQ={}",
                -dq
            );
        }
    }

    #[test]
    fn x_q_matches_symplectic_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for chart in [Chart::Moon, Chart::Earth] {
            for _ in 0..100 {
                let spec = SystemSpec::new(rng.gen_range(0.1..0.9), -1.9, chart).unwrap();
                let r = random_reg(&mut rng, 0.9);
                fd_pairing_check(&spec, &r);
            }
        }
    }

    #[test]
    fn dq_along_x_q_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = SystemSpec::moon(0.3, -2.1).unwrap();
        for _ in 0..100 {
            let r = random_reg(&mut rng, 0.9);
            let fe = f_eval(&r, &spec).unwrap();
            let x = x_q_from(&r, &fe);
            let nn = r.eta.norm_squared();
            let dq =
                (fe.f_xi * (fe.f * nn)).dot(&x.d_xi) + (fe.f_eta * (fe.f * nn) + r.eta * (fe.f * fe.f)).dot(&x.d_eta);
            assert!(dq.abs() < 1e-10);
        }
    }

    #[test]
    fn planar_set_is_invariant_for_x_h() {
        let spec = SystemSpec::moon(0.3, -2.0).unwrap();
        let s = UnregState::new([0.2, 0.4, 0.0], [0.1, -0.3, 0.0]);
        let x = x_h(&s, &spec).unwrap();
        assert_eq!(x.d_q[2], 0.0);
        assert_eq!(x.d_p[2], 0.0);
    }

    #[test]
    fn x_h_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-6;
        for _ in 0..300 {
            let spec = SystemSpec::moon(rng.gen_range(0.05..0.95), -2.0).unwrap();
            let s = UnregState {
                q: V3::from_fn(|_, _| rng.gen_range(-1.5..1.5)),
                p: V3::from_fn(|_, _| rng.gen_range(-1.5..1.5)),
            };
            let x = x_h(&s, &spec).unwrap();
            let a = s.to_array();
            for k in 0..6 {
                let mut ap = a;
                let mut am = a;
                ap[k] += h;
                am[k] -= h;
                let d = (jacobi_h(&UnregState::from_slice(&ap), &spec).unwrap()
                    - jacobi_h(&UnregState::from_slice(&am), &spec).unwrap())
                    / (2.0 * h);
                // q-dot = dH/dp, p-dot = -dH/dq
                let an = if k < 3 { -x.d_p[k] } else { x.d_q[k - 3] };
                assert!(rel_close(an, d, 1e-6), "k={k} an={an} fd={d}");
            }
        }
    }

    #[test]
    fn direct_circular_orbit_is_tangent() {
        let spec = SystemSpec::rotating_kepler(-1.5);
        let s = UnregState::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let x = x_h(&s, &spec).unwrap();
        assert!(x.d_q.dot(&s.q).abs() < 1e-10);
    }

    /// Push `X_Q` through the differential of the inverse Moser map and
    /// compare with `g |y| X_H`.
    #[test]
    fn regularized_field_is_conjugate_to_physical_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for chart in [Chart::Moon, Chart::Earth] {
            for _ in 0..100 {
                let mu = rng.gen_range(0.1..0.9);
                let base = SystemSpec::new(mu, -1.9, chart).unwrap();
                let r = sample_level_set(&base, &mut rng).unwrap();
                if 1.0 - r.xi[0] < 1e-2 {
                    continue;
                }
                let x = x_q(&r, &base).unwrap();
                let h = 1e-6;
                let push = |t: f64| {
                    reg_to_unreg(
                        &RegState {
                            xi: r.xi + x.d_xi * t,
                            eta: r.eta + x.d_eta * t,
                        },
                        &base,
                    )
                    .unwrap()
                };
                let (sp, sm) = (push(h), push(-h));
                let dq = (sp.q - sm.q) / (2.0 * h);
                let dp = (sp.p - sm.p) / (2.0 * h);
                let s = reg_to_unreg(&r, &base).unwrap();
                let y = (s.q - base.origin()).norm();
                let xh = x_h(&s, &base).unwrap();
                let g = base.coupling();
                let scale = g * y * (xh.d_q.norm() + xh.d_p.norm());
                assert!((dq - xh.d_q * (g * y)).norm() < 1e-6 * (1.0 + scale));
                assert!((dp - xh.d_p * (g * y)).norm() < 1e-6 * (1.0 + scale));
                assert!((jacobi_h(&s, &base).unwrap() - base.c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn physical_level_maps_to_q_level_in_both_charts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for chart in [Chart::Moon, Chart::Earth] {
            for _ in 0..100 {
                let mu = rng.gen_range(0.1..0.9);
                let s = UnregState {
                    q: V3::from_fn(|_, _| rng.gen_range(-1.2..1.2)),
                    p: V3::from_fn(|_, _| rng.gen_range(-1.2..1.2)),
                };
                let probe = SystemSpec::new(mu, 0.0, chart).unwrap();
                let c = jacobi_h(&s, &probe).unwrap();
                let spec = probe.with_c(c);
                let r = unreg_to_reg(&s, &spec);
                assert!((q_reg(&r, &spec).unwrap() - spec.q_level()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn physical_time_rate_is_g_times_distance_on_level() {
        let spec = SystemSpec::earth(0.3, -1.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let r = sample_level_set(&spec, &mut rng).unwrap();
            let y = r.local_position().norm();
            assert!((physical_time_rate(&r, &spec).unwrap() - spec.coupling() * y).abs() < 1e-10);
        }
    }
}
