//! Normal second-order data along the binding: the 2x2 block `S` that
//! governs the angular speed of the linearized flow around `B`, and its
//! unregularized counterpart.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{f_eval, random_unit4, scale_to_level, x_q};
use crate::error::{Error, Result};
use crate::phase::{Chart, RegState, SystemSpec, UnregState};

/// Symmetric block in the `(d/d eta3, d/d xi3)` frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalHessian {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
    pub eigen_min: f64,
}

impl NormalHessian {
    pub fn from_entries(s11: f64, s12: f64, s22: f64) -> Self {
        let mean = 0.5 * (s11 + s22);
        let rad = (0.25 * (s11 - s22).powi(2) + s12 * s12).sqrt();
        Self {
            s11,
            s12,
            s22,
            eigen_min: mean - rad,
        }
    }

    pub fn eigen_max(&self) -> f64 {
        self.s11 + self.s22 - self.eigen_min
    }

    /// `(u, v) S (u, v)^t / (u^2 + v^2)`.
    pub fn rate(&self, u: f64, v: f64) -> f64 {
        (self.s11 * u * u + 2.0 * self.s12 * u * v + self.s22 * v * v) / (u * u + v * v)
    }

    fn max_rel_diff(&self, other: &Self) -> f64 {
        let scale = 1.0 + self.s11.abs().max(self.s22.abs()).max(self.s12.abs());
        [(self.s11 - other.s11), (self.s12 - other.s12), (self.s22 - other.s22)]
            .iter()
            .map(|d| d.abs() / scale)
            .fold(0.0, f64::max)
    }
}

fn check_binding(r: &RegState) -> Result<()> {
    let d = r.xi[3].abs().max(r.eta[3].abs());
    if d > 1e-10 {
        return Err(Error::OffBinding(d));
    }
    Ok(())
}

/// Entries of `S` from the explicit three-body expressions (Moon chart,
/// including `mu = 1`). Other systems use [`hessian_s_lemma`].
pub fn hessian_s(r: &RegState, spec: &SystemSpec) -> Result<NormalHessian> {
    check_binding(r)?;
    if !spec.is_three_body() || spec.chart != Chart::Moon {
        return hessian_s_lemma(r, spec);
    }
    let (mu, c) = (spec.mu, spec.c);
    let (xi, eta) = (&r.xi, &r.eta);
    let s = 1.0 - xi[0];
    let l = xi[2] * eta[1] - xi[1] * eta[2];
    let nn = eta.norm_squared();
    let d = (eta[3] * s + xi[3] * eta[0]).powi(2)
        + (eta[2] * s + xi[2] * eta[0]).powi(2)
        + (eta[1] * s + xi[1] * eta[0] - 1.0).powi(2);
    let g = 1.0 - mu;
    let f = f_eval(r, spec)?.f;
    let eta_v = r.eta_vec();
    let xi_v = r.xi_vec();
    let (s11, s12, s22) = if g == 0.0 {
        (f * (1.0 + s * (l - c - 0.5)), 0.0, f * nn * (l - c + 0.5))
    } else {
        let d32 = d.powf(1.5);
        let s11 = f * (1.0 + s * (l - c - 0.5) - xi[2] * g + g * s * (nn * s * s - d) / d32);
        let s22 = f
            * nn
            * (g * s / d32 * (eta[0] * eta[0] + eta[0] * eta_v.dot(&xi_v) + s * eta_v.norm_squared() - eta[1]) + l - c
                + 0.5
                - g / d.sqrt());
        let s12 = -f
            * nn
            * (g * s / (2.0 * d32)
                * (2.0 * s * (eta_v.dot(&xi_v) - eta[0]) + 2.0 * eta[0] * xi_v.norm_squared() - 2.0 * xi[1]));
        (s11, s12, s22)
    };
    Ok(NormalHessian::from_entries(s11, s12, s22))
}

/// `S` from the general expression in terms of `f` and its partial
/// derivatives; second partials by central differences of the exact gradient.
pub fn hessian_s_lemma(r: &RegState, spec: &SystemSpec) -> Result<NormalHessian> {
    check_binding(r)?;
    let fe = f_eval(r, spec)?;
    let h = 1e-6;
    let shifted = |dxi3: f64, deta3: f64| {
        let mut p = *r;
        p.xi[3] += dxi3;
        p.eta[3] += deta3;
        f_eval(&p, spec)
    };
    let (xp, xm) = (shifted(h, 0.0)?, shifted(-h, 0.0)?);
    let (ep, em) = (shifted(0.0, h)?, shifted(0.0, -h)?);
    let f_x3x3 = (xp.f_xi[3] - xm.f_xi[3]) / (2.0 * h);
    let f_e3e3 = (ep.f_eta[3] - em.f_eta[3]) / (2.0 * h);
    let f_x3e3 = 0.5 * ((xp.f_eta[3] - xm.f_eta[3]) + (ep.f_xi[3] - em.f_xi[3])) / (2.0 * h);
    let f = fe.f;
    let nn = r.eta.norm_squared();
    let fe_xi = fe.f_eta.dot(&r.xi);
    let s11 = f * (f + nn * f_e3e3);
    let s12 = f * nn * (f_x3e3 - fe_xi);
    let s22 = f * nn * (f_x3x3 + f + fe.f_eta.dot(&r.eta) - fe.f_xi.dot(&r.xi));
    Ok(NormalHessian::from_entries(s11, s12, s22))
}

/// `S` read off the finite-difference linearization of `X_Q` in the normal
/// plane: with `u = d eta3`, `v = d xi3`, the quadratic form is
/// `u dv/dt - v du/dt`.
pub fn hessian_s_linearized(r: &RegState, spec: &SystemSpec) -> Result<NormalHessian> {
    check_binding(r)?;
    let h = 1e-6;
    let field = |dxi3: f64, deta3: f64| {
        let mut p = *r;
        p.xi[3] += dxi3;
        p.eta[3] += deta3;
        x_q(&p, spec)
    };
    let (up, um) = (field(0.0, h)?, field(0.0, -h)?);
    let (vp, vm) = (field(h, 0.0)?, field(-h, 0.0)?);
    let a = (up.d_xi[3] - um.d_xi[3]) / (2.0 * h);
    let b = (vp.d_xi[3] - vm.d_xi[3]) / (2.0 * h);
    let c = (up.d_eta[3] - um.d_eta[3]) / (2.0 * h);
    let d = (vp.d_eta[3] - vm.d_eta[3]) / (2.0 * h);
    Ok(NormalHessian::from_entries(a, 0.5 * (b - c), -d))
}

/// Eigenvalues `(1, mu/|q-m|^3 + (1-mu)/|q-e|^3)` of the unregularized
/// normal rotation rate at a planar state.
pub fn unreg_rotation_rate(s: &UnregState, spec: &SystemSpec) -> Result<(f64, f64)> {
    let d = s.q[2].abs().max(s.p[2].abs());
    if d > 1e-10 {
        return Err(Error::OffBinding(d));
    }
    let rm = (s.q - spec.moon_position()).norm();
    let re = (s.q - spec.earth_position()).norm();
    if rm < 1e-6 {
        return Err(Error::CollisionInput(rm));
    }
    let mut l2 = spec.mu / rm.powi(3);
    if spec.mu < 1.0 {
        if re < 1e-6 {
            return Err(Error::CollisionInput(re));
        }
        l2 += (1.0 - spec.mu) / re.powi(3);
    }
    Ok((1.0, l2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub n_samples: usize,
    pub min_eigen: f64,
    pub argmin: RegState,
    /// Largest relative disagreement between the explicit entries and the
    /// linearized-flow entries over the samples.
    pub max_cross_check: f64,
    pub pass: bool,
}

/// Random point of the binding on the energy surface.
pub fn sample_binding<R: rand::Rng + ?Sized>(spec: &SystemSpec, rng: &mut R) -> Result<RegState> {
    for _ in 0..100 {
        let mut xi = random_unit4(rng);
        xi[3] = 0.0;
        let n = xi.norm();
        if n < 1e-6 {
            continue;
        }
        xi /= n;
        let mut e = random_unit4(rng);
        e[3] = 0.0;
        e -= xi * xi.dot(&e);
        if let Ok(r) = scale_to_level(&xi, &e, spec) {
            return Ok(r);
        }
    }
    Err(Error::SamplingFailure("no binding point found".into()))
}

/// Sample the binding of `Sigma_c` and check positivity of `S`.
pub fn convexity_certificate(spec: &SystemSpec, n: usize, seed: u64) -> Result<CertificateReport> {
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let r = sample_binding(spec, &mut rng)?;
            let s = hessian_s(&r, spec)?;
            let lin = hessian_s_linearized(&r, spec)?;
            Ok((r, s.eigen_min, s.max_rel_diff(&lin)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (argmin, min_eigen) = rows.iter().fold(
        (
            rows.first()
                .map(|r| r.0)
                .unwrap_or(RegState::new([1.0, 0.0, 0.0, 0.0], [0.0; 4])),
            f64::INFINITY,
        ),
        |acc, r| {
            if r.1 < acc.1 {
                (r.0, r.1)
            } else {
                acc
            }
        },
    );
    let max_cross_check = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    Ok(CertificateReport {
        n_samples: rows.len(),
        min_eigen,
        argmin,
        max_cross_check,
        pass: min_eigen > 0.0 && !rows.is_empty(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibria::lagrange_points;

    fn binding_points(spec: &SystemSpec, n: usize) -> Vec<RegState> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n).map(|_| sample_binding(spec, &mut rng).unwrap()).collect()
    }

    #[test]
    fn collision_locus_values() {
        for mu in [0.1, 0.5, 0.9, 1.0] {
            let c = -1.8;
            let spec = SystemSpec::moon(mu, c).unwrap();
            let r = scale_to_level(
                &nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0),
                &nalgebra::Vector4::new(0.0, 0.6, 0.8, 0.0),
                &spec,
            )
            .unwrap();
            assert!((r.eta.norm() - mu).abs() < 1e-12);
            let s = hessian_s(&r, &spec).unwrap();
            assert!(s.s12.abs() < 1e-14);
            assert!((s.s11 - 1.0).abs() < 1e-10);
            assert!((s.s22 - mu * mu * (mu - c - 0.5)).abs() < 1e-10);
            assert!((s.eigen_min - (mu * mu * (mu - c - 0.5)).min(1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn explicit_entries_match_lemma_and_linearization() {
        for (mu, c) in [(0.5, -1.8), (0.3, -2.1), (1.0, -2.0)] {
            let spec = SystemSpec::moon(mu, c).unwrap();
            for r in binding_points(&spec, 50) {
                let a = hessian_s(&r, &spec).unwrap();
                let b = hessian_s_lemma(&r, &spec).unwrap();
                let l = hessian_s_linearized(&r, &spec).unwrap();
                assert!(b.max_rel_diff(&l) < 1e-6, "lemma vs linearized {b:?} {l:?}");
                assert!(
                    a.max_rel_diff(&l) < 1e-5,
                    "explicit vs linearized at {r:?}: {a:?} {l:?}"
                );
            }
        }
    }

    #[test]
    fn off_binding_rejected() {
        let spec = SystemSpec::moon(0.5, -1.8).unwrap();
        let r = RegState::new([0.0, 0.6, 0.0, 0.8], [0.1, 0.0, 0.0, 0.0]);
        assert!(matches!(hessian_s(&r, &spec), Err(Error::OffBinding(_))));
    }

    #[test]
    fn rotation_rate_examples() {
        let spec = SystemSpec::rotating_kepler(-2.0);
        let (l1, l2) = unreg_rotation_rate(&UnregState::new([0.6, 0.8, 0.0], [0.3, 0.0, 0.0]), &spec).unwrap();
        assert_eq!(l1, 1.0);
        assert!((l2 - 1.0).abs() < 1e-14);
        let spec = SystemSpec::moon(0.5, -1.8).unwrap();
        let near = UnregState::new([-0.5 + 1e-3, 0.0, 0.0], [0.0, 0.0, 0.0]);
        assert!(unreg_rotation_rate(&near, &spec).unwrap().1 > 1e8);
        let hit = UnregState::new([-0.5 + 1e-7, 0.0, 0.0], [0.0, 0.0, 0.0]);
        assert!(matches!(
            unreg_rotation_rate(&hit, &spec),
            Err(Error::CollisionInput(_))
        ));
    }

    #[test]
    fn certificates() {
        let spec = SystemSpec::rotating_kepler(-2.0);
        let rep = convexity_certificate(&spec, 200, 1).unwrap();
        assert!(rep.pass);
        let mu = 0.5;
        let c = lagrange_points(mu).unwrap().h_l1() - 0.1;
        let rep = convexity_certificate(&SystemSpec::moon(mu, c).unwrap(), 200, 1).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.max_cross_check < 1e-5);
        // c above mu - 1/2 makes S22 negative at the collision locus.
        let spec = SystemSpec::rotating_kepler(0.8);
        let r = RegState::new([1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]);
        let s = hessian_s(&r, &spec).unwrap();
        assert!((s.s22 - (1.0 - 0.8 - 0.5)).abs() < 1e-12);
        assert!(s.eigen_min < 0.0);
    }
}
