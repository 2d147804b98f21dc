use std::sync::Arc;

use cr3bp_core::dynamics::{f_eval, q_reg, scale_to_level, x_q, RoundSphere};
use cr3bp_core::flow::{integrate, involution, return_map, Involution};
use cr3bp_core::sections::{omega_g_closed, pairing_closed_form, section_value, theta_geodesic, theta_physical};
use cr3bp_core::*;
use proptest::prelude::*;

fn unit4() -> impl Strategy<Value = V4> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("nonzero", |a| a.iter().map(|x| x * x).sum::<f64>() > 1e-2)
        .prop_map(|a| V4::from(a).normalize())
}

fn reg_state(scale: f64) -> impl Strategy<Value = RegState> {
    (unit4(), prop::array::uniform4(-scale..scale)).prop_map(|(xi, e)| project_to_ts3(&xi, &V4::from(e)).unwrap())
}

fn same(a: Complex64, b: Complex64) -> bool {
    (a - b).norm() <= 1e-14 * (1.0 + a.norm())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn unreg_reg_round_trip(q in prop::array::uniform3(-2.0f64..2.0), p in prop::array::uniform3(-2.0f64..2.0),
                            mu in 0.05f64..0.95) {
        let spec = SystemSpec::moon(mu, -2.0).unwrap();
        let s = UnregState::new(q, p);
        prop_assume!((s.q - spec.moon_position()).norm() > 1e-3);
        let r = unreg_to_reg(&s, &spec);
        prop_assert!(r.constraint_residual() < 1e-12);
        let back = reg_to_unreg(&r, &spec).unwrap();
        let scale = 1.0 + s.q.norm() + s.p.norm();
        prop_assert!((back.q - s.q).norm() / scale < 1e-10);
        prop_assert!((back.p - s.p).norm() / scale < 1e-10);
    }

    #[test]
    fn involutions_are_involutive(x in reg_state(2.0)) {
        for k in [Involution::R, Involution::Rho1, Involution::Rho2] {
            let y = involution(k, &involution(k, &x));
            prop_assert_eq!(y, x);
            prop_assert!(involution(k, &x).constraint_residual() < 1e-12);
        }
    }

    #[test]
    fn section_symmetries(x in reg_state(2.0), amp in 0.001f64..1.0) {
        let cut = CutoffSpec::new(0.4, 0.15, amp).unwrap();
        for sec in [Section::Physical, Section::Interpolated(cut)] {
            let th = sec.theta(&x);
            prop_assert!(same(sec.theta(&involution(Involution::R, &x)), -th));
            prop_assert!(same(sec.theta(&involution(Involution::Rho1, &x)), th.conj()));
            prop_assert!(same(sec.theta(&involution(Involution::Rho2, &x)), -th.conj()));
        }
    }

    #[test]
    fn theta_vanishes_exactly_on_binding(x in reg_state(2.0)) {
        let binding = x.xi[3].abs() < 1e-12 && x.eta[3].abs() < 1e-12;
        prop_assert_eq!(theta_geodesic(&x).norm() < 1e-12, binding);
        prop_assume!(x.xi[0] < 1.0 - 1e-6);
        prop_assert_eq!(theta_physical(&x).norm() < 1e-12 * (1.0 - x.xi[0]).powi(2), binding);
    }

    #[test]
    fn cutoff_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0, d in 0.1f64..0.9) {
        let cut = CutoffSpec::new(d, d / 3.0, 1.0).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(cut.rho(lo) <= cut.rho(hi));
        prop_assert!((0.0..=1.0).contains(&cut.rho(a)));
        prop_assert!(cut.drho(a) >= 0.0);
        prop_assert_eq!(cut.rho(1.0 - d - 1e-9), 0.0);
        prop_assert_eq!(cut.rho(1.0 - d / 3.0 + 1e-9), 1.0);
    }

    #[test]
    fn physical_pairing_scales_with_conformal_factor(x in reg_state(1.0), mu in 0.1f64..0.9) {
        // The unregularized pairing in (q, p) coordinates: Im dRe - Re dIm of -p3 + i q3
        // applied to X_H, times (1 - xi0)^2 from Theta_p = (1 - xi0)(-p3 + i q3).
        let spec = SystemSpec::moon(mu, -2.0).unwrap();
        let xs = scale_to_level(&x.xi, &x.eta, &spec).unwrap();
        prop_assume!(xs.xi[0] < 0.95);
        let s = reg_to_unreg(&xs, &spec).unwrap();
        let xh = cr3bp_core::dynamics::x_h(&s, &spec).unwrap();
        let rate = cr3bp_core::dynamics::physical_time_rate(&xs, &spec).unwrap();
        let (re, im) = (-s.p[2], s.q[2]);
        let omega_u = (im * -xh.d_p[2] - re * xh.d_q[2]) * rate;
        let omega_p = pairing_closed_form(&xs, &spec, &Section::Physical).unwrap();
        let expect = (1.0 - xs.xi[0]).powi(2) * omega_u;
        prop_assert!((omega_p - expect).abs() <= 1e-8 * (1.0 + expect.abs()), "{} vs {}", omega_p, expect);
    }

    #[test]
    fn round_sphere_geodesic_pairing(x in reg_state(2.0)) {
        let spec = SystemSpec::stark_zeeman(Arc::new(RoundSphere), -1.5).unwrap();
        let x = scale_to_level(&x.xi, &x.eta, &spec).unwrap();
        let n2 = x.xi[3].powi(2) + x.eta[3].powi(2);
        prop_assume!(n2 > 1e-6);
        let fe = f_eval(&x, &spec).unwrap();
        let og = omega_g_closed(&x, &fe);
        prop_assert!((og - n2 * x.eta.norm()).abs() < 1e-12 * (1.0 + og.abs()));
        let nv = section_value(&x, &spec, &Section::Geodesic).unwrap().normalized_pairing;
        prop_assert!((nv - 1.0).abs() < 1e-12, "{}", nv);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reversor_commutes_with_flow(x in reg_state(1.0), mu in 0.2f64..0.8, t in 0.1f64..2.0) {
        let spec = SystemSpec::moon(mu, -2.0).unwrap();
        let x = scale_to_level(&x.xi, &x.eta, &spec).unwrap();
        let cfg = IntegratorConfig::default();
        let a = involution(Involution::R, &integrate(&x, t, &spec, &cfg).unwrap().last().state);
        let b = integrate(&involution(Involution::R, &x), t, &spec, &cfg).unwrap().last().state;
        prop_assert!(a.distance(&b) < 1e-8, "{}", a.distance(&b));
    }

    #[test]
    fn anti_symplectic_reversors_reverse_time(x in reg_state(1.0), mu in 0.2f64..0.8, t in 0.1f64..2.0) {
        let spec = SystemSpec::moon(mu, -2.0).unwrap();
        let x = scale_to_level(&x.xi, &x.eta, &spec).unwrap();
        let cfg = IntegratorConfig::default();
        for k in [Involution::Rho1, Involution::Rho2] {
            let a = involution(k, &integrate(&x, t, &spec, &cfg).unwrap().last().state);
            let b = integrate(&involution(k, &x), -t, &spec, &cfg).unwrap().last().state;
            prop_assert!(a.distance(&b) < 1e-8, "{:?} {}", k, a.distance(&b));
        }
    }
}

#[test]
fn flow_preserves_q_and_constraints() {
    use rand::SeedableRng;
    let spec = SystemSpec::moon(0.5, -2.2).unwrap();
    let cfg = IntegratorConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x = cr3bp_core::dynamics::sample_level_set(&spec, &mut rng).unwrap();
        let tr = integrate(&x, 10.0, &spec, &cfg).unwrap();
        for p in &tr.points {
            assert!((p.q - spec.q_level()).abs() < 1e-9, "Q drift {}", p.q - spec.q_level());
            assert!(p.state.constraint_residual() < 1e-12);
        }
        let _ = x_q(&tr.last().state, &spec).unwrap();
        assert!((q_reg(&tr.last().state, &spec).unwrap() - spec.q_level()).abs() < 1e-9);
    }
}

#[test]
fn return_map_q_drift_over_many_starts() {
    use rand::SeedableRng;
    let ctx = KeplerContext::new(-2.0).unwrap();
    let spec = ctx.spec();
    let cfg = IntegratorConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = cr3bp_core::kepler_oracle::sample_page(&ctx, 0.05, &mut rng).unwrap();
        let rec = return_map(&x, &spec, &Section::Geodesic, &cfg).unwrap();
        worst = worst.max(rec.q_drift.abs());
        assert!((rec.angle_swept - std::f64::consts::TAU).abs() < 1e-6);
    }
    assert!(worst < 1e-10, "{worst}");
}
