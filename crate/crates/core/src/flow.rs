//! Adaptive integration of `X_Q` on T*S^3 and `X_H` on T*R^3, the open-book
//! return map, the symmetry involutions and a Newton search for fixed points
//! of the return map.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, SVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{f_eval, q_reg, scale_to_level, x_h, x_q, x_q_from};
use crate::error::{Error, Result};
use crate::numeric::{brent, wrap_pi};
use crate::phase::{project_to_ts3, RegState, SystemSpec, UnregState, V4};
use crate::sections::Section;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    EveryStep,
    Never,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub max_time: f64,
    pub projection: Projection,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_step: 0.25,
            max_time: 500.0,
            projection: Projection::EveryStep,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.max_step > 0.0 && self.max_time > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigError(format!("invalid integrator config {self:?}")))
        }
    }
}

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

pub(crate) type Field<'a, const N: usize> = Box<dyn FnMut(&SVector<f64, N>) -> Result<SVector<f64, N>> + 'a>;

/// One accepted step, enough for cubic Hermite dense output.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Step<const N: usize> {
    pub t0: f64,
    pub y0: SVector<f64, N>,
    pub k0: SVector<f64, N>,
    pub t1: f64,
    pub y1: SVector<f64, N>,
    pub k1: SVector<f64, N>,
}

impl<const N: usize> Step<N> {
    pub fn hermite(&self, t: f64) -> SVector<f64, N> {
        let h = self.t1 - self.t0;
        let s = (t - self.t0) / h;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        self.y0 * h00 + self.k0 * (h10 * h) + self.y1 * h01 + self.k1 * (h11 * h)
    }
}

pub(crate) struct Stepper<'a, const N: usize> {
    f: Field<'a, N>,
    project: Option<fn(&mut SVector<f64, N>)>,
    pub t: f64,
    pub y: SVector<f64, N>,
    pub k: SVector<f64, N>,
    h: f64,
    dir: f64,
    cfg: IntegratorConfig,
}

impl<'a, const N: usize> Stepper<'a, N> {
    pub fn new(
        mut f: Field<'a, N>,
        project: Option<fn(&mut SVector<f64, N>)>,
        t0: f64,
        y0: SVector<f64, N>,
        dir: f64,
        cfg: IntegratorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut y = y0;
        if let Some(p) = project {
            p(&mut y);
        }
        let k = f(&y)?;
        let scale = y.abs().map(|v| cfg.abs_tol + cfg.rel_tol * v);
        let d0 = y.component_div(&scale).norm() / (N as f64).sqrt();
        let d1 = k.component_div(&scale).norm() / (N as f64).sqrt();
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        Ok(Self {
            f,
            project,
            t: t0,
            y,
            k,
            h: h.min(cfg.max_step),
            dir: dir.signum(),
            cfg,
        })
    }

    /// A single Dormand-Prince step of signed size `h` from `(y, k)`,
    /// returning the new state, its derivative and the scaled error norm.
    pub fn raw(
        &mut self,
        y: &SVector<f64, N>,
        k: &SVector<f64, N>,
        h: f64,
    ) -> Result<(SVector<f64, N>, SVector<f64, N>, f64)> {
        let f = &mut self.f;
        let k1 = *k;
        let k2 = f(&(y + k1 * (h * A21)))?;
        let k3 = f(&(y + (k1 * A31 + k2 * A32) * h))?;
        let k4 = f(&(y + (k1 * A41 + k2 * A42 + k3 * A43) * h))?;
        let k5 = f(&(y + (k1 * A51 + k2 * A52 + k3 * A53 + k4 * A54) * h))?;
        let k6 = f(&(y + (k1 * A61 + k2 * A62 + k3 * A63 + k4 * A64 + k5 * A65) * h))?;
        let y1 = y + (k1 * B1 + k3 * B3 + k4 * B4 + k5 * B5 + k6 * B6) * h;
        let k7 = f(&y1)?;
        let err = (k1 * E1 + k3 * E3 + k4 * E4 + k5 * E5 + k6 * E6 + k7 * E7) * h;
        let mut acc = 0.0;
        for i in 0..N {
            let sc = self.cfg.abs_tol + self.cfg.rel_tol * y[i].abs().max(y1[i].abs());
            acc += (err[i] / sc).powi(2);
        }
        Ok((y1, k7, (acc / N as f64).sqrt()))
    }

    /// Advance by one accepted step, never passing `t_limit`.
    pub fn step(&mut self, t_limit: Option<f64>) -> Result<Step<N>> {
        loop {
            let mut h = self.h.min(self.cfg.max_step) * self.dir;
            let mut clipped = false;
            if let Some(tl) = t_limit {
                if (self.t + h - tl) * self.dir > 0.0 {
                    h = tl - self.t;
                    clipped = true;
                }
            }
            if h.abs() < 1e-14 * self.t.abs().max(1.0) && !clipped {
                return Err(Error::StepFailure(self.t));
            }
            let (y0, k0) = (self.y, self.k);
            let (mut y1, mut k1, err) = self.raw(&y0, &k0, h)?;
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if err <= 1.0 || h.abs() < 1e-14 {
                if let Some(p) = self.project {
                    p(&mut y1);
                    k1 = (self.f)(&y1)?;
                }
                let t0 = self.t;
                self.t = if clipped { t_limit.unwrap() } else { t0 + h };
                self.y = y1;
                self.k = k1;
                if !clipped || fac < 1.0 {
                    self.h = h.abs() * fac;
                }
                return Ok(Step {
                    t0,
                    y0,
                    k0,
                    t1: self.t,
                    y1,
                    k1,
                });
            }
            self.h = h.abs() * fac;
        }
    }

    /// Move back to a previous state and retry with a smaller step.
    pub fn reset(&mut self, t: f64, y: SVector<f64, N>, k: SVector<f64, N>, h: f64) {
        self.t = t;
        self.y = y;
        self.k = k;
        self.h = h.abs();
    }
}

pub(crate) type RegVec = SVector<f64, 9>;

pub(crate) fn reg_of(y: &RegVec) -> RegState {
    RegState {
        xi: V4::new(y[0], y[1], y[2], y[3]),
        eta: V4::new(y[4], y[5], y[6], y[7]),
    }
}

pub(crate) fn vec_of(r: &RegState, t_phys: f64) -> RegVec {
    let mut y = RegVec::zeros();
    y.fixed_rows_mut::<4>(0).copy_from(&r.xi);
    y.fixed_rows_mut::<4>(4).copy_from(&r.eta);
    y[8] = t_phys;
    y
}

fn project_reg(y: &mut RegVec) {
    if let Ok(p) = project_to_ts3(&reg_of(y).xi, &reg_of(y).eta) {
        let t = y[8];
        *y = vec_of(&p, t);
    }
}

/// `X_Q` augmented with the physical clock `dt/ds = f (1 - xi0) |eta|^2`.
pub(crate) fn reg_field<'a>(spec: &'a SystemSpec) -> Field<'a, 9> {
    Box::new(move |y: &RegVec| {
        let r = reg_of(y);
        let fe = f_eval(&r, spec)?;
        let x = x_q_from(&r, &fe);
        let mut d = RegVec::zeros();
        d.fixed_rows_mut::<4>(0).copy_from(&x.d_xi);
        d.fixed_rows_mut::<4>(4).copy_from(&x.d_eta);
        d[8] = fe.f * (1.0 - r.xi[0]) * r.eta.norm_squared();
        Ok(d)
    })
}

pub(crate) fn reg_stepper<'a>(
    spec: &'a SystemSpec,
    r: &RegState,
    dir: f64,
    cfg: &IntegratorConfig,
) -> Result<Stepper<'a, 9>> {
    let proj = match cfg.projection {
        Projection::EveryStep => Some(project_reg as fn(&mut RegVec)),
        Projection::Never => None,
    };
    Stepper::new(reg_field(spec), proj, 0.0, vec_of(r, 0.0), dir, *cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Flow time of `X_Q`.
    pub t: f64,
    /// Physical time of the underlying three-body orbit.
    pub t_phys: f64,
    pub state: RegState,
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

#[derive(Serialize)]
struct JsonlRecord {
    t: f64,
    state: [f64; 8],
    q: f64,
    theta: [f64; 2],
}

impl Trajectory {
    pub fn last(&self) -> &TrajectoryPoint {
        self.points.last().expect("trajectory has at least the initial point")
    }

    /// One JSON object per accepted step: `t`, `state`, `q`, `theta = [re, im]`.
    pub fn to_jsonl(&self, section: &Section) -> String {
        let mut out = String::new();
        for p in &self.points {
            let th = section.theta(&p.state);
            let rec = JsonlRecord {
                t: p.t,
                state: p.state.to_array(),
                q: p.q,
                theta: [th.re, th.im],
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Integrate `X_Q` from `r` for flow time `t_final` (either sign).
pub fn integrate(r: &RegState, t_final: f64, spec: &SystemSpec, cfg: &IntegratorConfig) -> Result<Trajectory> {
    if t_final.abs() > cfg.max_time {
        return Err(Error::TimeBudgetExceeded(t_final));
    }
    let mut st = reg_stepper(spec, r, if t_final < 0.0 { -1.0 } else { 1.0 }, cfg)?;
    let point = |t: f64, y: &RegVec| -> Result<TrajectoryPoint> {
        let s = reg_of(y);
        Ok(TrajectoryPoint {
            t,
            t_phys: y[8],
            state: s,
            q: q_reg(&s, spec)?,
        })
    };
    let mut points = vec![point(0.0, &vec_of(r, 0.0))?];
    while st.t != t_final {
        let step = st.step(Some(t_final))?;
        points.push(point(step.t1, &step.y1)?);
    }
    Ok(Trajectory { points })
}

/// Integrate `X_H` and report the state at each requested time (ascending).
pub fn integrate_unreg(
    s: &UnregState,
    times: &[f64],
    spec: &SystemSpec,
    cfg: &IntegratorConfig,
) -> Result<Vec<UnregState>> {
    let field: Field<6> = Box::new(move |y: &SVector<f64, 6>| {
        let st = UnregState::from_slice(y.as_slice());
        let d = x_h(&st, spec)?;
        let mut out = SVector::<f64, 6>::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&d.d_q);
        out.fixed_rows_mut::<3>(3).copy_from(&d.d_p);
        Ok(out)
    });
    let dir = if times.last().is_some_and(|&t| t < 0.0) {
        -1.0
    } else {
        1.0
    };
    let mut st = Stepper::new(field, None, 0.0, SVector::from_column_slice(&s.to_array()), dir, *cfg)?;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if t.abs() > cfg.max_time {
            return Err(Error::TimeBudgetExceeded(t));
        }
        while st.t != t {
            st.step(Some(t))?;
        }
        out.push(UnregState::from_slice(st.y.as_slice()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnRecord {
    pub start: RegState,
    pub end: RegState,
    pub return_time: f64,
    pub physical_time: f64,
    pub angle_swept: f64,
    pub q_drift: f64,
    /// Quarter-turn events `(time, lifted angle)`, the last one being the return.
    pub crossings: Vec<(f64, f64)>,
}

const BINDING_GUARD: f64 = 1e-6;

/// Angular speed of the page angle along `X_Q`, by central differences.
fn angle_rate(r: &RegState, spec: &SystemSpec, section: &Section) -> Result<f64> {
    let x = x_q(r, spec)?;
    let h = 1e-7 / (1.0 + x.d_xi.norm() + x.d_eta.norm());
    let at = |t: f64| {
        section.page_angle(&RegState {
            xi: r.xi + x.d_xi * t,
            eta: r.eta + x.d_eta * t,
        })
    };
    Ok(wrap_pi(at(h) - at(-h)) / (2.0 * h))
}

/// Flow `r` (with clock `t_phys`) for the signed time `dt` using a fresh
/// adaptive integration; used for short corrections.
fn flow_for(y: &RegVec, dt: f64, spec: &SystemSpec, cfg: &IntegratorConfig) -> Result<RegVec> {
    if dt == 0.0 {
        return Ok(*y);
    }
    let mut st = Stepper::new(reg_field(spec), None, 0.0, *y, dt.signum(), *cfg)?;
    while st.t != dt {
        st.step(Some(dt))?;
    }
    let mut out = st.y;
    if cfg.projection == Projection::EveryStep {
        project_reg(&mut out);
    }
    Ok(out)
}

/// Newton correction in flow time so that the page angle equals `theta0`.
fn polish_to_page(
    y: RegVec,
    theta0: f64,
    spec: &SystemSpec,
    section: &Section,
    cfg: &IntegratorConfig,
) -> Result<(RegVec, f64)> {
    let mut y = y;
    let mut shift = 0.0;
    for _ in 0..8 {
        let r = reg_of(&y);
        let miss = wrap_pi(section.page_angle(&r) - theta0);
        if miss.abs() < 1e-13 {
            break;
        }
        let rate = angle_rate(&r, spec, section)?;
        if rate.abs() < 1e-300 {
            break;
        }
        let dt = -miss / rate;
        y = flow_for(&y, dt, spec, cfg)?;
        shift += dt;
    }
    Ok((y, shift))
}

/// First return of `r` to the page through it.
pub fn return_map(r: &RegState, spec: &SystemSpec, section: &Section, cfg: &IntegratorConfig) -> Result<ReturnRecord> {
    let theta0 = section.theta(r);
    if theta0.norm() < BINDING_GUARD {
        return Err(Error::OnBinding(theta0.norm()));
    }
    let a0 = section.page_angle(r);
    let q0 = q_reg(r, spec)?;
    let mut st = reg_stepper(spec, r, 1.0, cfg)?;
    let mut lifted = 0.0;
    let mut prev_angle = a0;
    let mut crossings = Vec::new();
    let mut next_quarter = 1;
    loop {
        if st.t > cfg.max_time {
            return Err(Error::NoReturn(st.t));
        }
        let step = st.step(Some(cfg.max_time + 1.0))?;
        let ang = section.page_angle(&reg_of(&step.y1));
        let inc = wrap_pi(ang - prev_angle);
        if inc.abs() > 1.0 {
            let h = (step.t1 - step.t0) * 0.25;
            st.reset(step.t0, step.y0, step.k0, h);
            continue;
        }
        let before = lifted;
        lifted += inc;
        prev_angle = ang;
        while lifted >= next_quarter as f64 * PI / 2.0 && next_quarter <= 4 {
            let target = next_quarter as f64 * PI / 2.0;
            let phase = |t: f64| {
                before + wrap_pi(section.page_angle(&reg_of(&step.hermite(t))) - section.page_angle(&reg_of(&step.y0)))
                    - target
            };
            let tc = brent(phase, step.t0, step.t1, 1e-15).unwrap_or(step.t1);
            if next_quarter == 4 {
                let mut y = step.y0;
                let dt = tc - step.t0;
                if dt != 0.0 {
                    y = flow_for(&step.y0, dt, spec, cfg)?;
                }
                let (y, shift) = polish_to_page(y, a0, spec, section, cfg)?;
                let end = reg_of(&y);
                let t_end = tc + shift;
                crossings.push((t_end, TAU));
                return Ok(ReturnRecord {
                    start: *r,
                    end,
                    return_time: t_end,
                    physical_time: y[8],
                    angle_swept: TAU + wrap_pi(section.page_angle(&end) - a0),
                    q_drift: (q_reg(&end, spec)? - q0).abs(),
                    crossings,
                });
            }
            crossings.push((tc, target));
            next_quarter += 1;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Involution {
    R,
    Rho1,
    Rho2,
}

/// Regularized symmetry involutions; `r` is symplectic, `rho1`, `rho2`
/// are anti-symplectic.
pub fn involution(kind: Involution, x: &RegState) -> RegState {
    let (sx, se): ([f64; 4], [f64; 4]) = match kind {
        Involution::R => ([1.0, 1.0, 1.0, -1.0], [1.0, 1.0, 1.0, -1.0]),
        Involution::Rho1 => ([1.0, -1.0, 1.0, 1.0], [-1.0, 1.0, -1.0, -1.0]),
        Involution::Rho2 => ([1.0, -1.0, 1.0, -1.0], [-1.0, 1.0, -1.0, 1.0]),
    };
    RegState {
        xi: x.xi.component_mul(&V4::from(sx)),
        eta: x.eta.component_mul(&V4::from(se)),
    }
}

/// Local chart of a page near `base`: orthonormal tangent directions of the
/// page inside the energy surface, and a retraction back onto the page.
#[derive(Clone, Debug)]
pub struct PageChart {
    pub base: RegState,
    pub theta0: f64,
    /// 8 x 4, orthonormal columns.
    pub basis: DMatrix<f64>,
}

fn grad_fd(f: &dyn Fn(&[f64; 8]) -> Result<f64>, x: &[f64; 8]) -> Result<[f64; 8]> {
    let mut g = [0.0; 8];
    for i in 0..8 {
        let h = 1e-6;
        let mut a = *x;
        let mut b = *x;
        a[i] += h;
        b[i] -= h;
        g[i] = (f(&a)? - f(&b)?) / (2.0 * h);
    }
    Ok(g)
}

impl PageChart {
    pub fn new(base: &RegState, spec: &SystemSpec, section: &Section) -> Result<Self> {
        let theta0 = section.page_angle(base);
        let x = base.to_array();
        let gq = grad_fd(&|v| q_reg(&RegState::from_slice(v), spec), &x)?;
        let ga = grad_fd(
            &|v| Ok(wrap_pi(section.page_angle(&RegState::from_slice(v)) - theta0)),
            &x,
        )?;
        let mut normals = DMatrix::<f64>::zeros(8, 4);
        for k in 0..4 {
            normals[(k, 0)] = base.xi[k];
            normals[(k, 1)] = base.eta[k];
            normals[(k + 4, 1)] = base.xi[k];
        }
        for i in 0..8 {
            normals[(i, 2)] = gq[i];
            normals[(i, 3)] = ga[i];
        }
        // The orthogonal complement of the normals: left singular vectors
        // belonging to zero singular values of the 8 x 8 padded matrix.
        let mut padded = DMatrix::<f64>::zeros(8, 8);
        padded.view_mut((0, 0), (8, 4)).copy_from(&normals);
        let svd = padded.svd(true, false);
        let u = svd.u.expect("svd u");
        let mut idx: Vec<usize> = (0..8).collect();
        idx.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        let basis = DMatrix::from_fn(8, 4, |i, j| u[(i, idx[j])]);
        Ok(Self {
            base: *base,
            theta0,
            basis,
        })
    }

    pub fn coords(&self, x: &RegState) -> [f64; 4] {
        let d = DMatrix::from_column_slice(
            8,
            1,
            &(x.to_array()
                .iter()
                .zip(self.base.to_array())
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>()),
        );
        let c = self.basis.transpose() * d;
        [c[0], c[1], c[2], c[3]]
    }

    /// Point of the page with (approximately) the given coordinates.
    pub fn point(
        &self,
        u: &[f64; 4],
        spec: &SystemSpec,
        section: &Section,
        cfg: &IntegratorConfig,
    ) -> Result<RegState> {
        let mut v = self.base.to_array();
        for (i, vi) in v.iter_mut().enumerate() {
            for (j, uj) in u.iter().enumerate() {
                *vi += self.basis[(i, j)] * uj;
            }
        }
        let raw = RegState::from_slice(&v);
        let p = project_to_ts3(&raw.xi, &raw.eta)?;
        let r = scale_to_level(&p.xi, &p.eta, spec)?;
        let (y, _) = polish_to_page(vec_of(&r, 0.0), self.theta0, spec, section, cfg)?;
        Ok(reg_of(&y))
    }

    /// Symplectic area form `sum d eta ^ d xi` restricted to the chart basis.
    pub fn omega(&self) -> DMatrix<f64> {
        DMatrix::from_fn(4, 4, |i, j| {
            let a = self.basis.column(i);
            let b = self.basis.column(j);
            (0..4).map(|k| a[k + 4] * b[k] - a[k] * b[k + 4]).sum()
        })
    }
}

/// Finite-difference Jacobian of the return map with central step `h`, in
/// the page chart at `x` and the page chart at its image. With `same_chart`
/// the chart at `x` is used on both sides (meaningful near a fixed point).
pub fn return_jacobian(
    x: &RegState,
    spec: &SystemSpec,
    section: &Section,
    cfg: &IntegratorConfig,
    h: f64,
    same_chart: bool,
) -> Result<(DMatrix<f64>, PageChart, PageChart)> {
    let c0 = PageChart::new(x, spec, section)?;
    let c1 = if same_chart {
        c0.clone()
    } else {
        PageChart::new(&return_map(x, spec, section, cfg)?.end, spec, section)?
    };
    let mut jac = DMatrix::<f64>::zeros(4, 4);
    for j in 0..4 {
        let mut up = [0.0; 4];
        let mut dn = [0.0; 4];
        up[j] = h;
        dn[j] = -h;
        let fu = return_map(&c0.point(&up, spec, section, cfg)?, spec, section, cfg)?.end;
        let fd = return_map(&c0.point(&dn, spec, section, cfg)?, spec, section, cfg)?.end;
        let a = c1.coords(&fu);
        let b = c1.coords(&fd);
        for i in 0..4 {
            jac[(i, j)] = (a[i] - b[i]) / (2.0 * h);
        }
    }
    Ok((jac, c0, c1))
}

/// Symplectic volume ratio of the return map at `x`: `|det DF|` corrected by
/// the area forms of the two charts. Equals 1 for an exact symplectomorphism.
pub fn volume_distortion(
    x: &RegState,
    spec: &SystemSpec,
    section: &Section,
    cfg: &IntegratorConfig,
    h: f64,
) -> Result<f64> {
    let (jac, c0, c1) = return_jacobian(x, spec, section, cfg, h, false)?;
    let w0 = c0.omega().determinant();
    let w1 = c1.omega().determinant();
    Ok(jac.determinant().abs() * (w1 / w0).abs().sqrt())
}

/// Eigenvalues of the return-map Jacobian at a fixed point `x`.
pub fn return_eigenvalues(
    x: &RegState,
    spec: &SystemSpec,
    section: &Section,
    cfg: &IntegratorConfig,
    h: f64,
) -> Result<Vec<Complex64>> {
    let (jac, _, _) = return_jacobian(x, spec, section, cfg, h, true)?;
    Ok(jac.complex_eigenvalues().iter().cloned().collect())
}

/// Damped Newton iteration on the in-page displacement `F(x) - x`.
pub fn fixed_point_search(
    guess: &RegState,
    spec: &SystemSpec,
    section: &Section,
    cfg: &IntegratorConfig,
    max_iter: usize,
) -> Result<RegState> {
    let theta0 = section.page_angle(guess);
    let start = {
        let p = project_to_ts3(&guess.xi, &guess.eta)?;
        let r = scale_to_level(&p.xi, &p.eta, spec)?;
        reg_of(&polish_to_page(vec_of(&r, 0.0), theta0, spec, section, cfg)?.0)
    };
    let mut x = start;
    let disp = |x: &RegState| -> Result<f64> { Ok(return_map(x, spec, section, cfg)?.end.distance(x)) };
    let mut d = disp(&x)?;
    for _ in 0..max_iter {
        if d < 1e-9 {
            return Ok(x);
        }
        let chart = PageChart::new(&x, spec, section)?;
        let g = |u: &[f64; 4]| -> Result<(nalgebra::Vector4<f64>, RegState)> {
            let p = chart.point(u, spec, section, cfg)?;
            let f = return_map(&p, spec, section, cfg)?.end;
            let a = chart.coords(&f);
            let b = chart.coords(&p);
            Ok((
                nalgebra::Vector4::new(a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]),
                p,
            ))
        };
        let (g0, _) = g(&[0.0; 4])?;
        let h = (1e-3 * d).clamp(1e-7, 1e-4);
        let mut jac = nalgebra::Matrix4::<f64>::zeros();
        for j in 0..4 {
            let mut up = [0.0; 4];
            let mut dn = [0.0; 4];
            up[j] = h;
            dn[j] = -h;
            let col = (g(&up)?.0 - g(&dn)?.0) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let Some(du) = jac.lu().solve(&(-g0)) else {
            return Err(Error::NoConvergence(max_iter));
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let u = [alpha * du[0], alpha * du[1], alpha * du[2], alpha * du[3]];
            if let Ok(p) = chart.point(&u, spec, section, cfg) {
                if section.theta(&p).norm() >= BINDING_GUARD {
                    if let Ok(dn) = disp(&p) {
                        if dn < d {
                            x = p;
                            d = dn;
                            accepted = true;
                            break;
                        }
                    }
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if d < 1e-9 {
        Ok(x)
    } else {
        Err(Error::NoConvergence(max_iter))
    }
}
