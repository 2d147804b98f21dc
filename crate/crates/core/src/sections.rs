//! Open-book section maps and the angular-form transversality checks.
//!
//! Pairing convention: for a section map `Theta = a + i b` the reported
//! pairing is `b da - a db` evaluated on `X_Q`. With this orientation the
//! physical and interpolated pairings are positive, and the page angle
//! `-arg Theta` increases along the flow. The geodesic map uses the opposite
//! orientation (`arg (eta3 + i xi3)` increases), so its pairing is
//! `Re dIm - Im dRe`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SMatrix, SVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{f_eval, field_eval, sample_level_set, x_q_from, FEval, RegTangent};
use crate::equilibria::lagrange_points;
use crate::error::{Error, Result};
use crate::numeric::wrap_two_pi;
use crate::phase::{project_to_ts3, reg_to_unreg, unreg_to_reg, Chart, RegState, SystemSpec, UnregState, V4};

/// Smooth non-decreasing cutoff `rho(xi0)`: zero for `xi0 <= 1 - delta`,
/// equal to `amplitude` for `xi0 >= 1 - epsilon`, C^2 smoothstep in between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub delta: f64,
    pub epsilon: f64,
    pub amplitude: f64,
}

impl Default for CutoffSpec {
    fn default() -> Self {
        Self {
            delta: 0.4,
            epsilon: 0.15,
            amplitude: 1.0,
        }
    }
}

impl CutoffSpec {
    pub fn new(delta: f64, epsilon: f64, amplitude: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 0.5 * delta && 0.5 * delta < 1.0) {
            return Err(Error::ConfigError(format!(
                "cutoff needs 0 < epsilon <= delta/2 < 1, got delta={delta}, epsilon={epsilon}"
            )));
        }
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return Err(Error::ConfigError(format!(
                "amplitude must be positive, got {amplitude}"
            )));
        }
        Ok(Self {
            delta,
            epsilon,
            amplitude,
        })
    }

    fn t(&self, xi0: f64) -> f64 {
        ((xi0 - (1.0 - self.delta)) / (self.delta - self.epsilon)).clamp(0.0, 1.0)
    }

    pub fn rho(&self, xi0: f64) -> f64 {
        let t = self.t(xi0);
        self.amplitude * t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    }

    pub fn drho(&self, xi0: f64) -> f64 {
        let t = self.t(xi0);
        if t <= 0.0 || t >= 1.0 {
            return 0.0;
        }
        self.amplitude * 30.0 * t * t * (1.0 - t) * (1.0 - t) / (self.delta - self.epsilon)
    }

    /// Choose the amplitude from a pre-scan of `n` level-set samples so that
    /// the cutoff terms stay below half of the measured physical pairing
    /// constant on `xi0 <= 1 - epsilon`.
    pub fn calibrated(spec: &SystemSpec, delta: f64, epsilon: f64, n: usize, seed: u64) -> Result<Self> {
        let unit = Self::new(delta, epsilon, 1.0)?;
        let samples = sample_many(spec, n, seed)?;
        let stats: Vec<(f64, f64, f64, f64)> = samples
            .par_iter()
            .map(|r| {
                let fe = f_eval(r, spec)?;
                let x = x_q_from(r, &fe);
                let n2 = r.xi[3].powi(2) + r.eta[3].powi(2);
                let op = omega_p_closed(r, spec)? / n2;
                let og = omega_g_closed(r, &fe) / n2;
                let k = (unit.drho(r.xi[0]) * x.d_xi[0] * r.xi[3] * r.eta[3]).abs() / n2;
                Ok((r.xi[0], op, og, k))
            })
            .collect::<Result<_>>()?;
        let lo = 1.0 - delta;
        let hi = 1.0 - epsilon;
        let c_eps = stats
            .iter()
            .filter(|s| s.0 <= hi)
            .map(|s| s.1)
            .fold(f64::INFINITY, f64::min);
        let k_max = stats.iter().map(|s| s.3).fold(0.0, f64::max);
        let n_minus = stats
            .iter()
            .filter(|s| s.0 > lo && s.0 < hi)
            .map(|s| (-s.2).max(0.0))
            .fold(0.0, f64::max);
        let amp = if c_eps.is_finite() && c_eps > 0.0 && k_max + n_minus > 0.0 {
            (0.5 * c_eps / (k_max + n_minus)).min(1.0)
        } else {
            1.0
        };
        Self::new(delta, epsilon, amp)
    }
}

/// Which open book is used to measure the page angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Section {
    Physical,
    Geodesic,
    Interpolated(CutoffSpec),
}

impl Section {
    pub fn theta(&self, r: &RegState) -> Complex64 {
        match self {
            Section::Physical => theta_physical(r),
            Section::Geodesic => theta_geodesic(r),
            Section::Interpolated(cut) => theta_interpolated_value(r, cut),
        }
    }

    /// Page angle in `[0, 2 pi)`, oriented to increase along the flow.
    pub fn page_angle(&self, r: &RegState) -> f64 {
        page_angle(self.theta(r), self)
    }
}

pub fn page_angle(theta: Complex64, section: &Section) -> f64 {
    match section {
        Section::Geodesic => wrap_two_pi(theta.arg()),
        _ => wrap_two_pi(-theta.arg()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionValue {
    pub theta_complex: Complex64,
    pub angle: f64,
    pub pairing: f64,
    pub normalized_pairing: f64,
}

/// `xi3 + i ((1 - xi0) eta0 xi3 + (1 - xi0)^2 eta3)`, i.e. `(1 - xi0)(-p3 + i q3)`.
pub fn theta_physical(r: &RegState) -> Complex64 {
    let s = 1.0 - r.xi[0];
    Complex64::new(r.xi[3], s * r.eta[0] * r.xi[3] + s * s * r.eta[3])
}

/// `eta3 + i xi3`.
pub fn theta_geodesic(r: &RegState) -> Complex64 {
    Complex64::new(r.eta[3], r.xi[3])
}

/// `Theta_p + i rho(xi0) eta3`.
pub fn theta_interpolated_value(r: &RegState, cut: &CutoffSpec) -> Complex64 {
    theta_physical(r) + Complex64::new(0.0, cut.rho(r.xi[0]) * r.eta[3])
}

/// Physical angular form on `X_Q`, written through the unregularized field:
/// `g |y| xi3^2 + g^2 q3^2 / |eta|^2 + g (1 - xi0)^2 |y| q3 dV1/dq3`.
/// Valid on the energy surface.
pub fn omega_p_closed(r: &RegState, spec: &SystemSpec) -> Result<f64> {
    let g = spec.coupling();
    let s = 1.0 - r.xi[0];
    let y = r.local_position();
    let ny = y.norm();
    let q3 = y[2];
    let dv1 = if spec.stark_zeeman.as_ref().is_some_and(|f| f.is_round_sphere()) {
        0.0
    } else {
        field_eval(spec, &y)?.grad_v1[2]
    };
    Ok(g * ny * r.xi[3].powi(2) + g * g * q3 * q3 / r.eta.norm_squared() + g * s * s * ny * q3 * dv1)
}

/// Geodesic angular form `eta3 d xi3 - xi3 d eta3` on `X_Q`.
pub fn omega_g_closed(r: &RegState, fe: &FEval) -> f64 {
    let nn = r.eta.norm_squared();
    let f = fe.f;
    let (x3, e3) = (r.xi[3], r.eta[3]);
    let fe_xi = fe.f_eta.dot(&r.xi);
    let a4 = f + fe.f_eta.dot(&r.eta) - fe.f_xi.dot(&r.xi);
    f * f * e3 * e3 + nn * f * a4 * x3 * x3 + nn * f * (fe.f_eta[3] * e3 + fe.f_xi[3] * x3 - 2.0 * x3 * e3 * fe_xi)
}

fn pairing_closed_with(r: &RegState, spec: &SystemSpec, section: &Section, fe: &FEval, x: &RegTangent) -> Result<f64> {
    Ok(match section {
        Section::Geodesic => omega_g_closed(r, fe),
        Section::Physical => omega_p_closed(r, spec)?,
        Section::Interpolated(cut) => {
            omega_p_closed(r, spec)? + cut.rho(r.xi[0]) * omega_g_closed(r, fe)
                - r.xi[3] * r.eta[3] * cut.drho(r.xi[0]) * x.d_xi[0]
        }
    })
}

/// Pairing assembled from the closed forms.
pub fn pairing_closed_form(r: &RegState, spec: &SystemSpec, section: &Section) -> Result<f64> {
    let fe = f_eval(r, spec)?;
    let x = x_q_from(r, &fe);
    pairing_closed_with(r, spec, section, &fe, &x)
}

/// Pairing from central differences of `Theta` along `X_Q`.
pub fn pairing_flow_fd(r: &RegState, spec: &SystemSpec, section: &Section) -> Result<f64> {
    let x = crate::dynamics::x_q(r, spec)?;
    let h = 1e-6 / (1.0 + x.d_xi.norm() + x.d_eta.norm());
    let at = |t: f64| {
        section.theta(&RegState {
            xi: r.xi + x.d_xi * t,
            eta: r.eta + x.d_eta * t,
        })
    };
    let d = (at(h) - at(-h)) / (2.0 * h);
    let th = section.theta(r);
    let std = th.re * d.im - th.im * d.re;
    Ok(match section {
        Section::Geodesic => std,
        _ => -std,
    })
}

/// Squared radius used to normalize pairings.
fn binding_radius2(r: &RegState) -> f64 {
    r.xi[3].powi(2) + r.eta[3].powi(2)
}

pub fn section_value(r: &RegState, spec: &SystemSpec, section: &Section) -> Result<SectionValue> {
    let theta = section.theta(r);
    let pairing = pairing_closed_form(r, spec, section)?;
    let n2 = binding_radius2(r);
    let normalized_pairing = if n2 > 1e-24 {
        pairing / n2
    } else {
        binding_limit(r, spec, section)?
    };
    Ok(SectionValue {
        theta_complex: theta,
        angle: page_angle(theta, section),
        pairing,
        normalized_pairing,
    })
}

/// The interpolated section value, with the pairing from the closed forms.
pub fn theta_interpolated(r: &RegState, spec: &SystemSpec, cut: &CutoffSpec) -> Result<SectionValue> {
    section_value(r, spec, &Section::Interpolated(*cut))
}

/// Normalized pairing at a binding point, estimated as the minimum over eight
/// directions at radius `1e-4` in the `(xi3, eta3)` plane.
fn binding_limit(r: &RegState, spec: &SystemSpec, section: &Section) -> Result<f64> {
    let rad = 1e-4;
    let mut best = f64::INFINITY;
    for k in 0..8 {
        let phi = k as f64 * PI / 4.0;
        let mut xi = r.xi;
        let mut eta = r.eta;
        xi[3] += rad * phi.cos();
        eta[3] += rad * phi.sin();
        let p = project_to_ts3(&xi, &eta)?;
        let n2 = binding_radius2(&p);
        if n2 > 0.0 {
            best = best.min(pairing_closed_form(&p, spec, section)? / n2);
        }
    }
    Ok(best)
}

/// Evaluator for the collision-locus constant `f + f_eta . eta - f_xi . xi`
/// at `xi = (1, 0, 0, 0)`; equals `g - c - 1/2` for the three-body charts.
pub fn a4_value(spec: &SystemSpec) -> Result<f64> {
    let r = RegState::new([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]);
    let fe = f_eval(&r, spec)?;
    Ok(fe.f + fe.f_eta.dot(&r.eta) - fe.f_xi.dot(&r.xi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanSample {
    pub state: RegState,
    pub pairing: f64,
    pub normalized_pairing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub n_samples: usize,
    pub n_failed: usize,
    pub min_normalized: f64,
    pub max_normalized: f64,
    pub argmin: RegState,
    /// Bin edges (length `bins + 1`) and counts of the normalized pairing.
    pub histogram_edges: Vec<f64>,
    pub histogram_counts: Vec<usize>,
    /// Empirical analogue of the quadratic-bound constant.
    pub empirical_constant: f64,
    pub pass: bool,
    pub samples: Vec<ScanSample>,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Up to five draws per index; failures beyond 1% of the requested count
/// abort with `SamplingFailure`.
fn sample_many(spec: &SystemSpec, n: usize, seed: u64) -> Result<Vec<RegState>> {
    let draws: Vec<(Option<RegState>, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let mut failed = 0;
            for _ in 0..5 {
                match sample_level_set(spec, &mut rng) {
                    Ok(r) => return (Some(r), failed),
                    Err(_) => failed += 1,
                }
            }
            (None, failed)
        })
        .collect();
    let failed: usize = draws.iter().map(|d| d.1).sum();
    if failed * 100 > n {
        return Err(Error::SamplingFailure(format!("{failed} of {n} draws failed")));
    }
    Ok(draws.into_iter().filter_map(|d| d.0).collect())
}

fn check_below_l1(spec: &SystemSpec) -> Result<()> {
    if spec.is_three_body() && spec.mu < 1.0 {
        let l = lagrange_points(spec.mu)?;
        if spec.c >= l.h_l1() {
            return Err(Error::OutOfRange(format!(
                "single-chart scans need c < H(L1) = {}",
                l.h_l1()
            )));
        }
    }
    Ok(())
}

fn histogram(values: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (vec![], vec![]);
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0; bins];
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    (edges, counts)
}

fn report(samples: Vec<ScanSample>, n_failed: usize) -> ScanReport {
    let vals: Vec<f64> = samples.iter().map(|s| s.normalized_pairing).collect();
    let (imin, min) = vals
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (histogram_edges, histogram_counts) = histogram(&vals, 20);
    ScanReport {
        n_samples: samples.len(),
        n_failed,
        min_normalized: min,
        max_normalized: max,
        argmin: samples
            .get(imin)
            .map(|s| s.state)
            .unwrap_or(RegState::new([1.0, 0.0, 0.0, 0.0], [0.0; 4])),
        histogram_edges,
        histogram_counts,
        empirical_constant: min,
        pass: min > 0.0 && !samples.is_empty(),
        samples,
    }
}

/// Sample `Sigma_c` and evaluate the normalized pairing of the interpolated map.
pub fn transversality_scan(spec: &SystemSpec, cut: &CutoffSpec, n: usize, seed: u64) -> Result<ScanReport> {
    transversality_scan_section(spec, &Section::Interpolated(*cut), n, seed)
}

pub fn transversality_scan_section(spec: &SystemSpec, section: &Section, n: usize, seed: u64) -> Result<ScanReport> {
    check_below_l1(spec)?;
    let states = sample_many(spec, n, seed)?;
    let n_failed = n - states.len();
    let samples = states
        .par_iter()
        .map(|r| {
            let v = section_value(r, spec, section)?;
            Ok(ScanSample {
                state: *r,
                pairing: v.pairing,
                normalized_pairing: v.normalized_pairing,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(samples, n_failed))
}

/// A state of the connected-sum problem together with the chart it is
/// expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaggedState {
    Physical(UnregState),
    Moon(RegState),
    Earth(RegState),
}

fn check_connected_sum_energy(spec: &SystemSpec) -> Result<()> {
    let l = lagrange_points(spec.mu)?;
    if !(spec.c > l.h_l1() && spec.c < l.h_l2()) {
        return Err(Error::OutOfRange(format!(
            "connected sum needs H(L1) < c < H(L2), got c = {}",
            spec.c
        )));
    }
    Ok(())
}

fn nearer_moon(s: &UnregState, spec: &SystemSpec) -> bool {
    (s.q - spec.moon_position()).norm() <= (s.q - spec.earth_position()).norm()
}

/// Piecewise section map of the two-centre problem: physical map away from
/// both collision loci, interpolated map inside each regularized chart.
pub fn theta_connected_sum(state: &TaggedState, spec: &SystemSpec, cut: &CutoffSpec) -> Result<SectionValue> {
    check_connected_sum_energy(spec)?;
    match state {
        TaggedState::Physical(s) => {
            let chart = if nearer_moon(s, spec) {
                Chart::Moon
            } else {
                Chart::Earth
            };
            let local = spec.with_chart(chart)?;
            let r = unreg_to_reg(s, &local);
            if cut.rho(r.xi[0]) != 0.0 {
                return Err(Error::RegionMismatch(format!(
                    "physical state inside the {chart:?} interpolation zone (xi0 = {})",
                    r.xi[0]
                )));
            }
            let x = crate::dynamics::x_h(s, spec)?;
            let (q3, p3) = (s.q[2], s.p[2]);
            let theta = Complex64::new(-p3, q3);
            let pairing = p3 * x.d_q[2] - q3 * x.d_p[2];
            let n2 = q3 * q3 + p3 * p3;
            let normalized_pairing = if n2 > 1e-24 {
                pairing / n2
            } else {
                let rm = (s.q - spec.moon_position()).norm();
                let re = (s.q - spec.earth_position()).norm();
                (1.0f64).min(spec.mu / rm.powi(3) + (1.0 - spec.mu) / re.powi(3))
            };
            Ok(SectionValue {
                theta_complex: theta,
                angle: page_angle(theta, &Section::Physical),
                pairing,
                normalized_pairing,
            })
        }
        TaggedState::Moon(r) | TaggedState::Earth(r) => {
            let chart = if matches!(state, TaggedState::Moon(_)) {
                Chart::Moon
            } else {
                Chart::Earth
            };
            let local = spec.with_chart(chart)?;
            match reg_to_unreg(r, &local) {
                Ok(s) if nearer_moon(&s, spec) != (chart == Chart::Moon) => {
                    return Err(Error::RegionMismatch(format!(
                        "{chart:?}-chart state lies nearer the other primary"
                    )))
                }
                _ => {}
            }
            section_value(r, &local, &Section::Interpolated(*cut))
        }
    }
}

/// Tag a regularized sample by its zone: chart-tagged inside the cutoff
/// support, physical outside.
pub fn tag_state(r: &RegState, chart: Chart, spec: &SystemSpec, cut: &CutoffSpec) -> Result<TaggedState> {
    if cut.rho(r.xi[0]) > 0.0 {
        Ok(match chart {
            Chart::Earth => TaggedState::Earth(*r),
            _ => TaggedState::Moon(*r),
        })
    } else {
        Ok(TaggedState::Physical(reg_to_unreg(r, &spec.with_chart(chart)?)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectedSumReport {
    pub scan: ScanReport,
    /// Largest angle difference between a chart value and the physical value
    /// at samples outside the cutoff support.
    pub max_overlap_discrepancy: f64,
    pub n_physical: usize,
    pub n_moon: usize,
    pub n_earth: usize,
}

/// Transversality scan of the connected-sum section: samples alternate
/// between the two charts and are kept only on their own primary's side.
pub fn connected_sum_scan(spec: &SystemSpec, cut: &CutoffSpec, n: usize, seed: u64) -> Result<ConnectedSumReport> {
    check_connected_sum_energy(spec)?;
    let moon = spec.with_chart(Chart::Moon)?;
    let earth = spec.with_chart(Chart::Earth)?;
    type Row = (Option<(ScanSample, TaggedState, f64)>, usize);
    let rows: Vec<Row> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Row> {
            let mut rng = sample_rng(seed, i);
            let (chart, local) = if i % 2 == 0 {
                (Chart::Moon, &moon)
            } else {
                (Chart::Earth, &earth)
            };
            let mut failed = 0;
            for _ in 0..20 {
                let r = match sample_level_set(local, &mut rng) {
                    Ok(r) => r,
                    Err(_) => {
                        failed += 1;
                        continue;
                    }
                };
                if let Ok(s) = reg_to_unreg(&r, local) {
                    if nearer_moon(&s, spec) != (chart == Chart::Moon) {
                        continue;
                    }
                }
                let tagged = tag_state(&r, chart, spec, cut)?;
                let v = theta_connected_sum(&tagged, spec, cut)?;
                let mut overlap = 0.0;
                if let TaggedState::Physical(_) = tagged {
                    let chart_angle = page_angle(theta_physical(&r), &Section::Physical);
                    let d = (chart_angle - v.angle).abs();
                    overlap = d.min(std::f64::consts::TAU - d);
                }
                let sample = ScanSample {
                    state: r,
                    pairing: v.pairing,
                    normalized_pairing: v.normalized_pairing,
                };
                return Ok((Some((sample, tagged, overlap)), failed));
            }
            Ok((None, failed))
        })
        .collect::<Result<_>>()?;
    let failed: usize = rows.iter().map(|r| r.1).sum();
    if failed * 100 > n {
        return Err(Error::SamplingFailure(format!("{failed} of {n} draws failed")));
    }
    let kept: Vec<_> = rows.into_iter().filter_map(|r| r.0).collect();
    let count = |f: fn(&TaggedState) -> bool| kept.iter().filter(|k| f(&k.1)).count();
    let n_physical = count(|t| matches!(t, TaggedState::Physical(_)));
    let n_moon = count(|t| matches!(t, TaggedState::Moon(_)));
    let n_earth = count(|t| matches!(t, TaggedState::Earth(_)));
    let max_overlap_discrepancy = kept.iter().map(|k| k.2).fold(0.0, f64::max);
    let missing = n - kept.len();
    let scan = report(kept.into_iter().map(|k| k.0).collect(), missing);
    Ok(ConnectedSumReport {
        scan,
        max_overlap_discrepancy,
        n_physical,
        n_moon,
        n_earth,
    })
}

/// A critical point of the Lefschetz map `xi3 + i eta3` on the disk bundle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub state: RegState,
    pub value: Complex64,
    /// Rank of the constrained Hessian of `Im Theta0 = eta3` (6 is full).
    pub hessian_rank: usize,
    pub residual: f64,
}

type Mat8x2 = SMatrix<f64, 8, 2>;

/// Normals of T*S^3 in R^8: gradients of `|xi|^2/2` and `<xi, eta>`.
fn normals(r: &RegState) -> Mat8x2 {
    let mut n = Mat8x2::zeros();
    for k in 0..4 {
        n[(k, 0)] = r.xi[k];
        n[(k, 1)] = r.eta[k];
        n[(k + 4, 1)] = r.xi[k];
    }
    n
}

fn tangent_projector(r: &RegState) -> SMatrix<f64, 8, 8> {
    let n = normals(r);
    let gram = n.transpose() * n;
    let inv = gram.try_inverse().unwrap_or_else(SMatrix::<f64, 2, 2>::identity);
    SMatrix::<f64, 8, 8>::identity() - n * inv * n.transpose()
}

/// Projected gradients of `xi3` and `eta3`, stacked.
fn lefschetz_residual(r: &RegState) -> SVector<f64, 16> {
    let p = tangent_projector(r);
    let mut out = SVector::<f64, 16>::zeros();
    for k in 0..8 {
        out[k] = p[(k, 3)];
        out[k + 8] = p[(k, 7)];
    }
    out
}

/// Orthonormal basis of the tangent space at `r` (6 columns).
fn tangent_basis(r: &RegState) -> DMatrix<f64> {
    let p = DMatrix::from_iterator(8, 8, tangent_projector(r).iter().cloned());
    let svd = p.svd(true, false);
    let u = svd.u.expect("svd u");
    let mut idx: Vec<usize> = (0..8).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    DMatrix::from_fn(8, 6, |i, j| u[(i, idx[j])])
}

fn retract(r: &RegState, v: &[f64]) -> Result<RegState> {
    let xi = r.xi + V4::from_column_slice(&v[..4]);
    let eta = r.eta + V4::from_column_slice(&v[4..8]);
    project_to_ts3(&xi, &eta)
}

fn constrained_hessian_rank(r: &RegState) -> Result<usize> {
    let t = tangent_basis(r);
    let h = 1e-4;
    let f = |u: &[f64]| -> Result<f64> {
        let mut v = [0.0; 8];
        for (j, uj) in u.iter().enumerate() {
            for i in 0..8 {
                v[i] += t[(i, j)] * uj;
            }
        }
        Ok(retract(r, &v)?.eta[3])
    };
    let mut hess = DMatrix::<f64>::zeros(6, 6);
    for a in 0..6 {
        for b in 0..6 {
            let e = |sa: f64, sb: f64| {
                let mut u = [0.0; 6];
                u[a] += sa * h;
                u[b] += sb * h;
                f(&u)
            };
            hess[(a, b)] = (e(1.0, 1.0)? - e(1.0, -1.0)? - e(-1.0, 1.0)? + e(-1.0, -1.0)?) / (4.0 * h * h);
        }
    }
    let sv = hess.singular_values();
    let smax = sv.max();
    Ok(sv.iter().filter(|&&s| s > 1e-6 * smax.max(1e-300)).count())
}

/// Multi-start Levenberg-Marquardt search for points where both projected
/// gradients of `xi3` and `eta3` vanish, restricted to `|eta| <= 1`.
pub fn lefschetz_critical_points(n_starts: usize, seed: u64) -> Result<Vec<CriticalPoint>> {
    let mut found: Vec<CriticalPoint> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_starts {
        let xi = crate::dynamics::random_unit4(&mut rng);
        let dir = crate::dynamics::random_unit4(&mut rng);
        let mut r = project_to_ts3(&xi, &dir)?;
        let radius = rand::Rng::gen_range(&mut rng, 0.0..1.0);
        let n = r.eta.norm();
        if n > 0.0 {
            r.eta *= radius / n;
        }
        let mut lambda = 1e-3;
        let mut res = lefschetz_residual(&r);
        for _ in 0..200 {
            if res.norm() < 1e-14 {
                break;
            }
            let t = tangent_basis(&r);
            let h = 1e-7;
            let mut jac = DMatrix::<f64>::zeros(16, 6);
            for j in 0..6 {
                let v: Vec<f64> = (0..8).map(|i| t[(i, j)] * h).collect();
                let vm: Vec<f64> = v.iter().map(|x| -x).collect();
                let d = (lefschetz_residual(&retract(&r, &v)?) - lefschetz_residual(&retract(&r, &vm)?)) / (2.0 * h);
                for i in 0..16 {
                    jac[(i, j)] = d[i];
                }
            }
            let rvec = DMatrix::from_iterator(16, 1, res.iter().cloned());
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * &rvec;
            let mut improved = false;
            for _ in 0..10 {
                let a = &jtj + DMatrix::<f64>::identity(6, 6) * lambda;
                let step = match a.lu().solve(&(-&jtr)) {
                    Some(s) => s,
                    None => break,
                };
                let v: Vec<f64> = (0..8).map(|i| (0..6).map(|j| t[(i, j)] * step[j]).sum()).collect();
                let mut cand = retract(&r, &v)?;
                let en = cand.eta.norm();
                if en > 1.0 {
                    cand.eta /= en;
                }
                let cres = lefschetz_residual(&cand);
                if cres.norm() < res.norm() {
                    r = cand;
                    res = cres;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !improved {
                break;
            }
        }
        if res.norm() > 1e-10 {
            continue;
        }
        if found.iter().any(|c| c.state.distance(&r) < 1e-6) {
            continue;
        }
        found.push(CriticalPoint {
            state: r,
            value: Complex64::new(r.xi[3], r.eta[3]),
            hessian_rank: constrained_hessian_rank(&r)?,
            residual: res.norm(),
        });
    }
    found.sort_by(|a, b| a.state.xi[3].total_cmp(&b.state.xi[3]));
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibria::auto_below_l1;

    fn specs() -> Vec<SystemSpec> {
        let mu = 0.3;
        let c = auto_below_l1(mu).unwrap();
        vec![
            SystemSpec::moon(mu, c).unwrap(),
            SystemSpec::earth(mu, c).unwrap(),
            SystemSpec::rotating_kepler(-1.8),
        ]
    }

    #[test]
    fn cutoff_shape() {
        let cut = CutoffSpec::default();
        assert_eq!(cut.rho(0.5), 0.0);
        assert_eq!(cut.rho(0.6), 0.0);
        assert_eq!(cut.rho(0.85), 1.0);
        assert_eq!(cut.rho(1.0), 1.0);
        let mut prev = 0.0;
        for k in 0..=100 {
            let x = 0.6 + 0.25 * k as f64 / 100.0;
            let v = cut.rho(x);
            assert!(v >= prev);
            prev = v;
            let h = 1e-6;
            let fd = (cut.rho(x + h) - cut.rho(x - h)) / (2.0 * h);
            assert!((fd - cut.drho(x)).abs() < 1e-6);
        }
        assert!(CutoffSpec::new(0.4, 0.3, 1.0).is_err());
        assert!(CutoffSpec::new(0.4, 0.0, 1.0).is_err());
        assert!(CutoffSpec::new(2.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn physical_theta_is_rotated_q3_p3() {
        let spec = &specs()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r = sample_level_set(spec, &mut rng).unwrap();
            let s = reg_to_unreg(&r, spec).unwrap();
            let z = Complex64::new(s.q[2], s.p[2]);
            let expect = (Complex64::i() * z / z.norm()).arg();
            let got = theta_physical(&r).arg();
            let d = (got - expect).abs();
            assert!(d.min(2.0 * PI - d) < 1e-10);
        }
    }

    #[test]
    fn closed_forms_match_finite_differences() {
        let cut = CutoffSpec::default();
        for spec in specs() {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..40 {
                let r = sample_level_set(&spec, &mut rng).unwrap();
                for sec in [Section::Physical, Section::Geodesic, Section::Interpolated(cut)] {
                    let a = pairing_closed_form(&r, &spec, &sec).unwrap();
                    let b = pairing_flow_fd(&r, &spec, &sec).unwrap();
                    assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{sec:?} {a} {b}");
                }
            }
        }
    }

    #[test]
    fn a4_examples() {
        let s = SystemSpec::moon(0.3, -2.0).unwrap();
        assert!((a4_value(&s).unwrap() - (0.3 + 2.0 - 0.5)).abs() < 1e-12);
        let s = SystemSpec::earth(0.3, -2.0).unwrap();
        assert!((a4_value(&s).unwrap() - (0.7 + 2.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn binding_point_value() {
        let spec = &specs()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = sample_level_set(spec, &mut rng).unwrap();
        let mut xi = r.xi;
        let mut eta = r.eta;
        xi[3] = 0.0;
        eta[3] = 0.0;
        let b = project_to_ts3(&xi, &eta).unwrap();
        let v = section_value(&b, spec, &Section::Interpolated(CutoffSpec::default())).unwrap();
        assert_eq!(v.theta_complex, Complex64::new(0.0, 0.0));
        assert!(v.normalized_pairing.is_finite());
    }

    #[test]
    fn scan_is_deterministic() {
        let spec = &specs()[0];
        let cut = CutoffSpec::default();
        let a = transversality_scan(spec, &cut, 200, 9).unwrap();
        let b = transversality_scan(spec, &cut, 200, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_samples, 200);
        assert_eq!(a.histogram_counts.iter().sum::<usize>(), 200);
    }

    #[test]
    fn scan_rejects_energy_above_l1() {
        let mu = 0.3;
        let c = crate::equilibria::auto_above_l1(mu).unwrap();
        let spec = SystemSpec::moon(mu, c).unwrap();
        assert!(matches!(
            transversality_scan(&spec, &CutoffSpec::default(), 10, 1),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn region_mismatch() {
        let mu = 0.3;
        let c = crate::equilibria::auto_above_l1(mu).unwrap();
        let spec = SystemSpec::moon(mu, c).unwrap();
        let cut = CutoffSpec::default();
        // Physical state essentially on top of the Moon.
        let s = UnregState::new([mu - 1.0 + 1e-3, 0.0, 0.01], [0.0, 3.0, 0.0]);
        assert!(matches!(
            theta_connected_sum(&TaggedState::Physical(s), &spec, &cut),
            Err(Error::RegionMismatch(_))
        ));
        // Moon-tagged state located next to the Earth.
        let s = UnregState::new([mu - 0.05, 0.0, 0.01], [0.0, 0.5, 0.0]);
        let r = unreg_to_reg(&s, &spec);
        assert!(matches!(
            theta_connected_sum(&TaggedState::Moon(r), &spec, &cut),
            Err(Error::RegionMismatch(_))
        ));
    }

    #[test]
    fn lefschetz_points() {
        let pts = lefschetz_critical_points(40, 2).unwrap();
        assert_eq!(pts.len(), 2, "{pts:?}");
        for (p, sign) in pts.iter().zip([-1.0, 1.0]) {
            assert!((p.state.xi[3] - sign).abs() < 1e-8);
            assert!(p.state.eta.norm() < 1e-8);
            assert_eq!(p.hessian_rank, 6);
        }
    }
}
