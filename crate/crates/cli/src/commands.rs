use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cr3bp_core::convexity::convexity_certificate;
use cr3bp_core::dynamics::sample_level_set;
use cr3bp_core::equilibria::lagrange_points;
use cr3bp_core::flow::{integrate, return_map};
use cr3bp_core::kepler_oracle::{analytic_return, circular_orbits, kepler_period, kepler_return_period, sample_page};
use cr3bp_core::sections::{connected_sum_scan, transversality_scan, ScanReport};
use cr3bp_core::{reg_to_unreg, CutoffSpec, KeplerContext, RegState, Section, SystemSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Command, RunConfig};
use crate::plot::{self, Segment};

/// Result of a command: whether its check passed and what to print.
pub struct Outcome {
    pub pass: bool,
    pub lines: Vec<String>,
}

struct Out<'a> {
    dir: &'a Path,
    stem: &'static str,
}

impl Out<'_> {
    fn path(&self, ext: &str) -> PathBuf {
        self.dir.join(format!("{}.{ext}", self.stem))
    }

    fn csv<S: Serialize>(&self, rows: &[S]) -> Result<PathBuf> {
        let p = self.path("csv");
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("cannot create {}", p.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(p)
    }

    fn json<S: Serialize>(&self, cfg: &RunConfig, pass: bool, result: &S) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Summary<'a, S> {
            config: &'a RunConfig,
            pass: bool,
            result: &'a S,
        }
        let p = self.path("json");
        let text = serde_json::to_string_pretty(&Summary {
            config: cfg,
            pass,
            result,
        })?;
        fs::write(&p, text + "\n").with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    fs::create_dir_all(&cfg.output_path)
        .with_context(|| format!("cannot create output directory {}", cfg.output_path.display()))?;
    match cfg.command {
        Command::Equilibria => equilibria(cfg),
        Command::Scan => scan(cfg),
        Command::ReturnMap => return_maps(cfg),
        Command::Orbit => orbit(cfg),
        Command::KeplerCompare => kepler_compare(cfg),
        Command::Convexity => convexity(cfg),
        Command::Golden => golden(cfg),
    }
}

fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

fn spec_of(cfg: &RunConfig) -> Result<SystemSpec> {
    Ok(SystemSpec::new(cfg.mu, cfg.c, cfg.chart())?)
}

/// Cutoff with the amplitude calibrated on the current energy surface.
fn cutoff(cfg: &RunConfig, spec: &SystemSpec) -> Result<CutoffSpec> {
    Ok(CutoffSpec::calibrated(spec, cfg.delta, cfg.epsilon, 2000, cfg.seed)?)
}

#[derive(Serialize)]
struct EquilibriumRow {
    name: String,
    x: f64,
    y: f64,
    z: f64,
    h: f64,
}

fn equilibria(cfg: &RunConfig) -> Result<Outcome> {
    let out = Out {
        dir: &cfg.output_path,
        stem: "equilibria",
    };
    let l = lagrange_points(cfg.mu)?;
    let rows: Vec<EquilibriumRow> = (0..5)
        .map(|i| EquilibriumRow {
            name: format!("L{}", i + 1),
            x: l.points[i][0],
            y: l.points[i][1],
            z: l.points[i][2],
            h: l.values[i],
        })
        .collect();
    let pass = l.h_l1() <= -1.5;
    let csv = out.csv(&rows)?;
    out.json(cfg, pass, &l)?;
    let mut lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{}  ({:+.12}, {:+.12}, {:+.12})  H = {:.12}",
                r.name, r.x, r.y, r.z, r.h
            )
        })
        .collect();
    lines.push(format!("check H(L1) <= -3/2: {}", if pass { "ok" } else { "FAILED" }));
    lines.push(format!("wrote {}", csv.display()));
    Ok(Outcome { pass, lines })
}

#[derive(Serialize)]
struct ScanRow {
    index: usize,
    xi0: f64,
    xi1: f64,
    xi2: f64,
    xi3: f64,
    eta0: f64,
    eta1: f64,
    eta2: f64,
    eta3: f64,
    pairing: f64,
    normalized_pairing: f64,
}

#[derive(Serialize)]
struct ScanSummary<'a> {
    mode: &'static str,
    amplitude: f64,
    n_samples: usize,
    n_failed: usize,
    min_normalized: f64,
    max_normalized: f64,
    argmin: [f64; 8],
    empirical_constant: f64,
    histogram_edges: &'a [f64],
    histogram_counts: &'a [usize],
    max_overlap_discrepancy: Option<f64>,
}

fn scan(cfg: &RunConfig) -> Result<Outcome> {
    let out = Out {
        dir: &cfg.output_path,
        stem: "scan",
    };
    let spec = spec_of(cfg)?;
    let l = lagrange_points(cfg.mu)?;
    let (mode, cut, report, overlap): (_, _, ScanReport, _) = if cfg.c < l.h_l1() {
        let cut = cutoff(cfg, &spec)?;
        (
            "single-chart",
            cut,
            transversality_scan(&spec, &cut, cfg.n_samples, cfg.seed)?,
            None,
        )
    } else {
        // Both charts must tolerate the shared amplitude.
        let a = cutoff(cfg, &spec.with_chart(cr3bp_core::Chart::Moon)?)?;
        let b = cutoff(cfg, &spec.with_chart(cr3bp_core::Chart::Earth)?)?;
        let cut = if a.amplitude <= b.amplitude { a } else { b };
        let rep = connected_sum_scan(&spec, &cut, cfg.n_samples, cfg.seed)?;
        ("connected-sum", cut, rep.scan, Some(rep.max_overlap_discrepancy))
    };
    let rows: Vec<ScanRow> = report
        .samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let a = s.state.to_array();
            ScanRow {
                index,
                xi0: a[0],
                xi1: a[1],
                xi2: a[2],
                xi3: a[3],
                eta0: a[4],
                eta1: a[5],
                eta2: a[6],
                eta3: a[7],
                pairing: s.pairing,
                normalized_pairing: s.normalized_pairing,
            }
        })
        .collect();
    let pass = report.pass && overlap.is_none_or(|d| d < 1e-10);
    let csv = out.csv(&rows)?;
    let summary = ScanSummary {
        mode,
        amplitude: cut.amplitude,
        n_samples: report.n_samples,
        n_failed: report.n_failed,
        min_normalized: report.min_normalized,
        max_normalized: report.max_normalized,
        argmin: report.argmin.to_array(),
        empirical_constant: report.empirical_constant,
        histogram_edges: &report.histogram_edges,
        histogram_counts: &report.histogram_counts,
        max_overlap_discrepancy: overlap,
    };
    out.json(cfg, pass, &summary)?;
    if cfg.emit_plot {
        let sec = Section::Interpolated(cut);
        let pts: Vec<(f64, f64, f64)> = report
            .samples
            .iter()
            .map(|s| {
                (
                    sec.page_angle(&s.state),
                    s.state.xi[0],
                    s.normalized_pairing.max(1e-12).ln(),
                )
            })
            .collect();
        plot::colored_scatter(&out.path("svg"), "log normalized pairing", ("page angle", "xi0"), &pts)?;
    }
    let mut lines = vec![
        format!(
            "{mode} scan at mu = {}, c = {:.12}, cutoff amplitude {:.6}",
            cfg.mu, cfg.c, cut.amplitude
        ),
        format!(
            "samples {} (failed draws {}), normalized pairing min {:.6e} max {:.6e}",
            report.n_samples, report.n_failed, report.min_normalized, report.max_normalized
        ),
    ];
    if let Some(d) = overlap {
        lines.push(format!("overlap discrepancy {d:.3e}"));
    }
    lines.push(format!(
        "check min normalized pairing > 0: {}",
        if pass { "ok" } else { "FAILED" }
    ));
    lines.push(format!("wrote {}", csv.display()));
    Ok(Outcome { pass, lines })
}

#[derive(Serialize)]
struct ReturnRow {
    index: usize,
    start_xi0: f64,
    start_xi1: f64,
    start_xi2: f64,
    start_xi3: f64,
    start_eta0: f64,
    start_eta1: f64,
    start_eta2: f64,
    start_eta3: f64,
    end_xi0: f64,
    end_xi1: f64,
    end_xi2: f64,
    end_xi3: f64,
    end_eta0: f64,
    end_eta1: f64,
    end_eta2: f64,
    end_eta3: f64,
    return_time: f64,
    physical_time: f64,
    q_drift: f64,
}

impl ReturnRow {
    fn new(index: usize, start: &RegState, end: &RegState, return_time: f64, physical_time: f64, q_drift: f64) -> Self {
        let s = start.to_array();
        let e = end.to_array();
        Self {
            index,
            start_xi0: s[0],
            start_xi1: s[1],
            start_xi2: s[2],
            start_xi3: s[3],
            start_eta0: s[4],
            start_eta1: s[5],
            start_eta2: s[6],
            start_eta3: s[7],
            end_xi0: e[0],
            end_xi1: e[1],
            end_xi2: e[2],
            end_xi3: e[3],
            end_eta0: e[4],
            end_eta1: e[5],
            end_eta2: e[6],
            end_eta3: e[7],
            return_time,
            physical_time,
            q_drift,
        }
    }

    fn segment(&self) -> Segment {
        ((self.start_xi1, self.start_xi2), (self.end_xi1, self.end_xi2))
    }
}

#[derive(Serialize)]
struct ReturnSummary {
    amplitude: f64,
    n_requested: usize,
    n_returned: usize,
    failures: Vec<(usize, String)>,
    max_q_drift: f64,
    mean_return_time: f64,
}

fn return_maps(cfg: &RunConfig) -> Result<Outcome> {
    let out = Out {
        dir: &cfg.output_path,
        stem: "return_map",
    };
    let spec = spec_of(cfg)?;
    let l = lagrange_points(cfg.mu)?;
    anyhow::ensure!(
        cfg.c < l.h_l1(),
        "return-map needs c below H(L1) = {:.6}; got {}",
        l.h_l1(),
        cfg.c
    );
    let cut = cutoff(cfg, &spec)?;
    let section = Section::Interpolated(cut);
    let results: Vec<std::result::Result<ReturnRow, String>> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, i);
            let start = loop {
                let r = sample_level_set(&spec, &mut rng).map_err(|e| e.to_string())?;
                if section.theta(&r).norm() > 1e-3 {
                    break r;
                }
            };
            let rec = return_map(&start, &spec, &section, &cfg.integrator).map_err(|e| e.to_string())?;
            Ok(ReturnRow::new(
                i,
                &rec.start,
                &rec.end,
                rec.return_time,
                rec.physical_time,
                rec.q_drift,
            ))
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push((i, e)),
        }
    }
    let max_q_drift = rows.iter().map(|r| r.q_drift.abs()).fold(0.0, f64::max);
    let mean_return_time = rows.iter().map(|r| r.return_time).sum::<f64>() / rows.len().max(1) as f64;
    let pass = !rows.is_empty() && max_q_drift < 1e-8;
    let csv = out.csv(&rows)?;
    let summary = ReturnSummary {
        amplitude: cut.amplitude,
        n_requested: cfg.n_samples,
        n_returned: rows.len(),
        failures,
        max_q_drift,
        mean_return_time,
    };
    out.json(cfg, pass, &summary)?;
    if cfg.emit_plot {
        let segs: Vec<_> = rows.iter().map(ReturnRow::segment).collect();
        plot::displacement_field(&out.path("svg"), "return-map displacement", ("xi1", "xi2"), &segs)?;
    }
    Ok(Outcome {
        pass,
        lines: vec![
            format!(
                "return map at mu = {}, c = {:.12}: {} of {} starts returned, mean return time {:.6}",
                cfg.mu, cfg.c, summary.n_returned, cfg.n_samples, mean_return_time
            ),
            format!(
                "check max |Q drift| {max_q_drift:.3e} < 1e-8: {}",
                if pass { "ok" } else { "FAILED" }
            ),
            format!("wrote {}", csv.display()),
        ],
    })
}

#[derive(Serialize)]
struct OrbitSummary {
    start: [f64; 8],
    n_points: usize,
    final_time: f64,
    final_physical_time: f64,
    max_q_drift: f64,
}

fn orbit(cfg: &RunConfig) -> Result<Outcome> {
    let out = Out {
        dir: &cfg.output_path,
        stem: "orbit",
    };
    let spec = spec_of(cfg)?;
    let cut = if cfg.c < lagrange_points(cfg.mu)?.h_l1() {
        cutoff(cfg, &spec)?
    } else {
        CutoffSpec::new(cfg.delta, cfg.epsilon, 1.0)?
    };
    let start = sample_level_set(&spec, &mut sample_rng(cfg.seed, 0))?;
    let tr = integrate(&start, cfg.integrator.max_time, &spec, &cfg.integrator)?;
    let level = spec.q_level();
    let max_q_drift = tr.points.iter().map(|p| (p.q - level).abs()).fold(0.0, f64::max);
    let pass = max_q_drift < 1e-8;
    let p = out.path("jsonl");
    fs::write(&p, tr.to_jsonl(&Section::Interpolated(cut))).with_context(|| format!("cannot write {}", p.display()))?;
    let last = tr.last();
    let summary = OrbitSummary {
        start: start.to_array(),
        n_points: tr.points.len(),
        final_time: last.t,
        final_physical_time: last.t_phys,
        max_q_drift,
    };
    out.json(cfg, pass, &summary)?;
    if cfg.emit_plot {
        let pts: Vec<(f64, f64)> = tr
            .points
            .iter()
            .filter_map(|p| reg_to_unreg(&p.state, &spec).ok())
            .map(|s| (s.q[0], s.q[1]))
            .collect();
        plot::trace(&out.path("svg"), "orbit (rotating frame)", ("q1", "q2"), &pts)?;
    }
    Ok(Outcome {
        pass,
        lines: vec![
            format!(
                "{} points to flow time {:.3} (physical time {:.6})",
                tr.points.len(),
                last.t,
                last.t_phys
            ),
            format!(
                "check max |Q drift| {max_q_drift:.3e} < 1e-8: {}",
                if pass { "ok" } else { "FAILED" }
            ),
            format!("wrote {}", p.display()),
        ],
    })
}

#[derive(Serialize)]
struct KeplerRow {
    index: usize,
    angular_momentum: f64,
    max_deviation: f64,
    physical_time: f64,
    expected_time: f64,
    time_error: f64,
}

#[derive(Serialize)]
struct KeplerSummary {
    max_deviation: f64,
    max_time_error: f64,
    printed_period_offset: f64,
}

fn kepler_compare(cfg: &RunConfig) -> Result<Outcome> {
    let out = Out {
        dir: &cfg.output_path,
        stem: "kepler_compare",
    };
    let ctx = KeplerContext::new(cfg.c)?;
    let spec = ctx.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts = (0..cfg.n_samples)
        .map(|_| sample_page(&ctx, 0.05, &mut rng))
        .collect::<cr3bp_core::Result<Vec<_>>>()?;
    let results = starts
        .par_iter()
        .enumerate()
        .map(|(index, r)| -> Result<(KeplerRow, Segment, f64)> {
            let rec = return_map(r, &spec, &Section::Geodesic, &cfg.integrator)?;
            let exp = analytic_return(r, &ctx)?;
            let (a, b) = (rec.end.to_array(), exp.to_array());
            let max_deviation = (0..8).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max);
            let l = ctx.c - cr3bp_core::dynamics::angular_momentum_reg(r);
            let expected_time = kepler_return_period(l)?;
            let printed = (rec.physical_time - kepler_period(l)?).abs();
            let row = KeplerRow {
                index,
                angular_momentum: ctx.c - l,
                max_deviation,
                physical_time: rec.physical_time,
                expected_time,
                time_error: (rec.physical_time - expected_time).abs(),
            };
            Ok((row, ((r.xi[1], r.xi[2]), (rec.end.xi[1], rec.end.xi[2])), printed))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_deviation = results.iter().map(|r| r.0.max_deviation).fold(0.0, f64::max);
    let max_time_error = results.iter().map(|r| r.0.time_error).fold(0.0, f64::max);
    let printed_period_offset = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let pass = max_deviation < 1e-6;
    let segs: Vec<_> = results.iter().map(|r| r.1).collect();
    let rows: Vec<KeplerRow> = results.into_iter().map(|r| r.0).collect();
    let csv = out.csv(&rows)?;
    out.json(
        cfg,
        pass,
        &KeplerSummary {
            max_deviation,
            max_time_error,
            printed_period_offset,
        },
    )?;
    if cfg.emit_plot {
        plot::displacement_field(&out.path("svg"), "rotating-Kepler return map", ("xi1", "xi2"), &segs)?;
    }
    Ok(Outcome {
        pass,
        lines: vec![
            format!("max coordinate deviation numerical vs analytic: {max_deviation:.3e}"),
            format!("max |return time - 2 pi (-2K)^(-3/2)|: {max_time_error:.3e}"),
            format!("(the closed form pi / (2 (-K)^(3/2)) is off by up to {printed_period_offset:.6})"),
            format!("check deviation < 1e-6: {}", if pass { "ok" } else { "FAILED" }),
            format!("wrote {}", csv.display()),
        ],
    })
}

#[derive(Serialize)]
struct ConvexityRow {
    mu: f64,
    c: f64,
    n_samples: usize,
    min_eigen: f64,
    max_cross_check: f64,
    pass: bool,
}

fn convexity(cfg: &RunConfig) -> Result<Outcome> {
    let out = Out {
        dir: &cfg.output_path,
        stem: "convexity",
    };
    let spec = spec_of(cfg)?;
    let rep = convexity_certificate(&spec, cfg.n_samples, cfg.seed)?;
    let row = ConvexityRow {
        mu: cfg.mu,
        c: cfg.c,
        n_samples: rep.n_samples,
        min_eigen: rep.min_eigen,
        max_cross_check: rep.max_cross_check,
        pass: rep.pass,
    };
    let csv = out.csv(&[row])?;
    out.json(cfg, rep.pass, &rep)?;
    Ok(Outcome {
        pass: rep.pass,
        lines: vec![
            format!(
                "binding samples {}, min eigenvalue {:.6e}, cross-check {:.3e}",
                rep.n_samples, rep.min_eigen, rep.max_cross_check
            ),
            format!("check positive definite: {}", if rep.pass { "ok" } else { "FAILED" }),
            format!("wrote {}", csv.display()),
        ],
    })
}

#[derive(Serialize)]
struct GoldenRow {
    c: f64,
    r_dir: f64,
    r_ret: f64,
    p_dir: f64,
    p_ret: f64,
    t_c: f64,
    t_c_closed_form: f64,
}

fn golden(cfg: &RunConfig) -> Result<Outcome> {
    let out = Out {
        dir: &cfg.output_path,
        stem: "golden",
    };
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for k in 0..cfg.n_samples {
        let c = cfg.c - 0.25 * k as f64;
        let o = circular_orbits(c)?;
        if let Some(card) = o.cardano {
            for (a, b) in card.iter().zip(&o.bracketed) {
                worst = worst.max((a - b).abs());
            }
        }
        rows.push(GoldenRow {
            c,
            r_dir: o.r_dir,
            r_ret: o.r_ret,
            p_dir: o.p_dir,
            p_ret: o.p_ret,
            t_c: kepler_return_period(c)?,
            t_c_closed_form: kepler_period(c)?,
        });
    }
    let pass = worst < 1e-10;
    let csv = out.csv(&rows)?;
    #[derive(Serialize)]
    struct GoldenSummary {
        rows: usize,
        max_cardano_vs_bracketed: f64,
    }
    out.json(
        cfg,
        pass,
        &GoldenSummary {
            rows: rows.len(),
            max_cardano_vs_bracketed: worst,
        },
    )?;
    Ok(Outcome {
        pass,
        lines: vec![
            format!("{} rows from c = {} in steps of -0.25", rows.len(), cfg.c),
            format!(
                "check Cardano vs bracketed {worst:.3e} < 1e-10: {}",
                if pass { "ok" } else { "FAILED" }
            ),
            format!("wrote {}", csv.display()),
        ],
    })
}
