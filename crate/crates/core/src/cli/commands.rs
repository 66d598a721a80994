use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::output::{read_forcing_csv, OutputDir};
use super::{CliError, Command};
use crate::chaos::{run_chaos, ChaosConfig, ChaosError};
use crate::config::{ConfigError, FpMode, InitialSection, JointOutput, RunConfig};
use crate::equilibrium::{self, EquilibriumError};
use crate::fixedpoint::{gap_bound, iterate_monotone, picard_iterate, FixedPointError};
use crate::fp::{
    grid, integrate_forced, integrate_nonlinear, self_consistency_residual, FpError, Storage,
};
use crate::model::{JointDist, Model, SampledPath};
use crate::rng::replica_rng;
use crate::sim::{
    fit_growth, simulate_finite_n_with, BranchingConfig, EventTrace, FiniteNConfig,
    InitialCondition, JointRecording, SimError,
};
use crate::stats::mean_and_se;

/// Slope window the convergence study is expected to land in.
pub const CHAOS_SLOPE_RANGE: (f64, f64) = (-0.65, -0.35);

fn fp_err(e: FpError) -> CliError {
    match e {
        FpError::MassDefect { .. } => CliError::Certificate(e.to_string()),
        FpError::Io(_) => CliError::Failure(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

fn sim_err(e: SimError) -> CliError {
    match e {
        SimError::CouplingViolation { .. } | SimError::Audit(_) => {
            CliError::Certificate(e.to_string())
        }
        _ => CliError::Config(e.to_string()),
    }
}

fn eq_err(e: EquilibriumError) -> CliError {
    match e {
        EquilibriumError::BracketFailure { .. } | EquilibriumError::SelfTest { .. } => {
            CliError::Certificate(e.to_string())
        }
        _ => CliError::Config(e.to_string()),
    }
}

fn fixedpoint_err(e: FixedPointError) -> CliError {
    match e {
        FixedPointError::Fp(inner) => fp_err(inner),
        e if e.is_certificate_failure() => CliError::Certificate(e.to_string()),
        e => CliError::Config(e.to_string()),
    }
}

fn chaos_err(e: ChaosError) -> CliError {
    match e {
        ChaosError::Fp(inner) => fp_err(inner),
        ChaosError::Sim(inner) => sim_err(inner),
        e => CliError::Config(e.to_string()),
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &'static str) -> Result<&'a T, CliError> {
    s.as_ref()
        .ok_or_else(|| ConfigError::MissingSection(name).into())
}

fn initial_law(config: &RunConfig, model: &Model) -> Result<JointDist, CliError> {
    let init = config
        .initial
        .clone()
        .unwrap_or(InitialSection::DiseaseFree);
    Ok(init.build(model, || {
        equilibrium::find_m_star(model, 1e-12)
            .map(|r| r.m_star)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    })?)
}

pub(super) fn dispatch(
    cmd: &Command,
    config: &RunConfig,
    seed: Option<u64>,
    out: &OutputDir,
) -> Result<(), CliError> {
    let model = config.build_model()?;
    match cmd {
        Command::Simulate(_) => simulate(config, &model, seed.expect("seeded"), out),
        Command::Fp(_) => fp(config, &model, out),
        Command::Fixedpoint(_) => fixedpoint(config, &model, out),
        Command::Equilibrium { .. } => equilibrium(config, &model, seed, out),
        Command::Chaos(_) => chaos(config, &model, seed.expect("seeded"), out),
        Command::Branching(_) => branching(config, &model, seed.expect("seeded"), out),
    }
}

fn write_joint(
    w: &mut dyn Write,
    times: &[f64],
    joint: &[Vec<f64>],
    skip: usize,
) -> std::io::Result<()> {
    writeln!(w, "t,n,k,weight")?;
    for (t, law) in times[skip..].iter().zip(joint) {
        let mut n = 1;
        let mut k = 0;
        for p in law {
            writeln!(w, "{t},{n},{k},{p}")?;
            k += 1;
            if k > n {
                n += 1;
                k = 0;
            }
        }
    }
    Ok(())
}

fn simulate(config: &RunConfig, model: &Model, seed: u64, out: &OutputDir) -> Result<(), CliError> {
    let s = section(&config.simulate, "simulate")?;
    if s.replicas == 0 {
        return Err(CliError::Config("simulate.replicas must be >= 1".into()));
    }
    let law = initial_law(config, model)?;
    let init = InitialCondition::Iid {
        law,
        households: s.households,
    };
    let sim = FiniteNConfig {
        horizon: s.horizon,
        sample_dt: s.sample_dt,
        record_joint: match s.joint {
            JointOutput::None => JointRecording::None,
            JointOutput::Final => JointRecording::Final,
            JointOutput::All => JointRecording::All,
        },
    };
    let traces: Vec<EventTrace> = (0..s.replicas as u64)
        .into_par_iter()
        .map(|r| simulate_finite_n_with(model, &init, &sim, &mut replica_rng(seed, r)))
        .collect::<Result<_, _>>()
        .map_err(sim_err)?;

    let width = s.replicas.saturating_sub(1).to_string().len().max(3);
    for (r, trace) in traces.iter().enumerate() {
        out.csv(&format!("trace_{r:0width$}.csv"), |w| {
            writeln!(w, "t,mean_infected,frac_infected_households")?;
            for j in 0..trace.times.len() {
                writeln!(
                    w,
                    "{},{},{}",
                    trace.times[j], trace.mean_infected[j], trace.frac_infected_households[j]
                )?;
            }
            Ok(())
        })?;
        if !trace.joint.is_empty() {
            let skip = trace.times.len() - trace.joint.len();
            out.csv(&format!("joint_{r:0width$}.csv"), |w| {
                write_joint(w, &trace.times, &trace.joint, skip)
            })?;
        }
    }

    let times = &traces[0].times;
    let aggregate: Vec<_> = (0..times.len())
        .map(|j| {
            mean_and_se(
                &traces
                    .iter()
                    .map(|t| t.mean_infected[j])
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    out.csv("aggregate.csv", |w| {
        writeln!(w, "t,mean,se,ci_low,ci_high,replicas")?;
        for (t, e) in times.iter().zip(&aggregate) {
            let half = 1.96 * e.std_error;
            writeln!(
                w,
                "{t},{},{},{},{},{}",
                e.mean,
                e.std_error,
                e.mean - half,
                e.mean + half,
                s.replicas
            )?;
        }
        Ok(())
    })?;

    let from = s.average_from.unwrap_or(s.horizon / 2.0);
    let window: Vec<f64> = times
        .iter()
        .zip(&aggregate)
        .filter(|(&t, _)| t >= from)
        .map(|(_, e)| e.mean)
        .collect();
    #[derive(Serialize)]
    struct Summary {
        households: usize,
        replicas: usize,
        seed: u64,
        long_run_mean: f64,
        average_from: f64,
        events: u64,
    }
    out.json(
        "summary.json",
        &Summary {
            households: s.households,
            replicas: s.replicas,
            seed,
            long_run_mean: window.iter().sum::<f64>() / window.len().max(1) as f64,
            average_from: from,
            events: traces.iter().map(|t| t.events).sum(),
        },
    )?;
    Ok(())
}

fn fp(config: &RunConfig, model: &Model, out: &OutputDir) -> Result<(), CliError> {
    let s = section(&config.fp, "fp")?;
    let mu0 = initial_law(config, model)?;
    let storage = match s.store_every {
        Some(k) if k > 0 => Storage::Every(k),
        _ => Storage::Endpoints,
    };
    let pi_bar = model.pi_bar();
    let traj = match s.mode {
        FpMode::Nonlinear => {
            if s.forcing.is_some() || s.forcing_file.is_some() {
                return Err(CliError::Config(
                    "fp.forcing and fp.forcing_file need mode = \"forced\"".into(),
                ));
            }
            integrate_nonlinear(model, &mu0, s.horizon, s.dt, storage)
        }
        FpMode::Forced => {
            let path = match (s.forcing, &s.forcing_file) {
                (Some(m), None) => {
                    let (steps, h) = grid(s.horizon, s.dt).map_err(fp_err)?;
                    SampledPath::constant(m, 0.0, h, steps + 1, (0.0, pi_bar))
                        .map_err(|e| CliError::Config(e.to_string()))?
                }
                (None, Some(file)) => {
                    let (t0, dt, values) = read_forcing_csv(file).map_err(CliError::Config)?;
                    SampledPath::new(t0, dt, values, (0.0, pi_bar))
                        .map_err(|e| CliError::Config(e.to_string()))?
                }
                _ => {
                    return Err(CliError::Config(
                        "forced mode needs exactly one of fp.forcing, fp.forcing_file".into(),
                    ))
                }
            };
            integrate_forced(model, &mu0, &path, s.horizon, s.dt, storage)
        }
    }
    .map_err(fp_err)?;

    out.csv("means.csv", |w| traj.write_means_csv(w))?;
    if s.store_every.is_some() {
        out.csv("states.csv", |w| traj.write_states_csv(w))?;
    }
    let self_consistency = match s.mode {
        FpMode::Nonlinear => Some(self_consistency_residual(model, &mu0, &traj).map_err(fp_err)?),
        FpMode::Forced => None,
    };
    #[derive(Serialize)]
    struct Summary {
        mode: FpMode,
        steps: usize,
        dt: f64,
        initial_mean: f64,
        final_mean: f64,
        max_defect: f64,
        self_consistency: Option<f64>,
    }
    out.json(
        "summary.json",
        &Summary {
            mode: s.mode.clone(),
            steps: traj.steps(),
            dt: traj.dt(),
            initial_mean: traj.means.values()[0],
            final_mean: traj.final_mean(),
            max_defect: traj.max_defect,
            self_consistency,
        },
    )?;
    Ok(())
}

fn fixedpoint(config: &RunConfig, model: &Model, out: &OutputDir) -> Result<(), CliError> {
    let s = section(&config.fixedpoint, "fixedpoint")?;
    let mu0 = initial_law(config, model)?;
    let res =
        iterate_monotone(model, &mu0, s.horizon, s.dt, s.tol, s.k_max).map_err(fixedpoint_err)?;
    out.csv("convergence.csv", |w| res.write_report_csv(w))?;
    let b = &res.bracket;
    out.csv("bracket.csv", |w| {
        writeln!(w, "t,m_minus,m_plus,fixed_point")?;
        for (i, t) in b.m_minus.times().enumerate() {
            writeln!(
                w,
                "{t},{},{},{}",
                b.m_minus.values()[i],
                b.m_plus.values()[i],
                res.fixed_point.values()[i]
            )?;
        }
        Ok(())
    })?;
    let picard = if s.picard {
        let p = picard_iterate(model, &mu0, s.horizon, s.dt, s.tol, s.k_max, None)
            .map_err(fixedpoint_err)?;
        out.csv("picard.csv", |w| {
            writeln!(w, "t,m")?;
            for (t, v) in p.path.times().zip(p.path.values()) {
                writeln!(w, "{t},{v}")?;
            }
            Ok(())
        })?;
        Some((p.converged, p.k, p.path.sup_distance(&res.fixed_point)))
    } else {
        None
    };
    #[derive(Serialize)]
    struct Summary {
        k: usize,
        gap: f64,
        converged: bool,
        residual: f64,
        integrator_error: f64,
        max_order_defect: f64,
        final_bound: f64,
        picard_converged: Option<bool>,
        picard_iterations: Option<usize>,
        picard_distance: Option<f64>,
    }
    out.json(
        "summary.json",
        &Summary {
            k: b.k,
            gap: b.gap,
            converged: res.converged,
            residual: res.residual,
            integrator_error: res.integrator_error,
            max_order_defect: b.max_order_defect,
            final_bound: gap_bound(model, s.horizon, b.k),
            picard_converged: picard.map(|p| p.0),
            picard_iterations: picard.map(|p| p.1),
            picard_distance: picard.map(|p| p.2),
        },
    )?;
    if let Some(r) = b.history.iter().find(|r| r.gap > r.bound + 1e-6) {
        return Err(CliError::Certificate(format!(
            "gap {} exceeds bound {} at k = {}",
            r.gap, r.bound, r.k
        )));
    }
    if res.converged && res.residual > 2.0 * s.tol {
        return Err(CliError::Certificate(format!(
            "fixed-point residual {} exceeds 2 tol",
            res.residual
        )));
    }
    Ok(())
}

fn equilibrium(
    config: &RunConfig,
    model: &Model,
    seed: Option<u64>,
    out: &OutputDir,
) -> Result<(), CliError> {
    let s = config
        .equilibrium
        .clone()
        .unwrap_or(crate::config::EquilibriumSection {
            tol: 1e-10,
            discount: 0.0,
            replicas: 0,
            derivative_step: None,
        });
    equilibrium::self_test(model).map_err(eq_err)?;
    let mut report = equilibrium::find_m_star(model, s.tol).map_err(eq_err)?;
    let malthusian = equilibrium::malthusian_rate(model, s.discount);
    report.malthusian_r = malthusian.as_ref().ok().copied();
    let malthusian_note = match malthusian {
        Err(EquilibriumError::NoGrowth { .. }) | Ok(_) => malthusian.err().map(|e| e.to_string()),
        Err(e) => return Err(eq_err(e)),
    };
    let montecarlo = if s.replicas > 0 {
        let seed =
            seed.ok_or_else(|| CliError::Config("equilibrium.replicas > 0 needs --seed".into()))?;
        Some(equilibrium::r0_montecarlo(model, s.replicas, seed).map_err(eq_err)?)
    } else {
        None
    };
    let derivative = s
        .derivative_step
        .map(|h| equilibrium::r0_derivative_check(model, h))
        .transpose()
        .map_err(eq_err)?;

    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        report: &'a equilibrium::EquilibriumReport,
        discount: f64,
        tail_mass: f64,
        malthusian_note: Option<String>,
        r0_psi: f64,
        r0_montecarlo: Option<crate::stats::Estimate>,
        derivative: Option<equilibrium::DerivativeCheck>,
        fixed_point_residual: f64,
    }
    let residual =
        (equilibrium::mu_bar_inf(model, report.m_star).map_err(eq_err)? - report.m_star).abs();
    out.json(
        "report.json",
        &Report {
            report: &report,
            discount: s.discount,
            tail_mass: model.sizes().tail_mass(),
            malthusian_note,
            r0_psi: equilibrium::r0_psi(model),
            r0_montecarlo: montecarlo,
            derivative,
            fixed_point_residual: residual,
        },
    )?;
    out.csv("mu_star.csv", |w| {
        writeln!(w, "n,k,weight")?;
        for (n, k, p) in report.mu_star.iter() {
            writeln!(w, "{n},{k},{p}")?;
        }
        Ok(())
    })?;
    Ok(())
}

fn chaos(config: &RunConfig, model: &Model, seed: u64, out: &OutputDir) -> Result<(), CliError> {
    let s = section(&config.chaos, "chaos")?;
    let mu0 = initial_law(config, model)?;
    let cfg = ChaosConfig {
        populations: s.households.clone(),
        replicas: s.replicas,
        horizon: s.horizon,
        probe_dt: s.probe_dt,
        fp_dt: s.fp_dt,
        seed,
    };
    let (report, limit) = run_chaos(model, &mu0, &cfg).map_err(chaos_err)?;
    out.csv("chaos.csv", |w| report.write_csv(w))?;
    out.csv("limit_means.csv", |w| limit.write_means_csv(w))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        #[serde(flatten)]
        report: &'a crate::chaos::ChaosReport,
        slope_range: (f64, f64),
        slope_in_range: bool,
    }
    let (lo, hi) = CHAOS_SLOPE_RANGE;
    out.json(
        "chaos.json",
        &Summary {
            report: &report,
            slope_range: CHAOS_SLOPE_RANGE,
            slope_in_range: report.slope >= lo && report.slope <= hi,
        },
    )?;
    Ok(())
}

fn branching(
    config: &RunConfig,
    model: &Model,
    seed: u64,
    out: &OutputDir,
) -> Result<(), CliError> {
    let s = section(&config.branching, "branching")?;
    equilibrium::self_test(model).map_err(eq_err)?;
    let cfg = BranchingConfig {
        discount: s.discount,
        init_count: s.init_count,
        horizon: s.horizon,
        sample_dt: s.sample_dt,
        max_active: None,
        record_households: false,
    };
    let window = s.window.unwrap_or((s.horizon / 2.0, s.horizon));
    let fit = fit_growth(model, &cfg, s.replicas.max(1), seed, window).map_err(sim_err)?;
    out.csv("branching.csv", |w| {
        writeln!(w, "t,mean_active,mean_infected")?;
        for j in 0..fit.times.len() {
            writeln!(
                w,
                "{},{},{}",
                fit.times[j], fit.mean_active[j], fit.mean_infected[j]
            )?;
        }
        Ok(())
    })?;
    let r = equilibrium::malthusian_rate(model, s.discount).ok();
    #[derive(Serialize)]
    struct Summary {
        fitted_rate: f64,
        window: (f64, f64),
        malthusian_r: Option<f64>,
        difference: Option<f64>,
        extinct_fraction: f64,
        replicas: usize,
    }
    out.json(
        "summary.json",
        &Summary {
            fitted_rate: fit.slope,
            window,
            malthusian_r: r,
            difference: r.map(|r| fit.slope - r),
            extinct_fraction: fit.extinct_fraction,
            replicas: s.replicas.max(1),
        },
    )?;
    Ok(())
}
