//! Named experiments. Each one expands into independent simulation jobs, runs
//! them on the current rayon pool and writes CSV tables in job order, so the
//! output does not depend on the thread count.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use wmra_core::queues::DerivedConstants;
use wmra_core::{
    derive_constants_scaled, run_controller, theory_gap_report, ControllerKind, EVParams, RunOptions, RunOutput,
    ScenarioConfig,
};

use crate::config::Config;
use crate::output::{fmt_f64, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    /// WMRA at the configured V against greedy, welfare over time.
    Fig2,
    /// Welfare against the upper end of the preferred range.
    Fig3,
    /// Welfare against V.
    Fig4,
    /// Energy path of one EV for several V.
    Fig5,
    /// Both controllers at the configured V for every seed.
    Custom,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig2 => "fig2",
            Experiment::Fig3 => "fig3",
            Experiment::Fig4 => "fig4",
            Experiment::Fig5 => "fig5",
            Experiment::Custom => "custom",
        }
    }
}

/// Command-line overrides layered on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub slots: Option<u64>,
    pub v_mult: Option<f64>,
    pub full_resolution: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut Config) {
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(t) = self.slots {
            cfg.run.slots = t;
            cfg.fig4.slots = t;
            cfg.fig5.slots = t;
        }
        if let Some(m) = self.v_mult {
            cfg.controller.v_mult = m;
        }
        if self.full_resolution {
            cfg.run.stride = 1;
        }
    }
}

/// Files written plus lines worth showing the user.
#[derive(Debug, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
struct Job {
    kind: ControllerKind,
    fleet: Vec<EVParams>,
    scenario: ScenarioConfig,
    consts: DerivedConstants,
    slots: u64,
    opts: RunOptions,
}

fn run_jobs(cfg: &Config, jobs: &[Job]) -> anyhow::Result<Vec<RunOutput>> {
    jobs.par_iter()
        .map(|j| {
            run_controller(j.kind, &j.scenario, &j.fleet, &j.consts, &cfg.utility, j.slots, &j.opts).with_context(|| {
                format!("{} run failed (seed {}, V = {})", j.kind, j.scenario.seed, j.consts.v)
            })
        })
        .collect()
}

fn constants(cfg: &Config, fleet: &[EVParams], v_mult: f64) -> anyhow::Result<DerivedConstants> {
    Ok(derive_constants_scaled(fleet, &cfg.utility, cfg.scenario.price_hi, v_mult)?)
}

fn opts(cfg: &Config) -> RunOptions {
    RunOptions { sample_stride: cfg.run.stride, violations: cfg.run.violations, ..RunOptions::default() }
}

pub fn run_experiment(exp: Experiment, cfg: &Config, out: &Path) -> anyhow::Result<Report> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut report = Report::default();
    match exp {
        Experiment::Fig2 => fig2(cfg, out, &mut report)?,
        Experiment::Fig3 => fig3(cfg, out, &mut report)?,
        Experiment::Fig4 => fig4(cfg, out, &mut report)?,
        Experiment::Fig5 => fig5(cfg, out, &mut report)?,
        Experiment::Custom => custom(cfg, out, &mut report)?,
    }
    Ok(report)
}

const SERIES_HEADER: [&str; 9] = [
    "controller",
    "v_mult",
    "seed",
    "slot",
    "welfare",
    "external_cost_usd_per_slot",
    "served_kwh_per_slot",
    "violations",
    "max_h",
];

fn series_rows(table: &mut Table, job: &Job, run: &RunOutput) {
    let v_mult = match job.kind {
        ControllerKind::Wmra => fmt_f64(job.consts.v_multiplier()),
        ControllerKind::Greedy => String::new(),
    };
    for r in run.series.records() {
        let max_h = if job.kind == ControllerKind::Wmra { fmt_f64(r.max_h) } else { String::new() };
        table.row(vec![
            job.kind.to_string(),
            v_mult.clone(),
            job.scenario.seed.to_string(),
            r.slot.to_string(),
            fmt_f64(r.welfare_avg),
            fmt_f64(r.external_cost_avg),
            fmt_f64(r.served_avg),
            r.violations.to_string(),
            max_h,
        ]);
    }
}

fn pair_jobs(cfg: &Config, fleet: &[EVParams], seed: u64, slots: u64) -> anyhow::Result<Vec<Job>> {
    let consts = constants(cfg, fleet, cfg.controller.v_mult)?;
    let scenario = cfg.scenario_for(fleet, seed);
    Ok([ControllerKind::Wmra, ControllerKind::Greedy]
        .into_iter()
        .map(|kind| Job {
            kind,
            fleet: fleet.to_vec(),
            scenario: scenario.clone(),
            consts: consts.clone(),
            slots,
            opts: opts(cfg),
        })
        .collect())
}

fn fig2(cfg: &Config, out: &Path, report: &mut Report) -> anyhow::Result<()> {
    let fleet = cfg.fleet()?;
    let jobs = pair_jobs(cfg, &fleet, cfg.run.seed, cfg.run.slots)?;
    let runs = run_jobs(cfg, &jobs)?;
    let mut table = Table::new(&SERIES_HEADER);
    for (job, run) in jobs.iter().zip(&runs) {
        series_rows(&mut table, job, run);
        report.notes.push(format!("{}: final welfare {}", job.kind, fmt_f64(run.summary.welfare)));
    }
    report.files.push(table.write(&out.join("fig2.csv"))?);
    Ok(())
}

/// Mean, min and max of a non-empty slice.
fn stats(values: &[f64]) -> (f64, f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

fn fig3(cfg: &Config, out: &Path, report: &mut Report) -> anyhow::Result<()> {
    let seeds: Vec<u64> = cfg.seeds().collect();
    let mut points = Vec::new();
    let mut jobs = Vec::new();
    for &p in &cfg.fig3.p_returns {
        for &frac in &cfg.fig3.s_max_fracs {
            let mut spec = cfg.fleet.spec();
            spec.s_max_frac = frac;
            let fleet = cfg.build_fleet(&spec)?;
            let mut sub = cfg.clone();
            sub.scenario.p_return = p;
            if cfg.scenario.p_leave.is_none() {
                sub.scenario.p_leave = Some(1.0 - p);
            }
            for kind in [ControllerKind::Wmra, ControllerKind::Greedy] {
                points.push((p, frac, kind));
                for &seed in &seeds {
                    let mut pair = pair_jobs(&sub, &fleet, seed, cfg.run.slots)?;
                    let job = pair.swap_remove(if kind == ControllerKind::Wmra { 0 } else { 1 });
                    jobs.push(job);
                }
            }
        }
    }
    let runs = run_jobs(cfg, &jobs)?;

    let mut per_run = Table::new(&[
        "p_return",
        "s_max_frac",
        "controller",
        "seed",
        "v_max",
        "welfare",
        "external_cost_usd_per_slot",
        "violations",
    ]);
    for (job, run) in jobs.iter().zip(&runs) {
        per_run.row(vec![
            fmt_f64(job.scenario.p_return),
            fmt_f64(job.fleet[0].s_max / job.fleet[0].s_cap),
            job.kind.to_string(),
            job.scenario.seed.to_string(),
            fmt_f64(job.consts.v_max),
            fmt_f64(run.summary.welfare),
            fmt_f64(run.summary.external_cost_avg),
            run.summary.violations.to_string(),
        ]);
    }

    let mut means = Table::new(&[
        "p_return",
        "s_max_frac",
        "controller",
        "seeds",
        "v_max",
        "welfare_mean",
        "welfare_min",
        "welfare_max",
    ]);
    for (k, (p, frac, kind)) in points.iter().enumerate() {
        let chunk = &runs[k * seeds.len()..(k + 1) * seeds.len()];
        let w: Vec<f64> = chunk.iter().map(|r| r.summary.welfare).collect();
        let (mean, min, max) = stats(&w);
        means.row(vec![
            fmt_f64(*p),
            fmt_f64(*frac),
            kind.to_string(),
            seeds.len().to_string(),
            fmt_f64(jobs[k * seeds.len()].consts.v_max),
            fmt_f64(mean),
            fmt_f64(min),
            fmt_f64(max),
        ]);
    }
    report.files.push(means.write(&out.join("fig3.csv"))?);
    report.files.push(per_run.write(&out.join("fig3_runs.csv"))?);
    Ok(())
}

fn fig4(cfg: &Config, out: &Path, report: &mut Report) -> anyhow::Result<()> {
    let fleet = cfg.fleet()?;
    let seeds: Vec<u64> = cfg.seeds().collect();
    let mut points: Vec<(ControllerKind, f64)> = cfg.fig4.v_mults.iter().map(|&m| (ControllerKind::Wmra, m)).collect();
    points.push((ControllerKind::Greedy, 1.0));
    let mut jobs = Vec::new();
    for &(kind, m) in &points {
        let consts = constants(cfg, &fleet, m)?;
        for &seed in &seeds {
            jobs.push(Job {
                kind,
                fleet: fleet.clone(),
                scenario: cfg.scenario_for(&fleet, seed),
                consts: consts.clone(),
                slots: cfg.fig4.slots,
                opts: opts(cfg),
            });
        }
    }
    let runs = run_jobs(cfg, &jobs)?;

    let mut per_run = Table::new(&["controller", "v_mult", "v", "seed", "welfare", "violations"]);
    for (job, run) in jobs.iter().zip(&runs) {
        let wmra = job.kind == ControllerKind::Wmra;
        per_run.row(vec![
            job.kind.to_string(),
            if wmra { fmt_f64(job.consts.v_multiplier()) } else { String::new() },
            if wmra { fmt_f64(job.consts.v) } else { String::new() },
            job.scenario.seed.to_string(),
            fmt_f64(run.summary.welfare),
            run.summary.violations.to_string(),
        ]);
    }

    let mut means = Table::new(&[
        "controller",
        "v_mult",
        "v",
        "seeds",
        "welfare_mean",
        "welfare_min",
        "welfare_max",
        "drift_b",
        "gap_bound",
    ]);
    for (k, &(kind, _)) in points.iter().enumerate() {
        let chunk = &runs[k * seeds.len()..(k + 1) * seeds.len()];
        let w: Vec<f64> = chunk.iter().map(|r| r.summary.welfare).collect();
        let (mean, min, max) = stats(&w);
        let consts = &jobs[k * seeds.len()].consts;
        let (b, gap) = theory_gap_report(consts);
        let wmra = kind == ControllerKind::Wmra;
        means.row(vec![
            kind.to_string(),
            if wmra { fmt_f64(consts.v_multiplier()) } else { String::new() },
            if wmra { fmt_f64(consts.v) } else { String::new() },
            seeds.len().to_string(),
            fmt_f64(mean),
            fmt_f64(min),
            fmt_f64(max),
            if wmra { fmt_f64(b) } else { String::new() },
            if wmra { fmt_f64(gap) } else { String::new() },
        ]);
    }
    report.files.push(means.write(&out.join("fig4.csv"))?);
    report.files.push(per_run.write(&out.join("fig4_runs.csv"))?);
    Ok(())
}

fn fig5(cfg: &Config, out: &Path, report: &mut Report) -> anyhow::Result<()> {
    let fleet = cfg.fleet()?;
    let ev = &fleet[cfg.fig5.ev];
    let mut jobs = Vec::new();
    for &m in &cfg.fig5.v_mults {
        jobs.push(Job {
            kind: ControllerKind::Wmra,
            fleet: fleet.clone(),
            scenario: cfg.scenario_for(&fleet, cfg.run.seed),
            consts: constants(cfg, &fleet, m)?,
            slots: cfg.fig5.slots,
            opts: RunOptions {
                sample_stride: cfg.run.stride.min(FIG5_STRIDE),
                tracked_ev: Some(cfg.fig5.ev),
                violations: cfg.run.violations,
                record_signals: false,
            },
        });
    }
    let runs = run_jobs(cfg, &jobs)?;

    let mut path = Table::new(&[
        "v_mult",
        "slot",
        "energy_kwh",
        "available",
        "s_min_kwh",
        "s_max_kwh",
        "outside_range",
    ]);
    let mut counts =
        Table::new(&["v_mult", "v", "seed", "slots", "violations_fleet", "violations_ev", "clamped_returns"]);
    for (job, run) in jobs.iter().zip(&runs) {
        let m = fmt_f64(job.consts.v_multiplier());
        for r in run.series.records() {
            let energy = r.tracked_energy.unwrap_or(f64::NAN);
            let present = r.tracked_available.unwrap_or(false);
            path.row(vec![
                m.clone(),
                r.slot.to_string(),
                fmt_f64(energy),
                u8::from(present).to_string(),
                fmt_f64(ev.s_min),
                fmt_f64(ev.s_max),
                u8::from(present && !ev.in_preferred_range(energy)).to_string(),
            ]);
        }
        counts.row(vec![
            m.clone(),
            fmt_f64(job.consts.v),
            job.scenario.seed.to_string(),
            job.slots.to_string(),
            run.summary.violations.to_string(),
            run.summary.violations_per_ev[cfg.fig5.ev].to_string(),
            run.clamped_returns.to_string(),
        ]);
        report.notes.push(format!(
            "V = {} V_max: {} preferred-range violations fleet-wide, {} for EV {}",
            m, run.summary.violations, run.summary.violations_per_ev[cfg.fig5.ev], cfg.fig5.ev
        ));
    }
    report.files.push(path.write(&out.join("fig5.csv"))?);
    report.files.push(counts.write(&out.join("fig5_violations.csv"))?);
    Ok(())
}

/// The energy path is sampled at least this often.
const FIG5_STRIDE: u64 = 10;

fn custom(cfg: &Config, out: &Path, report: &mut Report) -> anyhow::Result<()> {
    let fleet = cfg.fleet()?;
    let mut jobs = Vec::new();
    for seed in cfg.seeds() {
        jobs.extend(pair_jobs(cfg, &fleet, seed, cfg.run.slots)?);
    }
    let runs = run_jobs(cfg, &jobs)?;
    let mut series = Table::new(&SERIES_HEADER);
    let mut summary = Table::new(&[
        "controller",
        "v_mult",
        "v",
        "seed",
        "slots",
        "welfare",
        "external_cost_usd_per_slot",
        "violations",
        "max_degradation_over_c_up",
        "max_abs_mean_b_kwh",
        "max_j_rate",
        "clamped_returns",
    ]);
    for (job, run) in jobs.iter().zip(&runs) {
        series_rows(&mut series, job, run);
        let s = &run.summary;
        let deg = job.fleet.iter().map(|ev| s.degradation_avg[ev.id] / ev.c_up).fold(0.0, f64::max);
        let b = s.b_avg.iter().map(|b| b.abs()).fold(0.0, f64::max);
        let j = s.j_rate.iter().copied().fold(0.0, f64::max);
        let wmra = job.kind == ControllerKind::Wmra;
        summary.row(vec![
            job.kind.to_string(),
            if wmra { fmt_f64(job.consts.v_multiplier()) } else { String::new() },
            if wmra { fmt_f64(job.consts.v) } else { String::new() },
            job.scenario.seed.to_string(),
            job.slots.to_string(),
            fmt_f64(s.welfare),
            fmt_f64(s.external_cost_avg),
            s.violations.to_string(),
            fmt_f64(deg),
            fmt_f64(b),
            if wmra { fmt_f64(j) } else { String::new() },
            run.clamped_returns.to_string(),
        ]);
    }
    report.files.push(series.write(&out.join("custom_series.csv"))?);
    report.files.push(summary.write(&out.join("custom_summary.csv"))?);
    Ok(())
}
