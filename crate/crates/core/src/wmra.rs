//! Per-slot controllers and the simulation loop.
//!
//! [`wmra_step`] is the queue-based allocator: it picks auxiliary targets,
//! solves the regulation subproblem for the direction requested and advances
//! the `J`, `H` and `K` queues. [`greedy_step`] maximizes the one-slot welfare
//! under hard per-slot energy and degradation limits and keeps no memory.
//!
//! Within a slot, [`run_controller`] applies: availability transition, return
//! energy draws, signal draw, allocation (including queue updates), energy
//! update, metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WmraError};
use crate::metrics::{MetricsSeries, RunSummary};
use crate::model::{
    apply_energy_update, effective_bounds, effective_charge, external_cost, Allocation, EVParams, EVState,
    SlotSignal, UtilityModel, FEASIBILITY_TOL,
};
use crate::queues::{update_h, update_j, update_k, DerivedConstants};
use crate::solvers::{
    build_regdown_problem, build_regup_problem, solve_aux, solve_coupled, CoupledItem, CoupledProblem, ItemCost,
};
use crate::stochastic::{ScenarioConfig, ScenarioGenerator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Wmra,
    Greedy,
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControllerKind::Wmra => f.write_str("wmra"),
            ControllerKind::Greedy => f.write_str("greedy"),
        }
    }
}

/// Refreshes availability flags and reports which EVs returned this slot.
fn sync_availability(states: &mut [EVState], signal: &SlotSignal) -> Vec<bool> {
    states
        .iter_mut()
        .zip(&signal.avail)
        .map(|(st, &present)| {
            let returned = present && !st.available;
            st.available = present;
            st.k_locked = !present;
            returned
        })
        .collect()
}

/// One slot of the queue-based allocator. Energies are left to the caller.
pub fn wmra_step(
    fleet: &[EVParams],
    states: &mut [EVState],
    signal: &SlotSignal,
    consts: &DerivedConstants,
    utility: &UtilityModel,
    slot: u64,
) -> Result<Allocation> {
    let n = fleet.len();
    let returned = sync_availability(states, signal);
    for (i, st) in states.iter_mut().enumerate() {
        if returned[i] {
            st.k = update_k(st, consts.shifts[i], 0.0, true);
        }
    }

    let mut alloc = Allocation::zeros(n);
    for (i, ev) in fleet.iter().enumerate() {
        alloc.z[i] = solve_aux(states[i].h, ev.weight, consts.v, utility, ev.x_max);
    }

    let ind = signal.indicators();
    if ind.down {
        let sol = solve_coupled(&build_regdown_problem(fleet, states, signal, consts)?)?;
        alloc.x_d = sol.x;
    } else if ind.up {
        let sol = solve_coupled(&build_regup_problem(fleet, states, signal, consts)?)?;
        alloc.x_u = sol.x;
    }
    finish_allocation(&mut alloc, signal)?;
    alloc.check_feasible(
        signal,
        |i| if signal.avail[i] { (fleet[i].x_max, fleet[i].x_max) } else { (0.0, 0.0) },
        slot,
    )?;

    for (i, ev) in fleet.iter().enumerate() {
        let st = &mut states[i];
        st.j = update_j(st.j, ev, alloc.x_d[i], alloc.x_u[i], ind);
        st.h = update_h(st.h, alloc.z[i], alloc.amount(i));
        st.k = update_k(st, consts.shifts[i], alloc.b[i], false);
    }
    Ok(alloc)
}

/// Per-EV box for the one-slot problem: energy headroom in the requested
/// direction, capped so one slot never exceeds `c_up` of degradation.
fn greedy_box(ev: &EVParams, st: &EVState, present: bool, down: bool) -> Result<f64> {
    if !present {
        return Ok(0.0);
    }
    let (h_d, h_u) = effective_bounds(ev, st.energy)?;
    let headroom = if down { h_d } else { h_u };
    Ok(headroom.min(ev.degradation.inverse(ev.c_up)).min(ev.x_max))
}

/// One slot of the memoryless baseline: maximize `sum_i w_i U(x_i) - e_t`.
pub fn greedy_step(
    fleet: &[EVParams],
    states: &mut [EVState],
    signal: &SlotSignal,
    utility: &UtilityModel,
    slot: u64,
) -> Result<Allocation> {
    let n = fleet.len();
    sync_availability(states, signal);
    let mut alloc = Allocation::zeros(n);
    let ind = signal.indicators();
    if ind.down || ind.up {
        let price = if ind.down { signal.e_s } else { signal.e_d };
        let items = fleet
            .iter()
            .zip(states.iter())
            .zip(&signal.avail)
            .map(|((ev, st), &present)| {
                Ok(CoupledItem {
                    a: -price,
                    scale: ev.weight,
                    ub: greedy_box(ev, st, present, ind.down)?,
                    cost: ItemCost::NegUtility(*utility),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sol = solve_coupled(&CoupledProblem { items, budget: signal.g.abs() })?;
        if ind.down {
            alloc.x_d = sol.x;
        } else {
            alloc.x_u = sol.x;
        }
    }
    finish_allocation(&mut alloc, signal)?;
    let mut bounds = Vec::with_capacity(n);
    for (i, ev) in fleet.iter().enumerate() {
        let d = greedy_box(ev, &states[i], signal.avail[i], true)?;
        let u = greedy_box(ev, &states[i], signal.avail[i], false)?;
        bounds.push((d, u));
    }
    alloc.check_feasible(signal, |i| bounds[i], slot)?;
    Ok(alloc)
}

fn finish_allocation(alloc: &mut Allocation, signal: &SlotSignal) -> Result<()> {
    let ind = signal.indicators();
    for i in 0..alloc.b.len() {
        alloc.b[i] = effective_charge(alloc.x_d[i], alloc.x_u[i], ind);
    }
    alloc.external_cost = external_cost(signal, alloc.total_down(), alloc.total_up())?;
    Ok(())
}

/// What to do when an invariant breaks during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ViolationPolicy {
    /// Fail unless the allocator runs with `V > V_max`, where excursions are expected.
    #[default]
    Auto,
    Fail,
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub sample_stride: u64,
    pub tracked_ev: Option<usize>,
    pub violations: ViolationPolicy,
    /// Keep every slot's signal in the output.
    pub record_signals: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { sample_stride: 100, tracked_ev: None, violations: ViolationPolicy::Auto, record_signals: false }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub kind: ControllerKind,
    pub series: MetricsSeries,
    pub summary: RunSummary,
    pub final_states: Vec<EVState>,
    pub signals: Vec<SlotSignal>,
    /// Return draws that exhausted their retries and were clamped.
    pub clamped_returns: u64,
}

/// Simulates `slots` slots under one controller. Deterministic given the
/// scenario seed; the exogenous trace does not depend on the controller.
pub fn run_controller(
    kind: ControllerKind,
    scenario: &ScenarioConfig,
    fleet: &[EVParams],
    consts: &DerivedConstants,
    utility: &UtilityModel,
    slots: u64,
    opts: &RunOptions,
) -> Result<RunOutput> {
    if slots == 0 {
        return Err(WmraError::Config("horizon must be at least one slot".into()));
    }
    if consts.shifts.len() != fleet.len() {
        return Err(WmraError::Config("constants were derived for a different fleet".into()));
    }
    if let Some(t) = opts.tracked_ev {
        if t >= fleet.len() {
            return Err(WmraError::Config(format!("tracked EV {t} is not in the fleet")));
        }
    }
    let strict = match opts.violations {
        ViolationPolicy::Fail => true,
        ViolationPolicy::Count => false,
        ViolationPolicy::Auto => kind == ControllerKind::Greedy || consts.warning.is_none(),
    };

    let n = fleet.len();
    let mut gen = ScenarioGenerator::new(scenario.clone(), n)?;
    let mut states: Vec<EVState> = gen
        .initial_energies(fleet)
        .into_iter()
        .zip(&consts.shifts)
        .map(|(s, &c)| EVState::initial(s, c))
        .collect();
    let mut avail = vec![true; n];
    let mut series = MetricsSeries::new(fleet, *utility, opts.sample_stride, opts.tracked_ev);
    let mut signals = Vec::new();
    let wmra_consts = (kind == ControllerKind::Wmra).then_some(consts);

    for t in 0..slots {
        if t > 0 {
            let next = gen.advance_availability(&avail);
            for (i, ev) in fleet.iter().enumerate() {
                if next[i] && !avail[i] {
                    states[i].energy = gen.return_energy(ev, states[i].energy).energy;
                }
            }
            avail = next;
        }
        let (g, e_s, e_d) = gen.draw_signal();
        let signal = SlotSignal { g, e_s, e_d, avail: avail.clone() };

        let alloc = match kind {
            ControllerKind::Wmra => wmra_step(fleet, &mut states, &signal, consts, utility, t)?,
            ControllerKind::Greedy => greedy_step(fleet, &mut states, &signal, utility, t)?,
        };
        let ind = signal.indicators();
        for (i, ev) in fleet.iter().enumerate() {
            let step = apply_energy_update(ev, &states[i], avail[i], alloc.x_d[i], alloc.x_u[i], ind)
                .map_err(|e| WmraError::Invariant { slot: t, id: i, what: e.to_string() })?;
            states[i].energy = step.energy;
        }

        let out = series.record_slot(fleet, &signal, &alloc, &states, wmra_consts);
        if strict {
            if let Some(&i) = out.first() {
                let ev = &fleet[i];
                return Err(WmraError::Invariant {
                    slot: t,
                    id: i,
                    what: format!("energy {} outside [{}, {}]", states[i].energy, ev.s_min, ev.s_max),
                });
            }
            if let Some(c) = wmra_consts {
                check_queue_invariants(fleet, &states, &avail, c, t)?;
            }
        }
        if opts.record_signals {
            signals.push(signal);
        }
    }

    let summary = series.summary(&states);
    Ok(RunOutput {
        kind,
        series,
        summary,
        final_states: states,
        signals,
        clamped_returns: gen.clamped_returns(),
    })
}

/// Shift identity and `K`/`H` bounds after a slot.
fn check_queue_invariants(
    fleet: &[EVParams],
    states: &[EVState],
    avail: &[bool],
    consts: &DerivedConstants,
    slot: u64,
) -> Result<()> {
    for (i, ev) in fleet.iter().enumerate() {
        let st = &states[i];
        let fail = |what: String| Err(WmraError::Invariant { slot, id: i, what });
        if st.h > consts.h_bound(ev) + FEASIBILITY_TOL {
            return fail(format!("H = {} above its bound {}", st.h, consts.h_bound(ev)));
        }
        if st.j < 0.0 {
            return fail(format!("J = {} is negative", st.j));
        }
        if avail[i] {
            let residual = (st.k - (st.energy - consts.shifts[i])).abs();
            if residual > FEASIBILITY_TOL {
                return fail(format!("K drifted from the shifted energy by {residual}"));
            }
            let (lo, hi) = consts.k_bounds(ev);
            if st.k < lo - FEASIBILITY_TOL || st.k > hi + FEASIBILITY_TOL {
                return fail(format!("K = {} outside [{lo}, {hi}]", st.k));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FleetSpec;
    use crate::queues::derive_constants_scaled;
    use crate::solvers::oracle_grid;
    use approx::assert_relative_eq;

    fn setup(mult: f64) -> (Vec<EVParams>, DerivedConstants, ScenarioConfig) {
        let fleet = FleetSpec::default().build(0.05).unwrap();
        let consts = derive_constants_scaled(&fleet, &UtilityModel::Log, 0.12, mult).unwrap();
        let mut scenario = ScenarioConfig::for_fleet(&fleet);
        scenario.seed = 5;
        (fleet, consts, scenario)
    }

    fn fresh_states(fleet: &[EVParams], consts: &DerivedConstants) -> Vec<EVState> {
        fleet.iter().map(|ev| EVState::initial(ev.midpoint(), consts.shifts[ev.id])).collect()
    }

    #[test]
    fn all_away_buys_everything() {
        let (fleet, consts, _) = setup(1.0);
        let mut states = fresh_states(&fleet, &consts);
        let signal = SlotSignal { g: 1.0, e_s: 0.1, e_d: 0.1, avail: vec![false; fleet.len()] };
        let alloc = wmra_step(&fleet, &mut states, &signal, &consts, &UtilityModel::Log, 0).unwrap();
        assert!(alloc.x_d.iter().all(|&x| x == 0.0));
        assert_relative_eq!(alloc.external_cost, 0.1);
        assert!(states.iter().all(|s| s.k_locked && !s.available));
    }

    #[test]
    fn idle_slot_still_moves_h() {
        let (fleet, consts, _) = setup(1.0);
        let mut states = fresh_states(&fleet, &consts);
        let signal = SlotSignal { g: 0.0, e_s: 0.1, e_d: 0.1, avail: vec![true; fleet.len()] };
        let alloc = wmra_step(&fleet, &mut states, &signal, &consts, &UtilityModel::Log, 0).unwrap();
        assert_eq!(alloc.external_cost, 0.0);
        for (i, ev) in fleet.iter().enumerate() {
            assert_eq!(alloc.amount(i), 0.0);
            // H = 0 so the auxiliary target sits at its box maximum
            assert_eq!(alloc.z[i], ev.x_max);
            assert_eq!(states[i].h, alloc.z[i]);
        }
    }

    #[test]
    fn single_ev_fresh_queues_bang_bang() {
        let (fleet, consts, _) = setup(1.0);
        let fleet = vec![fleet[0].clone()];
        let consts = DerivedConstants { shifts: vec![consts.shifts[0]], ..consts };
        let mut states = fresh_states(&fleet, &consts);
        states[0].energy = fleet[0].s_min + 1.0;
        states[0].k = states[0].energy - consts.shifts[0];
        let g = 0.005;
        let signal = SlotSignal { g, e_s: 0.11, e_d: 0.11, avail: vec![true] };
        let before = states.clone();
        let p = build_regdown_problem(&fleet, &before, &signal, &consts).unwrap();
        assert!(p.items[0].a < 0.0 && p.items[0].scale == 0.0);
        let alloc = wmra_step(&fleet, &mut states, &signal, &consts, &UtilityModel::Log, 0).unwrap();
        assert_relative_eq!(alloc.x_d[0], g.min(fleet[0].x_max), epsilon = 1e-12);
        let oracle = oracle_grid(&p, 1e-5).unwrap();
        assert!((oracle[0] - alloc.x_d[0]).abs() <= 1e-5);
        // queues moved: K by b, H by z - x, J by C(x) - c_up
        assert_relative_eq!(states[0].k, before[0].k + g, epsilon = 1e-12);
        assert_relative_eq!(states[0].h, fleet[0].x_max - g, epsilon = 1e-15);
    }

    #[test]
    fn returning_ev_is_reanchored() {
        let (fleet, consts, _) = setup(1.0);
        let mut states = fresh_states(&fleet, &consts);
        let n = fleet.len();
        let mut avail = vec![true; n];
        avail[3] = false;
        let idle = |avail: &Vec<bool>| SlotSignal { g: 0.0, e_s: 0.1, e_d: 0.1, avail: avail.clone() };
        wmra_step(&fleet, &mut states, &idle(&avail), &consts, &UtilityModel::Log, 0).unwrap();
        let frozen = states[3].k;
        wmra_step(&fleet, &mut states, &idle(&avail), &consts, &UtilityModel::Log, 1).unwrap();
        assert_eq!(states[3].k, frozen);
        states[3].energy = fleet[3].s_min;
        avail[3] = true;
        wmra_step(&fleet, &mut states, &idle(&avail), &consts, &UtilityModel::Log, 2).unwrap();
        assert_relative_eq!(states[3].k, fleet[3].s_min - consts.shifts[3]);
    }

    #[test]
    fn greedy_cap_is_half_x_max() {
        let (fleet, _, _) = setup(1.0);
        let ev = &fleet[0];
        let st = EVState::initial(ev.midpoint(), 0.0);
        assert_relative_eq!(greedy_box(ev, &st, true, true).unwrap(), ev.x_max / 2.0, max_relative = 1e-12);
        let at_top = EVState::initial(ev.s_max - 0.001, 0.0);
        assert_relative_eq!(greedy_box(ev, &at_top, true, true).unwrap(), 0.001, epsilon = 1e-12);
    }

    #[test]
    fn greedy_splits_symmetrically() {
        let mut fleet = FleetSpec::default().build(0.05).unwrap();
        fleet.truncate(2);
        let mut states = fresh_states(&fleet, &DerivedConstants {
            mu: 1.0,
            v: 1.0,
            v_max: 1.0,
            e_max: 0.12,
            shifts: vec![0.0; 2],
            b: 0.0,
            warning: None,
        });
        let signal = SlotSignal { g: -0.001, e_s: 0.1, e_d: 0.1, avail: vec![true, true] };
        let alloc = greedy_step(&fleet, &mut states, &signal, &UtilityModel::Log, 0).unwrap();
        assert_relative_eq!(alloc.x_u[0], 0.0005, epsilon = 1e-10);
        assert_relative_eq!(alloc.x_u[1], 0.0005, epsilon = 1e-10);
        assert!(alloc.external_cost <= 1e-10);
    }

    #[test]
    fn run_is_deterministic() {
        let (fleet, consts, scenario) = setup(1.0);
        let opts = RunOptions { sample_stride: 1, ..RunOptions::default() };
        let a = run_controller(ControllerKind::Wmra, &scenario, &fleet, &consts, &UtilityModel::Log, 1, &opts).unwrap();
        let b = run_controller(ControllerKind::Wmra, &scenario, &fleet, &consts, &UtilityModel::Log, 1, &opts).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.series.records().len(), 1);
    }

    #[test]
    fn controllers_see_the_same_scenario() {
        let (fleet, consts, scenario) = setup(1.0);
        let opts = RunOptions { record_signals: true, ..RunOptions::default() };
        let w = run_controller(ControllerKind::Wmra, &scenario, &fleet, &consts, &UtilityModel::Log, 300, &opts).unwrap();
        let g = run_controller(ControllerKind::Greedy, &scenario, &fleet, &consts, &UtilityModel::Log, 300, &opts).unwrap();
        assert_eq!(w.signals, g.signals);
    }

    #[test]
    fn short_wmra_run_keeps_invariants() {
        let (fleet, consts, scenario) = setup(1.0);
        let out = run_controller(
            ControllerKind::Wmra,
            &scenario,
            &fleet,
            &consts,
            &UtilityModel::Log,
            2000,
            &RunOptions { violations: ViolationPolicy::Fail, ..RunOptions::default() },
        )
        .unwrap();
        assert_eq!(out.summary.violations, 0);
        assert!(out.summary.max_shift_residual <= 1e-9);
        assert!(out.summary.max_k_excess <= 1e-9);
        assert!(out.summary.max_h_excess <= 1e-9);
    }

    #[test]
    fn rejects_empty_horizon() {
        let (fleet, consts, scenario) = setup(1.0);
        assert!(run_controller(
            ControllerKind::Greedy,
            &scenario,
            &fleet,
            &consts,
            &UtilityModel::Log,
            0,
            &RunOptions::default()
        )
        .is_err());
    }
}
