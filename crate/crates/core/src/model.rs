//! Domain types and per-slot physics of the aggregator-EV system.
//!
//! Energies are in kWh, prices in dollars/kWh. A regulation amount `x` is the
//! energy an EV absorbs (regulation down) or delivers (regulation up) during
//! one slot, so the per-slot rate limit is `rate_kw * slot_seconds / 3600`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WmraError};

/// Slack used for box and feasibility assertions, in kWh.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Convex, non-decreasing battery degradation cost with `C(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationModel {
    /// `C(x) = coef * x^2`
    Quadratic { coef: f64 },
    /// `C(x) = coef * x^exponent` with `exponent >= 1`
    Power { coef: f64, exponent: f64 },
}

impl Default for DegradationModel {
    fn default() -> Self {
        DegradationModel::Quadratic { coef: 1.0 }
    }
}

impl DegradationModel {
    pub fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            DegradationModel::Quadratic { coef } if !(coef >= 0.0 && coef.is_finite()) => {
                Err(format!("quadratic coefficient must be finite and >= 0, got {coef}"))
            }
            DegradationModel::Power { coef, exponent }
                if !(coef >= 0.0 && coef.is_finite() && exponent >= 1.0 && exponent.is_finite()) =>
            {
                Err(format!("power model needs coef >= 0 and exponent >= 1, got ({coef}, {exponent})"))
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn cost(&self, x: f64) -> f64 {
        match *self {
            DegradationModel::Quadratic { coef } => coef * x * x,
            DegradationModel::Power { coef, exponent } => coef * x.max(0.0).powf(exponent),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            DegradationModel::Quadratic { coef } => 2.0 * coef * x,
            DegradationModel::Power { coef, exponent } => {
                if exponent == 1.0 {
                    coef
                } else {
                    coef * exponent * x.max(0.0).powf(exponent - 1.0)
                }
            }
        }
    }

    /// Largest `x >= 0` with `C(x) <= cap`. Infinite when the cost is identically zero.
    pub fn inverse(&self, cap: f64) -> f64 {
        let cap = cap.max(0.0);
        match *self {
            DegradationModel::Quadratic { coef } => {
                if coef == 0.0 {
                    f64::INFINITY
                } else {
                    (cap / coef).sqrt()
                }
            }
            DegradationModel::Power { coef, exponent } => {
                if coef == 0.0 {
                    f64::INFINITY
                } else {
                    (cap / coef).powf(1.0 / exponent)
                }
            }
        }
    }
}

/// Concave, non-decreasing utility of the regulation amount with `U(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilityModel {
    /// `U(x) = ln(1 + x)`
    Log,
    /// `U(x) = (1 - exp(-rate * x)) / rate`
    Exponential { rate: f64 },
}

impl Default for UtilityModel {
    fn default() -> Self {
        UtilityModel::Log
    }
}

impl UtilityModel {
    pub fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            UtilityModel::Exponential { rate } if !(rate > 0.0 && rate.is_finite()) => {
                Err(format!("exponential utility rate must be > 0, got {rate}"))
            }
            _ => Ok(()),
        }
    }

    /// Slope bound `mu` with `U(x) <= U(0) + mu * x`. Both shipped utilities
    /// have `U'(0) = 1` and are concave, so `mu = 1`.
    pub fn mu(&self) -> f64 {
        match *self {
            UtilityModel::Log | UtilityModel::Exponential { .. } => 1.0,
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            UtilityModel::Log => x.ln_1p(),
            UtilityModel::Exponential { rate } => -(-rate * x).exp_m1() / rate,
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            UtilityModel::Log => 1.0 / (1.0 + x),
            UtilityModel::Exponential { rate } => (-rate * x).exp(),
        }
    }
}

/// Static per-EV parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EVParams {
    pub id: usize,
    pub s_cap: f64,
    pub s_min: f64,
    pub s_max: f64,
    /// Per-slot regulation limit (kWh).
    pub x_max: f64,
    pub weight: f64,
    /// Bound on the time-averaged degradation cost.
    pub c_up: f64,
    /// Bound on the energy jump between leaving and returning.
    pub delta_max: f64,
    pub degradation: DegradationModel,
}

impl EVParams {
    /// `c_max = C(x_max)`.
    pub fn c_max(&self) -> f64 {
        self.degradation.cost(self.x_max)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(WmraError::InvalidParams { id: self.id, reason });
        if !(0.0 <= self.s_min && self.s_min < self.s_max && self.s_max <= self.s_cap) {
            return fail(format!(
                "need 0 <= s_min < s_max <= s_cap, got s_min={} s_max={} s_cap={}",
                self.s_min, self.s_max, self.s_cap
            ));
        }
        if !(self.x_max > 0.0 && self.x_max.is_finite()) {
            return fail(format!("x_max must be > 0, got {}", self.x_max));
        }
        if self.s_max - self.s_min - 4.0 * self.x_max <= 0.0 {
            return fail(format!(
                "preferred range {} kWh must exceed 4 * x_max = {} kWh",
                self.s_max - self.s_min,
                4.0 * self.x_max
            ));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return fail(format!("weight must be > 0, got {}", self.weight));
        }
        if let Err(reason) = self.degradation.validate() {
            return fail(reason);
        }
        let c_max = self.c_max();
        if !(0.0 <= self.c_up && self.c_up <= c_max * (1.0 + 1e-12)) {
            return fail(format!("c_up must lie in [0, c_max = {c_max}], got {}", self.c_up));
        }
        if !(self.delta_max >= 0.0) {
            return fail(format!("delta_max must be >= 0, got {}", self.delta_max));
        }
        Ok(())
    }

    pub fn in_preferred_range(&self, s: f64) -> bool {
        s >= self.s_min - FEASIBILITY_TOL && s <= self.s_max + FEASIBILITY_TOL
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.s_min + self.s_max)
    }
}

/// A vehicle model: battery capacity and charger rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvType {
    pub name: String,
    pub count: usize,
    pub capacity_kwh: f64,
    pub rate_kw: f64,
}

/// Recipe for building a fleet of [`EVParams`] from vehicle types.
///
/// The default reproduces the reference study: 100 EVs split evenly between a
/// 23 kWh / 6.6 kW type and a 40 kWh / 10 kW type, 5 s slots, preferred range
/// `[0.1, 0.9]` of capacity, unit weights, `C(x) = x^2` and `c_up = c_max / 4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSpec {
    pub types: Vec<EvType>,
    pub slot_seconds: f64,
    pub s_min_frac: f64,
    pub s_max_frac: f64,
    pub weight: f64,
    /// `c_up` as a fraction of `c_max`.
    pub c_up_frac: f64,
    pub degradation: DegradationModel,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            types: vec![
                EvType { name: "type_i".into(), count: 50, capacity_kwh: 23.0, rate_kw: 6.6 },
                EvType { name: "type_ii".into(), count: 50, capacity_kwh: 40.0, rate_kw: 10.0 },
            ],
            slot_seconds: 5.0,
            s_min_frac: 0.1,
            s_max_frac: 0.9,
            weight: 1.0,
            c_up_frac: 0.25,
            degradation: DegradationModel::default(),
        }
    }
}

impl FleetSpec {
    /// Per-slot energy limit for a charger rate.
    pub fn x_max_for(&self, rate_kw: f64) -> f64 {
        rate_kw * self.slot_seconds / 3600.0
    }

    /// Builds the fleet. Types are laid out in order, so EV 0 is the first
    /// vehicle of the first type. `return_jitter` is the fraction of capacity
    /// bounding the return-energy jump.
    pub fn build(&self, return_jitter: f64) -> Result<Vec<EVParams>> {
        if !(self.slot_seconds > 0.0) {
            return Err(WmraError::Config(format!("slot_seconds must be > 0, got {}", self.slot_seconds)));
        }
        if !(0.0..=1.0).contains(&self.c_up_frac) {
            return Err(WmraError::Config(format!("c_up_frac must lie in [0, 1], got {}", self.c_up_frac)));
        }
        let mut fleet = Vec::new();
        for ty in &self.types {
            for _ in 0..ty.count {
                let x_max = self.x_max_for(ty.rate_kw);
                let c_max = self.degradation.cost(x_max);
                let ev = EVParams {
                    id: fleet.len(),
                    s_cap: ty.capacity_kwh,
                    s_min: self.s_min_frac * ty.capacity_kwh,
                    s_max: self.s_max_frac * ty.capacity_kwh,
                    x_max,
                    weight: self.weight,
                    c_up: self.c_up_frac * c_max,
                    delta_max: return_jitter * ty.capacity_kwh,
                    degradation: self.degradation,
                };
                ev.validate()?;
                fleet.push(ev);
            }
        }
        if fleet.is_empty() {
            return Err(WmraError::Config("fleet is empty".into()));
        }
        Ok(fleet)
    }
}

/// Mutable per-EV simulation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EVState {
    pub energy: f64,
    /// Availability in the most recently processed slot.
    pub available: bool,
    /// Degradation queue, always `>= 0`.
    pub j: f64,
    /// Auxiliary-variable queue (signed).
    pub h: f64,
    /// Shifted-energy queue (signed).
    pub k: f64,
    /// Set while the EV is away; `k` is frozen.
    pub k_locked: bool,
}

impl EVState {
    /// State at slot 0: present, empty queues, `K = s_0 - c_i`.
    pub fn initial(energy: f64, shift: f64) -> Self {
        EVState { energy, available: true, j: 0.0, h: 0.0, k: energy - shift, k_locked: false }
    }
}

/// One realization of the exogenous system state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSignal {
    /// Regulation request (kWh): positive asks to absorb, negative to supply.
    pub g: f64,
    /// Unit cost of clearing an energy surplus.
    pub e_s: f64,
    /// Unit cost of clearing an energy deficit.
    pub e_d: f64,
    pub avail: Vec<bool>,
}

impl SlotSignal {
    pub fn indicators(&self) -> Indicators {
        slot_indicators(self.g)
    }
}

/// Regulation-down / regulation-up indicators of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Indicators {
    pub down: bool,
    pub up: bool,
}

/// Per-slot decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub x_d: Vec<f64>,
    pub x_u: Vec<f64>,
    /// Auxiliary targets; all zero for controllers that do not use them.
    pub z: Vec<f64>,
    /// Effective charge `1_d x_d - 1_u x_u`.
    pub b: Vec<f64>,
    pub external_cost: f64,
}

impl Allocation {
    pub fn zeros(n: usize) -> Self {
        Allocation {
            x_d: vec![0.0; n],
            x_u: vec![0.0; n],
            z: vec![0.0; n],
            b: vec![0.0; n],
            external_cost: 0.0,
        }
    }

    /// Regulation amount of EV `i`, whichever direction it served.
    #[inline]
    pub fn amount(&self, i: usize) -> f64 {
        self.x_d[i] + self.x_u[i]
    }

    pub fn total_down(&self) -> f64 {
        self.x_d.iter().sum()
    }

    pub fn total_up(&self) -> f64 {
        self.x_u.iter().sum()
    }

    /// Checks the per-slot constraints: one direction per EV, boxes, and the
    /// request budget. `bounds(i)` gives the per-EV (down, up) boxes.
    pub fn check_feasible(
        &self,
        signal: &SlotSignal,
        mut bounds: impl FnMut(usize) -> (f64, f64),
        slot: u64,
    ) -> Result<()> {
        let ind = signal.indicators();
        for i in 0..self.x_d.len() {
            let (xd, xu) = (self.x_d[i], self.x_u[i]);
            let fail = |what: String| Err(WmraError::Invariant { slot, id: i, what });
            if xd < 0.0 || xu < 0.0 {
                return fail(format!("negative regulation amount ({xd}, {xu})"));
            }
            if xd * xu != 0.0 {
                return fail(format!("both directions served ({xd}, {xu})"));
            }
            if !signal.avail[i] && (xd != 0.0 || xu != 0.0) {
                return fail("unavailable EV was allocated".into());
            }
            let (hd, hu) = bounds(i);
            if xd > hd + FEASIBILITY_TOL || xu > hu + FEASIBILITY_TOL {
                return fail(format!("amount ({xd}, {xu}) exceeds box ({hd}, {hu})"));
            }
            if (!ind.down && xd != 0.0) || (!ind.up && xu != 0.0) {
                return fail(format!("amount ({xd}, {xu}) served in the wrong direction"));
            }
        }
        let served_d = self.total_down();
        let served_u = self.total_up();
        if served_d > signal.g.max(0.0) + FEASIBILITY_TOL {
            return Err(WmraError::OverAllocation { served: served_d, requested: signal.g.max(0.0) });
        }
        if served_u > (-signal.g).max(0.0) + FEASIBILITY_TOL {
            return Err(WmraError::OverAllocation { served: served_u, requested: (-signal.g).max(0.0) });
        }
        Ok(())
    }
}

pub fn slot_indicators(g: f64) -> Indicators {
    Indicators { down: g > 0.0, up: g < 0.0 }
}

/// Energy-feasible regulation bounds `(h_d, h_u)` at state `s`.
pub fn effective_bounds(ev: &EVParams, s: f64) -> Result<(f64, f64)> {
    if !(s >= -FEASIBILITY_TOL && s <= ev.s_cap + FEASIBILITY_TOL) {
        return Err(WmraError::EnergyOutOfCapacity { id: ev.id, energy: s, s_cap: ev.s_cap });
    }
    let h_d = ev.x_max.min(ev.s_max - s).max(0.0);
    let h_u = ev.x_max.min(s - ev.s_min).max(0.0);
    Ok((h_d, h_u))
}

/// Result of moving one EV through a slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyStep {
    pub energy: f64,
    pub b: f64,
    /// The new state left the preferred range (only meaningful for available EVs).
    pub out_of_range: bool,
}

/// Energy update of one EV: `s' = s + 1_d x_d - 1_u x_u`. Away EVs keep their
/// energy and contribute `b = 0`.
pub fn apply_energy_update(
    ev: &EVParams,
    state: &EVState,
    available: bool,
    x_d: f64,
    x_u: f64,
    ind: Indicators,
) -> Result<EnergyStep> {
    if !available {
        return Ok(EnergyStep { energy: state.energy, b: 0.0, out_of_range: false });
    }
    let b = effective_charge(x_d, x_u, ind);
    let energy = state.energy + b;
    if !(energy >= -FEASIBILITY_TOL && energy <= ev.s_cap + FEASIBILITY_TOL) {
        return Err(WmraError::EnergyOutOfCapacity { id: ev.id, energy, s_cap: ev.s_cap });
    }
    Ok(EnergyStep { energy, b, out_of_range: !ev.in_preferred_range(energy) })
}

#[inline]
pub fn effective_charge(x_d: f64, x_u: f64, ind: Indicators) -> f64 {
    let mut b = 0.0;
    if ind.down {
        b += x_d;
    }
    if ind.up {
        b -= x_u;
    }
    b
}

/// External-source cost of clearing the unserved part of the request.
pub fn external_cost(signal: &SlotSignal, served_down: f64, served_up: f64) -> Result<f64> {
    let ind = signal.indicators();
    let mut cost = 0.0;
    if ind.down {
        let gap = signal.g - served_down;
        if gap < -FEASIBILITY_TOL {
            return Err(WmraError::OverAllocation { served: served_down, requested: signal.g });
        }
        cost += signal.e_s * gap.max(0.0);
    }
    if ind.up {
        let gap = signal.g.abs() - served_up;
        if gap < -FEASIBILITY_TOL {
            return Err(WmraError::OverAllocation { served: served_up, requested: signal.g.abs() });
        }
        cost += signal.e_d * gap.max(0.0);
    }
    Ok(cost)
}

/// `C_i(x)` on the box `[0, x_max]`.
pub fn degradation_cost(ev: &EVParams, x: f64) -> Result<f64> {
    if !(x >= -FEASIBILITY_TOL && x <= ev.x_max + FEASIBILITY_TOL) {
        return Err(WmraError::AmountOutOfBox { id: ev.id, x, x_max: ev.x_max });
    }
    Ok(ev.degradation.cost(x.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_ev() -> EVParams {
        EVParams {
            id: 0,
            s_cap: 1.0,
            s_min: 0.1,
            s_max: 0.9,
            x_max: 0.2,
            weight: 1.0,
            c_up: 0.01,
            delta_max: 0.0,
            degradation: DegradationModel::default(),
        }
    }

    fn signal(g: f64, e: f64) -> SlotSignal {
        SlotSignal { g, e_s: e, e_d: e, avail: vec![true] }
    }

    #[test]
    fn indicators() {
        assert_eq!(slot_indicators(0.5), Indicators { down: true, up: false });
        assert_eq!(slot_indicators(-0.5), Indicators { down: false, up: true });
        assert_eq!(slot_indicators(0.0), Indicators { down: false, up: false });
    }

    #[test]
    fn bounds_examples() {
        let ev = toy_ev();
        let (d, u) = effective_bounds(&ev, 0.5).unwrap();
        assert_relative_eq!(d, 0.2);
        assert_relative_eq!(u, 0.2);
        let (d, u) = effective_bounds(&ev, 0.85).unwrap();
        assert_relative_eq!(d, 0.05, epsilon = 1e-15);
        assert_relative_eq!(u, 0.2);
        let (d, u) = effective_bounds(&ev, 0.1).unwrap();
        assert_relative_eq!(d, 0.2);
        assert_eq!(u, 0.0);
        assert!(effective_bounds(&ev, 1.5).is_err());
        assert!(effective_bounds(&ev, -0.1).is_err());
    }

    #[test]
    fn energy_update_examples() {
        let mut ev = toy_ev();
        ev.s_cap = 10.0;
        ev.s_max = 9.0;
        let st = EVState::initial(5.0, 0.0);
        let down = apply_energy_update(&ev, &st, true, 0.01, 0.0, slot_indicators(1.0)).unwrap();
        assert_relative_eq!(down.energy, 5.01);
        assert_relative_eq!(down.b, 0.01);
        let up = apply_energy_update(&ev, &st, true, 0.0, 0.01, slot_indicators(-1.0)).unwrap();
        assert_relative_eq!(up.energy, 4.99);
        assert_relative_eq!(up.b, -0.01);
        let away = apply_energy_update(&ev, &st, false, 0.0, 0.0, slot_indicators(1.0)).unwrap();
        assert_eq!(away.energy, 5.0);
        assert_eq!(away.b, 0.0);
        assert!(!down.out_of_range);
    }

    #[test]
    fn energy_update_flags_range_exit() {
        let ev = toy_ev();
        let st = EVState::initial(0.85, 0.0);
        let step = apply_energy_update(&ev, &st, true, 0.1, 0.0, slot_indicators(1.0)).unwrap();
        assert!(step.out_of_range);
    }

    #[test]
    fn external_cost_examples() {
        assert_eq!(external_cost(&signal(1.0, 0.1), 1.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(external_cost(&signal(1.0, 0.1), 0.4, 0.0).unwrap(), 0.06, epsilon = 1e-15);
        assert_relative_eq!(external_cost(&signal(-1.0, 0.12), 0.0, 0.0).unwrap(), 0.12);
        assert_eq!(external_cost(&signal(0.0, 0.12), 0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(
            external_cost(&signal(1.0, 0.1), 1.1, 0.0),
            Err(WmraError::OverAllocation { .. })
        ));
    }

    #[test]
    fn degradation_examples() {
        let fleet = FleetSpec::default().build(0.05).unwrap();
        let ev = &fleet[0];
        assert_eq!(degradation_cost(ev, 0.0).unwrap(), 0.0);
        assert_relative_eq!(degradation_cost(ev, 0.003).unwrap(), 9e-6, max_relative = 1e-12);
        // 6.6 kW for 5 s, in kWh, computed in watt-seconds first.
        let x_max = 6600.0 * 5.0 / 3.6e6;
        assert_relative_eq!(ev.x_max, x_max, max_relative = 1e-14);
        assert_relative_eq!(degradation_cost(ev, ev.x_max).unwrap(), 8.4028e-5, max_relative = 1e-4);
        assert_relative_eq!(ev.c_max(), x_max * x_max, max_relative = 1e-14);
        assert!(degradation_cost(ev, ev.x_max * 1.01).is_err());
        assert!(degradation_cost(ev, -0.001).is_err());
    }

    #[test]
    fn default_fleet_layout() {
        let fleet = FleetSpec::default().build(0.05).unwrap();
        assert_eq!(fleet.len(), 100);
        assert_eq!(fleet.iter().filter(|e| e.s_cap == 23.0).count(), 50);
        assert_eq!(fleet.iter().filter(|e| e.s_cap == 40.0).count(), 50);
        assert_relative_eq!(fleet[99].x_max, 10.0 * 5.0 / 3600.0);
        assert_relative_eq!(fleet[99].delta_max, 2.0);
        assert_relative_eq!(fleet[0].c_up, fleet[0].x_max.powi(2) / 4.0);
        assert_relative_eq!(fleet[0].s_min, 2.3);
        assert_relative_eq!(fleet[0].s_max, 20.7);
    }

    #[test]
    fn params_validation() {
        let mut ev = toy_ev();
        ev.x_max = 0.1;
        assert!(ev.validate().is_ok());
        ev.x_max = 0.2; // 0.8 - 4 * 0.2 = 0
        assert!(ev.validate().is_err());
        let mut ev = toy_ev();
        ev.c_up = 1.0;
        assert!(ev.validate().is_err());
        let mut ev = toy_ev();
        ev.s_min = 0.95;
        assert!(ev.validate().is_err());
    }

    #[test]
    fn degradation_inverse() {
        let q = DegradationModel::Quadratic { coef: 1.0 };
        let x_max: f64 = 0.02;
        assert_relative_eq!(q.inverse(x_max * x_max / 4.0), x_max / 2.0);
        let p = DegradationModel::Power { coef: 2.0, exponent: 3.0 };
        assert_relative_eq!(p.cost(p.inverse(0.5)), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn utility_slope_bound() {
        for u in [UtilityModel::Log, UtilityModel::Exponential { rate: 3.0 }] {
            assert_eq!(u.value(0.0), 0.0);
            for k in 0..=100 {
                let x = k as f64 * 0.002;
                assert!(u.value(x) <= u.mu() * x + 1e-15);
            }
        }
    }
}
