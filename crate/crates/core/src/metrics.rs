//! Welfare accounting and constraint monitors.
//!
//! The headline number is the time-averaged social welfare at horizon `T`:
//! `sum_i w_i U(xbar_i(T)) - ebar(T)`, where `xbar_i` is EV `i`'s mean
//! regulation amount per slot and `ebar` the mean external cost per slot.

use serde::{Deserialize, Serialize};

use crate::model::{Allocation, EVParams, EVState, SlotSignal, UtilityModel};
use crate::queues::DerivedConstants;

/// Snapshot taken every `stride` slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    /// Slots elapsed.
    pub slot: u64,
    pub welfare_avg: f64,
    pub external_cost_avg: f64,
    /// Mean total regulation served by the fleet per slot (kWh).
    pub served_avg: f64,
    /// Cumulative preferred-range violations.
    pub violations: u64,
    pub max_shift_residual: f64,
    pub max_h: f64,
    /// `max_i J_i / T`.
    pub max_j_rate: f64,
    /// Energy of the tracked EV after this slot.
    pub tracked_energy: Option<f64>,
    pub tracked_available: Option<bool>,
}

/// Running sums for one controller run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    weights: Vec<f64>,
    utility: UtilityModel,
    stride: u64,
    tracked: Option<usize>,
    slots: u64,
    sum_x: Vec<f64>,
    sum_e: f64,
    sum_deg: Vec<f64>,
    sum_b: Vec<f64>,
    violations: u64,
    violations_per_ev: Vec<u64>,
    max_shift_residual: f64,
    max_k_excess: f64,
    max_h: f64,
    max_h_excess: f64,
    records: Vec<SlotRecord>,
}

/// End-of-run digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub slots: u64,
    pub welfare: f64,
    pub external_cost_avg: f64,
    /// Per-EV mean regulation amount.
    pub x_avg: Vec<f64>,
    /// Per-EV mean degradation cost.
    pub degradation_avg: Vec<f64>,
    /// Per-EV mean effective charge.
    pub b_avg: Vec<f64>,
    /// Per-EV `J_T / T`.
    pub j_rate: Vec<f64>,
    pub violations: u64,
    pub violations_per_ev: Vec<u64>,
    pub max_shift_residual: f64,
    /// Largest distance of `K` outside its bounds.
    pub max_k_excess: f64,
    pub max_h: f64,
    /// Largest `H - (V w mu + x_max)`.
    pub max_h_excess: f64,
}

impl MetricsSeries {
    pub fn new(fleet: &[EVParams], utility: UtilityModel, stride: u64, tracked: Option<usize>) -> Self {
        let n = fleet.len();
        MetricsSeries {
            weights: fleet.iter().map(|ev| ev.weight).collect(),
            utility,
            stride: stride.max(1),
            tracked,
            slots: 0,
            sum_x: vec![0.0; n],
            sum_e: 0.0,
            sum_deg: vec![0.0; n],
            sum_b: vec![0.0; n],
            violations: 0,
            violations_per_ev: vec![0; n],
            max_shift_residual: 0.0,
            max_k_excess: f64::NEG_INFINITY,
            max_h: f64::NEG_INFINITY,
            max_h_excess: f64::NEG_INFINITY,
            records: Vec::new(),
        }
    }

    pub fn slots(&self) -> u64 {
        self.slots
    }

    pub fn records(&self) -> &[SlotRecord] {
        &self.records
    }

    /// Time-averaged social welfare so far (zero before the first slot).
    pub fn welfare(&self) -> f64 {
        if self.slots == 0 {
            return 0.0;
        }
        let t = self.slots as f64;
        let utility: f64 = self
            .weights
            .iter()
            .zip(&self.sum_x)
            .map(|(w, sx)| w * self.utility.value(sx / t))
            .sum();
        utility - self.sum_e / t
    }

    pub fn external_cost_avg(&self) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.sum_e / self.slots as f64
        }
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }

    /// Accounts one slot. `states` are the states after the slot's energy and
    /// queue updates; `consts` enables the queue diagnostics. Returns the EVs
    /// that left their preferred range this slot.
    pub fn record_slot(
        &mut self,
        fleet: &[EVParams],
        signal: &SlotSignal,
        alloc: &Allocation,
        states: &[EVState],
        consts: Option<&DerivedConstants>,
    ) -> Vec<usize> {
        let ind = signal.indicators();
        let mut out_of_range = Vec::new();
        self.sum_e += alloc.external_cost;
        for (i, ev) in fleet.iter().enumerate() {
            self.sum_x[i] += alloc.amount(i);
            self.sum_b[i] += alloc.b[i];
            let mut deg = 0.0;
            if ind.down {
                deg += ev.degradation.cost(alloc.x_d[i]);
            }
            if ind.up {
                deg += ev.degradation.cost(alloc.x_u[i]);
            }
            self.sum_deg[i] += deg;

            let st = &states[i];
            if signal.avail[i] {
                if !ev.in_preferred_range(st.energy) {
                    self.violations += 1;
                    self.violations_per_ev[i] += 1;
                    out_of_range.push(i);
                }
                if let Some(c) = consts {
                    let shift = c.shifts[i];
                    let residual = (st.k - (st.energy - shift)).abs();
                    self.max_shift_residual = self.max_shift_residual.max(residual);
                    let (lo, hi) = c.k_bounds(ev);
                    self.max_k_excess = self.max_k_excess.max((lo - st.k).max(st.k - hi));
                }
            }
            if let Some(c) = consts {
                self.max_h = self.max_h.max(st.h);
                self.max_h_excess = self.max_h_excess.max(st.h - c.h_bound(ev));
            }
        }
        self.slots += 1;

        if self.slots % self.stride == 0 {
            let t = self.slots as f64;
            let max_j_rate = states.iter().map(|s| s.j / t).fold(0.0, f64::max);
            let served: f64 = self.sum_x.iter().sum();
            self.records.push(SlotRecord {
                slot: self.slots,
                welfare_avg: self.welfare(),
                external_cost_avg: self.external_cost_avg(),
                served_avg: served / t,
                violations: self.violations,
                max_shift_residual: self.max_shift_residual,
                max_h: self.max_h,
                max_j_rate,
                tracked_energy: self.tracked.map(|i| states[i].energy),
                tracked_available: self.tracked.map(|i| signal.avail[i]),
            });
        }
        out_of_range
    }

    pub fn summary(&self, states: &[EVState]) -> RunSummary {
        let t = self.slots.max(1) as f64;
        let avg = |v: &[f64]| v.iter().map(|s| s / t).collect::<Vec<_>>();
        RunSummary {
            slots: self.slots,
            welfare: self.welfare(),
            external_cost_avg: self.external_cost_avg(),
            x_avg: avg(&self.sum_x),
            degradation_avg: avg(&self.sum_deg),
            b_avg: avg(&self.sum_b),
            j_rate: states.iter().map(|s| s.j / t).collect(),
            violations: self.violations,
            violations_per_ev: self.violations_per_ev.clone(),
            max_shift_residual: self.max_shift_residual,
            max_k_excess: self.max_k_excess,
            max_h: self.max_h,
            max_h_excess: self.max_h_excess,
        }
    }
}

/// Drift constant `B` and the welfare gap bound `B / V`.
pub fn theory_gap_report(consts: &DerivedConstants) -> (f64, f64) {
    (consts.b, consts.b / consts.v)
}

/// Mean of per-seed welfare values.
pub fn mean_welfare<'a>(runs: impl IntoIterator<Item = &'a RunSummary>) -> f64 {
    let (sum, n) = runs.into_iter().fold((0.0, 0usize), |(s, n), r| (s + r.welfare, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DegradationModel, FleetSpec};
    use crate::queues::derive_constants_scaled;
    use approx::assert_relative_eq;

    fn small_fleet(n: usize) -> Vec<EVParams> {
        (0..n)
            .map(|id| EVParams {
                id,
                s_cap: 10.0,
                s_min: 1.0,
                s_max: 9.0,
                x_max: 0.05,
                weight: 1.0,
                c_up: 0.0,
                delta_max: 0.0,
                degradation: DegradationModel::default(),
            })
            .collect()
    }

    fn states(n: usize) -> Vec<EVState> {
        vec![EVState::initial(5.0, 0.0); n]
    }

    fn signal(g: f64, n: usize) -> SlotSignal {
        SlotSignal { g, e_s: 0.05, e_d: 0.05, avail: vec![true; n] }
    }

    #[test]
    fn idle_slot_has_zero_welfare() {
        let fleet = small_fleet(3);
        let mut m = MetricsSeries::new(&fleet, UtilityModel::Log, 1, None);
        m.record_slot(&fleet, &signal(0.0, 3), &Allocation::zeros(3), &states(3), None);
        assert_eq!(m.welfare(), 0.0);
    }

    #[test]
    fn welfare_uses_utility_of_mean() {
        let fleet = small_fleet(3);
        let mut m = MetricsSeries::new(&fleet, UtilityModel::Log, 1, None);
        m.record_slot(&fleet, &signal(0.0, 3), &Allocation::zeros(3), &states(3), None);
        let mut alloc = Allocation::zeros(3);
        alloc.x_d[0] = 0.01;
        alloc.b[0] = 0.01;
        m.record_slot(&fleet, &signal(0.01, 3), &alloc, &states(3), None);
        assert_relative_eq!(m.welfare(), 1.005f64.ln(), max_relative = 1e-14);
        assert_relative_eq!(m.welfare(), 4.9875e-3, max_relative = 1e-4);
    }

    #[test]
    fn fully_external_service() {
        let fleet = small_fleet(2);
        let mut m = MetricsSeries::new(&fleet, UtilityModel::Log, 1, None);
        for _ in 0..10 {
            let mut alloc = Allocation::zeros(2);
            alloc.external_cost = 0.05;
            m.record_slot(&fleet, &signal(1.0, 2), &alloc, &states(2), None);
        }
        assert_relative_eq!(m.welfare(), -0.05, max_relative = 1e-12);
    }

    #[test]
    fn records_follow_stride() {
        let fleet = small_fleet(1);
        let mut m = MetricsSeries::new(&fleet, UtilityModel::Log, 7, Some(0));
        for _ in 0..50 {
            m.record_slot(&fleet, &signal(0.0, 1), &Allocation::zeros(1), &states(1), None);
        }
        assert_eq!(m.records().len(), 7);
        assert_eq!(m.records()[0].slot, 7);
        assert_eq!(m.records()[0].tracked_energy, Some(5.0));
    }

    #[test]
    fn counts_range_violations_of_present_evs_only() {
        let fleet = small_fleet(2);
        let mut m = MetricsSeries::new(&fleet, UtilityModel::Log, 1, None);
        let mut st = states(2);
        st[0].energy = 9.5;
        st[1].energy = 0.5;
        let mut sig = signal(0.0, 2);
        sig.avail[1] = false;
        let out = m.record_slot(&fleet, &sig, &Allocation::zeros(2), &st, None);
        assert_eq!(out, vec![0]);
        assert_eq!(m.violations(), 1);
    }

    #[test]
    fn gap_report_scales_with_v() {
        let fleet = FleetSpec::default().build(0.05).unwrap();
        let c1 = derive_constants_scaled(&fleet, &UtilityModel::Log, 0.12, 1.0).unwrap();
        let c2 = derive_constants_scaled(&fleet, &UtilityModel::Log, 0.12, 2.0).unwrap();
        let (b1, g1) = theory_gap_report(&c1);
        let (b2, g2) = theory_gap_report(&c2);
        assert_eq!(b1, b2);
        assert_relative_eq!(g2, g1 / 2.0, max_relative = 1e-14);
    }
}
