//! Virtual queues and the constants that anchor them.
//!
//! Three queues per EV:
//! - `J` accumulates degradation in excess of `c_up`; its stability enforces
//!   the time-averaged degradation cap.
//! - `H` tracks the gap between the auxiliary target `z` and the served amount.
//! - `K` is the energy state shifted by `c_i`. It is re-anchored to `s - c_i`
//!   whenever the EV returns and frozen while the EV is away.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WmraError};
use crate::model::{EVParams, EVState, Indicators, UtilityModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    /// Slope bound of the utility.
    pub mu: f64,
    /// Welfare weight in use.
    pub v: f64,
    /// Largest `V` for which the energy range is guaranteed.
    pub v_max: f64,
    /// Price ceiling.
    pub e_max: f64,
    /// Per-EV shift `c_i` (kWh).
    pub shifts: Vec<f64>,
    /// Drift bound constant.
    pub b: f64,
    /// Set when `v > v_max`.
    pub warning: Option<String>,
}

impl DerivedConstants {
    pub fn v_multiplier(&self) -> f64 {
        self.v / self.v_max
    }

    /// `V w_i mu + x_max`, the ceiling `H_i` never exceeds.
    pub fn h_bound(&self, ev: &EVParams) -> f64 {
        self.v * ev.weight * self.mu + ev.x_max
    }

    /// `[s_min - c_i, s_max - c_i]`.
    pub fn k_bounds(&self, ev: &EVParams) -> (f64, f64) {
        let c = self.shifts[ev.id];
        (ev.s_min - c, ev.s_max - c)
    }

    /// Lemma-4 style threshold `x_max + V (w_i mu + e_max)`: above it an EV is
    /// never charged, below its negative it is never discharged.
    pub fn k_threshold(&self, ev: &EVParams) -> f64 {
        ev.x_max + self.v * (ev.weight * self.mu + self.e_max)
    }
}

/// `min_i (s_max - s_min - 4 x_max) / (2 (w_i mu + e_max))`.
pub fn v_max(fleet: &[EVParams], util: &UtilityModel, e_max: f64) -> Result<f64> {
    let mu = util.mu();
    let mut best: Option<(f64, usize)> = None;
    for ev in fleet {
        let term = (ev.s_max - ev.s_min - 4.0 * ev.x_max) / (2.0 * (ev.weight * mu + e_max));
        if best.map_or(true, |(v, _)| term < v) {
            best = Some((term, ev.id));
        }
    }
    match best {
        None => Err(WmraError::Config("fleet is empty".into())),
        Some((v, id)) if !(v > 0.0) => Err(WmraError::NonPositiveVMax { id, value: v }),
        Some((v, _)) => Ok(v),
    }
}

/// `B = 1/2 sum_i [2 x_max^2 + delta_max^2 + max(c_up^2, (c_max - c_up)^2)]`.
pub fn drift_constant(fleet: &[EVParams]) -> f64 {
    0.5 * fleet
        .iter()
        .map(|ev| {
            let c_max = ev.c_max();
            2.0 * ev.x_max * ev.x_max
                + ev.delta_max * ev.delta_max
                + (ev.c_up * ev.c_up).max((c_max - ev.c_up).powi(2))
        })
        .sum::<f64>()
}

/// `c_i = s_min + 2 x_max + V (w_i mu + e_max)`.
pub fn shift(ev: &EVParams, mu: f64, e_max: f64, v: f64) -> f64 {
    ev.s_min + 2.0 * ev.x_max + v * (ev.weight * mu + e_max)
}

/// Computes `mu`, `V_max`, the shifts at `v_requested` and `B`. A request
/// above `V_max` is honored but carries a warning.
pub fn derive_constants(
    fleet: &[EVParams],
    util: &UtilityModel,
    e_max: f64,
    v_requested: f64,
) -> Result<DerivedConstants> {
    if !(v_requested > 0.0 && v_requested.is_finite()) {
        return Err(WmraError::Config(format!("V must be positive, got {v_requested}")));
    }
    if !(e_max >= 0.0 && e_max.is_finite()) {
        return Err(WmraError::Config(format!("e_max must be >= 0, got {e_max}")));
    }
    for ev in fleet {
        ev.validate()?;
    }
    let mu = util.mu();
    let v_max = v_max(fleet, util, e_max)?;
    let warning = (v_requested > v_max * (1.0 + 1e-12)).then(|| {
        format!("V = {v_requested} exceeds V_max = {v_max}; energy range is not guaranteed")
    });
    Ok(DerivedConstants {
        mu,
        v: v_requested,
        v_max,
        e_max,
        shifts: fleet.iter().map(|ev| shift(ev, mu, e_max, v_requested)).collect(),
        b: drift_constant(fleet),
        warning,
    })
}

/// Same as [`derive_constants`] with `V = multiplier * V_max`.
pub fn derive_constants_scaled(
    fleet: &[EVParams],
    util: &UtilityModel,
    e_max: f64,
    multiplier: f64,
) -> Result<DerivedConstants> {
    let vm = v_max(fleet, util, e_max)?;
    derive_constants(fleet, util, e_max, multiplier * vm)
}

/// `J' = [J + 1_d C(x_d) + 1_u C(x_u) - c_up]^+`.
pub fn update_j(j: f64, ev: &EVParams, x_d: f64, x_u: f64, ind: Indicators) -> f64 {
    let mut incurred = 0.0;
    if ind.down {
        incurred += ev.degradation.cost(x_d);
    }
    if ind.up {
        incurred += ev.degradation.cost(x_u);
    }
    (j + incurred - ev.c_up).max(0.0)
}

/// `H' = H + z - x`.
#[inline]
pub fn update_h(h: f64, z: f64, x: f64) -> f64 {
    h + z - x
}

/// Re-anchors `K = s - c_i` on return, otherwise `K' = K + b`.
#[inline]
pub fn update_k(state: &EVState, shift: f64, b: f64, just_returned: bool) -> f64 {
    if just_returned {
        state.energy - shift
    } else {
        state.k + b
    }
}
