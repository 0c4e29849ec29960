//! Scalar and separable convex minimization used by the controllers.
//!
//! The per-slot subproblems are all of the form
//!
//! ```text
//! minimize   sum_i a_i x_i + s_i f_i(x_i)
//! subject to 0 <= x_i <= ub_i,  sum_i x_i <= R
//! ```
//!
//! with `f_i` convex. [`solve_coupled`] solves it exactly by bisecting on the
//! multiplier of the budget: for a fixed multiplier `lambda` every item is an
//! independent scalar problem with slope `a_i + lambda`, and the total
//! allocation is non-increasing in `lambda`. [`oracle_grid`] is a brute-force
//! grid search kept around to cross-check the solver.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WmraError};
use crate::model::{DegradationModel, EVParams, EVState, SlotSignal, UtilityModel};
use crate::queues::DerivedConstants;

/// Hard cap on dual bisection steps.
pub const MAX_BISECTION_ITERS: usize = 200;
/// Stop once the allocation is this close to the budget (kWh).
pub const BUDGET_RESIDUAL_TOL: f64 = 1e-10;
/// Stop once the multiplier bracket is this tight, relative to `1 + lambda_hi`.
pub const LAMBDA_REL_TOL: f64 = 1e-12;
/// Largest instance [`oracle_grid`] accepts.
pub const ORACLE_MAX_ITEMS: usize = 4;

/// Convex per-item cost `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ItemCost {
    /// `f(x) = C(x)`
    Degradation(DegradationModel),
    /// `f(x) = -U(x)`
    NegUtility(UtilityModel),
}

impl ItemCost {
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self {
            ItemCost::Degradation(d) => d.cost(x),
            ItemCost::NegUtility(u) => -u.value(x),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            ItemCost::Degradation(d) => d.derivative(x),
            ItemCost::NegUtility(u) => -u.derivative(x),
        }
    }

    /// Minimizer of `slope * x + scale * f(x)` on `[0, ub]`, in closed form.
    pub fn argmin(&self, slope: f64, scale: f64, ub: f64) -> f64 {
        if ub <= 0.0 {
            return 0.0;
        }
        if scale == 0.0 {
            return linear_argmin(slope, ub);
        }
        let x = match *self {
            ItemCost::Degradation(DegradationModel::Quadratic { coef }) => {
                if coef == 0.0 {
                    return linear_argmin(slope, ub);
                }
                -slope / (2.0 * scale * coef)
            }
            ItemCost::Degradation(DegradationModel::Power { coef, exponent }) => {
                if coef == 0.0 {
                    return linear_argmin(slope, ub);
                }
                if exponent == 1.0 {
                    return linear_argmin(slope + scale * coef, ub);
                }
                if slope >= 0.0 {
                    return 0.0;
                }
                (-slope / (scale * coef * exponent)).powf(1.0 / (exponent - 1.0))
            }
            ItemCost::NegUtility(UtilityModel::Log) => {
                if slope <= 0.0 {
                    return ub;
                }
                scale / slope - 1.0
            }
            ItemCost::NegUtility(UtilityModel::Exponential { rate }) => {
                if slope <= 0.0 {
                    return ub;
                }
                (scale / slope).ln() / rate
            }
        };
        x.clamp(0.0, ub)
    }

    /// Same minimizer found by bisection on the derivative, for any cost.
    pub fn argmin_bisect(&self, slope: f64, scale: f64, ub: f64) -> f64 {
        if ub <= 0.0 {
            return 0.0;
        }
        let grad = |x: f64| slope + scale * self.derivative(x);
        if grad(0.0) >= 0.0 {
            return 0.0;
        }
        if grad(ub) <= 0.0 {
            return ub;
        }
        let (mut lo, mut hi) = (0.0, ub);
        while hi - lo > 1e-15 * ub.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if grad(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

#[inline]
fn linear_argmin(slope: f64, ub: f64) -> f64 {
    if slope < 0.0 {
        ub
    } else {
        0.0
    }
}

/// Auxiliary target: minimizer of `H z - w V U(z)` on `[0, x_max]`.
pub fn solve_aux(h: f64, weight: f64, v: f64, util: &UtilityModel, x_max: f64) -> f64 {
    ItemCost::NegUtility(*util).argmin(h, weight * v, x_max)
}

/// [`solve_aux`] without the closed form.
pub fn solve_aux_bisect(h: f64, weight: f64, v: f64, util: &UtilityModel, x_max: f64) -> f64 {
    ItemCost::NegUtility(*util).argmin_bisect(h, weight * v, x_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledItem {
    /// Linear coefficient.
    pub a: f64,
    /// Scale of the convex term.
    pub scale: f64,
    pub ub: f64,
    pub cost: ItemCost,
}

impl CoupledItem {
    #[inline]
    fn response(&self, lambda: f64) -> f64 {
        self.cost.argmin(self.a + lambda, self.scale, self.ub)
    }

    #[inline]
    fn value(&self, x: f64) -> f64 {
        self.a * x + self.scale * self.cost.value(x)
    }
}

/// `min sum_i a_i x_i + s_i f_i(x_i)` over boxes `[0, ub_i]` with `sum x_i <= budget`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledProblem {
    pub items: Vec<CoupledItem>,
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSolution {
    pub x: Vec<f64>,
    /// Budget multiplier at the returned point.
    pub lambda: f64,
    pub iterations: usize,
}

impl CoupledProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0) {
            return Err(WmraError::NegativeBudget(self.budget));
        }
        for (i, it) in self.items.iter().enumerate() {
            if !(it.ub >= 0.0 && it.ub.is_finite() && it.scale >= 0.0 && it.scale.is_finite() && it.a.is_finite()) {
                return Err(WmraError::Config(format!("malformed item {i}: {it:?}")));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.items.iter().zip(x).map(|(it, &xi)| it.value(xi)).sum()
    }

    /// Lipschitz constant of the objective on the box.
    pub fn lipschitz_bound(&self) -> f64 {
        self.items
            .iter()
            .map(|it| {
                let d0 = it.cost.derivative(0.0).abs();
                let d1 = it.cost.derivative(it.ub).abs();
                it.a.abs() + it.scale * d0.max(d1)
            })
            .sum()
    }

    /// Largest violation of the boxes or the budget.
    pub fn feasibility_residual(&self, x: &[f64]) -> f64 {
        let boxes = self
            .items
            .iter()
            .zip(x)
            .map(|(it, &xi)| (-xi).max(xi - it.ub).max(0.0))
            .fold(0.0, f64::max);
        let budget = (x.iter().sum::<f64>() - self.budget).max(0.0);
        boxes.max(budget)
    }

    fn total(&self, lambda: f64, out: &mut [f64]) -> f64 {
        let mut sum = 0.0;
        for (it, slot) in self.items.iter().zip(out.iter_mut()) {
            *slot = it.response(lambda);
            sum += *slot;
        }
        sum
    }
}

/// Solves a [`CoupledProblem`] by dual bisection.
///
/// Items whose response jumps inside the final multiplier bracket (the
/// linear ones) take the residual budget in order of `a_i`, then index.
pub fn solve_coupled(problem: &CoupledProblem) -> Result<CoupledSolution> {
    problem.validate()?;
    let n = problem.items.len();
    let budget = problem.budget;
    if n == 0 || budget == 0.0 {
        return Ok(CoupledSolution { x: vec![0.0; n], lambda: 0.0, iterations: 0 });
    }

    let mut x_hi = vec![0.0; n];
    let free_total = problem.total(0.0, &mut x_hi);
    if free_total <= budget {
        return Ok(CoupledSolution { x: x_hi, lambda: 0.0, iterations: 0 });
    }

    // At lambda_hi every item's slope at zero is positive, so nothing is allocated.
    let lambda_hi0 = problem
        .items
        .iter()
        .map(|it| -(it.a + it.scale * it.cost.derivative(0.0)))
        .fold(0.0, f64::max)
        + 1.0;
    let (mut lo, mut hi) = (0.0, lambda_hi0);
    let (mut sum_lo, mut sum_hi) = (free_total, problem.total(hi, &mut x_hi));
    debug_assert!(sum_hi <= budget);
    let mut x_mid = vec![0.0; n];

    let mut iterations = 0;
    loop {
        if budget - sum_hi <= BUDGET_RESIDUAL_TOL {
            return Ok(CoupledSolution { x: x_hi, lambda: hi, iterations });
        }
        if hi - lo <= LAMBDA_REL_TOL * (1.0 + hi) {
            break;
        }
        if iterations >= MAX_BISECTION_ITERS {
            return Err(WmraError::NonConvergent { iterations, residual: budget - sum_hi });
        }
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let sum_mid = problem.total(mid, &mut x_mid);
        debug_assert!(
            sum_mid <= sum_lo + 1e-12 && sum_mid >= sum_hi - 1e-12,
            "allocation not monotone in lambda: {sum_lo} >= {sum_mid} >= {sum_hi}"
        );
        if sum_mid > budget {
            lo = mid;
            sum_lo = sum_mid;
        } else {
            hi = mid;
            sum_hi = sum_mid;
            std::mem::swap(&mut x_hi, &mut x_mid);
        }
    }

    // The bracket collapsed on a jump of the total: hand the residual to the
    // items that jump, cheapest coefficient first.
    let mut x_lo = vec![0.0; n];
    problem.total(lo, &mut x_lo);
    let mut marginal: Vec<usize> = (0..n).filter(|&i| x_lo[i] > x_hi[i]).collect();
    marginal.sort_by(|&i, &j| problem.items[i].a.total_cmp(&problem.items[j].a).then(i.cmp(&j)));
    let mut residual = budget - sum_hi;
    for i in marginal {
        if residual <= 0.0 {
            break;
        }
        let add = (x_lo[i] - x_hi[i]).min(residual);
        x_hi[i] += add;
        residual -= add;
    }
    if residual > BUDGET_RESIDUAL_TOL {
        return Err(WmraError::NonConvergent { iterations, residual });
    }
    Ok(CoupledSolution { x: x_hi, lambda: hi, iterations })
}

/// Exhaustive search over the per-item grids `{0, step, 2 step, ..., <= ub_i}`
/// restricted to the budget. Returns the first grid point with the smallest
/// objective.
pub fn oracle_grid(problem: &CoupledProblem, step: f64) -> Result<Vec<f64>> {
    problem.validate()?;
    if problem.items.len() > ORACLE_MAX_ITEMS {
        return Err(WmraError::DimensionTooLarge { got: problem.items.len(), max: ORACLE_MAX_ITEMS });
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(WmraError::InvalidStep(step));
    }
    // Per-item tables of (x, value).
    let tables: Vec<Vec<(f64, f64)>> = problem
        .items
        .iter()
        .map(|it| {
            let count = (it.ub / step + 1e-9).floor() as usize;
            (0..=count).map(|k| k as f64 * step).map(|x| (x, it.value(x))).collect()
        })
        .collect();

    struct Search<'a> {
        tables: &'a [Vec<(f64, f64)>],
        budget: f64,
        current: Vec<usize>,
        best: Vec<usize>,
        best_value: f64,
    }

    impl Search<'_> {
        fn visit(&mut self, depth: usize, used: f64, value: f64) {
            if depth == self.tables.len() {
                if value < self.best_value {
                    self.best_value = value;
                    self.best.clone_from(&self.current);
                }
                return;
            }
            for (k, &(x, v)) in self.tables[depth].iter().enumerate() {
                if used + x > self.budget + 1e-12 {
                    break;
                }
                self.current[depth] = k;
                self.visit(depth + 1, used + x, value + v);
            }
        }
    }

    let n = tables.len();
    let mut search = Search {
        tables: &tables,
        budget: problem.budget,
        current: vec![0; n],
        best: vec![0; n],
        best_value: f64::INFINITY,
    };
    search.visit(0, 0.0, 0.0);
    Ok(search.best.iter().enumerate().map(|(i, &k)| tables[i][k].0).collect())
}

fn check_lengths(fleet: &[EVParams], states: &[EVState], signal: &SlotSignal) {
    assert_eq!(fleet.len(), states.len(), "fleet/state length mismatch");
    assert_eq!(fleet.len(), signal.avail.len(), "fleet/availability length mismatch");
}

/// Regulation-down subproblem: slopes `K_i - H_i - V e_s`, degradation scaled
/// by `J_i`, boxes `[0, x_max]` for present EVs, budget `G`.
///
/// The boxes deliberately ignore the energy headroom: the shift in `K` keeps
/// the energy inside the preferred range whenever `V <= V_max`.
pub fn build_regdown_problem(
    fleet: &[EVParams],
    states: &[EVState],
    signal: &SlotSignal,
    consts: &DerivedConstants,
) -> Result<CoupledProblem> {
    if !(signal.g > 0.0) {
        return Err(WmraError::WrongSignalSign { what: "regulation-down", expected: "a positive", g: signal.g });
    }
    check_lengths(fleet, states, signal);
    let items = fleet
        .iter()
        .zip(states)
        .zip(&signal.avail)
        .map(|((ev, st), &present)| CoupledItem {
            a: st.k - st.h - consts.v * signal.e_s,
            scale: st.j,
            ub: if present { ev.x_max } else { 0.0 },
            cost: ItemCost::Degradation(ev.degradation),
        })
        .collect();
    Ok(CoupledProblem { items, budget: signal.g })
}

/// Regulation-up subproblem: slopes `-K_i - H_i - V e_d`, budget `|G|`.
pub fn build_regup_problem(
    fleet: &[EVParams],
    states: &[EVState],
    signal: &SlotSignal,
    consts: &DerivedConstants,
) -> Result<CoupledProblem> {
    if !(signal.g < 0.0) {
        return Err(WmraError::WrongSignalSign { what: "regulation-up", expected: "a negative", g: signal.g });
    }
    check_lengths(fleet, states, signal);
    let items = fleet
        .iter()
        .zip(states)
        .zip(&signal.avail)
        .map(|((ev, st), &present)| CoupledItem {
            a: -st.k - st.h - consts.v * signal.e_d,
            scale: st.j,
            ub: if present { ev.x_max } else { 0.0 },
            cost: ItemCost::Degradation(ev.degradation),
        })
        .collect();
    Ok(CoupledProblem { items, budget: signal.g.abs() })
}
