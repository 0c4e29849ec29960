//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmra_core::{
    derive_constants_scaled, CoupledItem, CoupledProblem, DegradationModel, DerivedConstants, EVParams, FleetSpec,
    ItemCost, ScenarioConfig, UtilityModel,
};

/// Reference fleet, scenario and constants at `V = multiplier * V_max`.
pub fn reference(multiplier: f64) -> (Vec<EVParams>, ScenarioConfig, DerivedConstants) {
    let fleet = FleetSpec::default().build(0.05).expect("reference fleet");
    let scenario = ScenarioConfig::for_fleet(&fleet);
    let consts =
        derive_constants_scaled(&fleet, &UtilityModel::Log, scenario.price_hi, multiplier).expect("constants");
    (fleet, scenario, consts)
}

/// A binding coupled problem shaped like a regulation-down slot.
pub fn coupled_instance(n: usize, seed: u64) -> CoupledProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cost = ItemCost::Degradation(DegradationModel::Quadratic { coef: 1.0 });
    let items: Vec<CoupledItem> = (0..n)
        .map(|_| CoupledItem {
            a: rng.gen_range(-10.0..1.0),
            scale: rng.gen_range(0.0..200.0),
            ub: rng.gen_range(0.005..0.014),
            cost,
        })
        .collect();
    let budget = 0.5 * items.iter().map(|it| it.ub).sum::<f64>();
    CoupledProblem { items, budget }
}
