use thiserror::Error;

/// Errors raised by the allocation library and simulator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum WmraError {
    #[error("EV {id}: invalid parameters: {reason}")]
    InvalidParams { id: usize, reason: String },

    #[error("EV {id}: non-positive V_max bound ({value:.6e}); preferred range too narrow for the rate limit")]
    NonPositiveVMax { id: usize, value: f64 },

    #[error("EV {id}: energy {energy} kWh outside [0, {s_cap}] kWh")]
    EnergyOutOfCapacity { id: usize, energy: f64, s_cap: f64 },

    #[error("EV {id}: regulation amount {x} kWh outside [0, {x_max}] kWh")]
    AmountOutOfBox { id: usize, x: f64, x_max: f64 },

    #[error("over-allocation: EVs serve {served} kWh against a request of {requested} kWh")]
    OverAllocation { served: f64, requested: f64 },

    #[error("negative budget {0}")]
    NegativeBudget(f64),

    #[error("dual bisection did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergent { iterations: usize, residual: f64 },

    #[error("grid oracle supports at most {max} items, got {got}")]
    DimensionTooLarge { got: usize, max: usize },

    #[error("invalid grid step {0}")]
    InvalidStep(f64),

    #[error("{what} problem requires {expected} regulation signal, got G = {g}")]
    WrongSignalSign { what: &'static str, expected: &'static str, g: f64 },

    #[error("slot {slot}, EV {id}: {what}")]
    Invariant { slot: u64, id: usize, what: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = WmraError> = std::result::Result<T, E>;
