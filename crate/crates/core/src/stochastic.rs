//! Seedable generator of the exogenous system state: regulation request,
//! unit prices, per-EV availability and return energies.
//!
//! Every random source draws from its own ChaCha8 stream keyed off the master
//! seed. The regulation signal has one stream; each EV has independent streams
//! for availability, return energy and initial energy. Adding EVs to the fleet
//! therefore never changes the traces of the existing ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WmraError};
use crate::model::EVParams;

/// Retries before a return-energy draw gives up and clamps.
pub const MAX_RETURN_RETRIES: usize = 10_000;

const STREAM_SIGNAL: u64 = 0;
const STREAM_AVAILABILITY: u64 = 1 << 40;
const STREAM_RETURN: u64 = 2 << 40;
const STREAM_INITIAL: u64 = 3 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialEnergy {
    /// Uniform on the preferred range.
    #[default]
    Uniform,
    /// Midpoint of the preferred range.
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub g_lo: f64,
    pub g_hi: f64,
    pub g_levels: usize,
    pub price_lo: f64,
    pub price_hi: f64,
    pub price_levels: usize,
    /// P(away -> present).
    pub p_return: f64,
    /// P(present -> away).
    pub p_leave: f64,
    /// Half-width of the return-energy interval as a fraction of capacity.
    pub return_jitter: f64,
    pub seed: u64,
    pub initial_energy: InitialEnergy,
}

impl ScenarioConfig {
    /// Reference scenario for a fleet: the request grid spans plus/minus the
    /// fleet's total per-slot capacity with 200 levels, prices are 200 levels
    /// on [0.10, 0.12] $/kWh, `p_return = 0.95`, `p_leave = 1 - p_return` and
    /// returns jitter by 5% of capacity.
    pub fn for_fleet(fleet: &[EVParams]) -> Self {
        let g_hi: f64 = fleet.iter().map(|ev| ev.x_max).sum();
        ScenarioConfig {
            g_lo: -g_hi,
            g_hi,
            g_levels: 200,
            price_lo: 0.10,
            price_hi: 0.12,
            price_levels: 200,
            p_return: 0.95,
            p_leave: 0.05,
            return_jitter: 0.05,
            seed: 0,
            initial_energy: InitialEnergy::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(WmraError::Config(msg));
        if !(self.g_lo <= self.g_hi) || !self.g_lo.is_finite() || !self.g_hi.is_finite() {
            return fail(format!("signal range [{}, {}] is invalid", self.g_lo, self.g_hi));
        }
        if !(self.price_lo <= self.price_hi) || !(self.price_lo >= 0.0) || !self.price_hi.is_finite() {
            return fail(format!("price range [{}, {}] is invalid", self.price_lo, self.price_hi));
        }
        if self.g_levels == 0 || self.price_levels == 0 {
            return fail("grids need at least one level".into());
        }
        if (self.g_levels == 1 && self.g_lo != self.g_hi) || (self.price_levels == 1 && self.price_lo != self.price_hi) {
            return fail("a one-level grid needs equal endpoints".into());
        }
        for (name, p) in [("p_return", self.p_return), ("p_leave", self.p_leave)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.return_jitter >= 0.0 && self.return_jitter.is_finite()) {
            return fail(format!("return_jitter must be >= 0, got {}", self.return_jitter));
        }
        Ok(())
    }

    pub fn signal_step(&self) -> f64 {
        grid_step(self.g_lo, self.g_hi, self.g_levels)
    }

    pub fn price_step(&self) -> f64 {
        grid_step(self.price_lo, self.price_hi, self.price_levels)
    }
}

pub fn grid_step(lo: f64, hi: f64, levels: usize) -> f64 {
    if levels <= 1 {
        0.0
    } else {
        (hi - lo) / (levels - 1) as f64
    }
}

/// Value of grid point `idx`; the last point is exactly `hi`.
pub fn grid_value(lo: f64, hi: f64, levels: usize, idx: usize) -> f64 {
    if idx + 1 >= levels {
        hi
    } else {
        lo + idx as f64 * grid_step(lo, hi, levels)
    }
}

fn draw_grid<R: Rng + ?Sized>(lo: f64, hi: f64, levels: usize, rng: &mut R) -> f64 {
    grid_value(lo, hi, levels, rng.gen_range(0..levels))
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One step of the two-state availability chain for every EV. Each EV
/// consumes exactly one uniform from its own stream per call.
pub fn advance_availability<R: Rng>(avail: &[bool], p_return: f64, p_leave: f64, rngs: &mut [R]) -> Vec<bool> {
    avail
        .iter()
        .zip(rngs.iter_mut())
        .map(|(&present, rng)| {
            let u: f64 = rng.gen();
            if present {
                u >= p_leave
            } else {
                u < p_return
            }
        })
        .collect()
}

/// Draws `(G, e_s, e_d)` from the configured grids.
pub fn draw_signal_and_prices<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> (f64, f64, f64) {
    let g = draw_grid(cfg.g_lo, cfg.g_hi, cfg.g_levels, rng);
    let e_s = draw_grid(cfg.price_lo, cfg.price_hi, cfg.price_levels, rng);
    let e_d = draw_grid(cfg.price_lo, cfg.price_hi, cfg.price_levels, rng);
    (g, e_s, e_d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnDraw {
    pub energy: f64,
    /// Rejection sampling gave up and the value was clamped into range.
    pub clamped: bool,
}

/// Energy on return: uniform on `[s_leave - jitter, s_leave + jitter]`,
/// resampled until it lands in the preferred range.
pub fn draw_return_energy<R: Rng + ?Sized>(ev: &EVParams, s_leave: f64, jitter: f64, rng: &mut R) -> ReturnDraw {
    let clamp = |s: f64| s.clamp(ev.s_min, ev.s_max);
    if jitter == 0.0 {
        let energy = clamp(s_leave);
        return ReturnDraw { energy, clamped: energy != s_leave };
    }
    for _ in 0..MAX_RETURN_RETRIES {
        let s = s_leave + jitter * (2.0 * rng.gen::<f64>() - 1.0);
        if s >= ev.s_min && s <= ev.s_max {
            return ReturnDraw { energy: s, clamped: false };
        }
    }
    ReturnDraw { energy: clamp(s_leave), clamped: true }
}

/// Owns all random streams of one simulation replica.
#[derive(Debug, Clone)]
pub struct ScenarioGenerator {
    cfg: ScenarioConfig,
    signal_rng: ChaCha8Rng,
    avail_rngs: Vec<ChaCha8Rng>,
    return_rngs: Vec<ChaCha8Rng>,
    clamped_returns: u64,
}

impl ScenarioGenerator {
    pub fn new(cfg: ScenarioConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        Ok(ScenarioGenerator {
            signal_rng: substream(seed, STREAM_SIGNAL),
            avail_rngs: (0..n as u64).map(|i| substream(seed, STREAM_AVAILABILITY | i)).collect(),
            return_rngs: (0..n as u64).map(|i| substream(seed, STREAM_RETURN | i)).collect(),
            cfg,
            clamped_returns: 0,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    /// Energies at slot 0.
    pub fn initial_energies(&self, fleet: &[EVParams]) -> Vec<f64> {
        fleet
            .iter()
            .map(|ev| match self.cfg.initial_energy {
                InitialEnergy::Midpoint => ev.midpoint(),
                InitialEnergy::Uniform => {
                    let mut rng = substream(self.cfg.seed, STREAM_INITIAL | ev.id as u64);
                    rng.gen_range(ev.s_min..=ev.s_max)
                }
            })
            .collect()
    }

    pub fn advance_availability(&mut self, avail: &[bool]) -> Vec<bool> {
        advance_availability(avail, self.cfg.p_return, self.cfg.p_leave, &mut self.avail_rngs)
    }

    pub fn draw_signal(&mut self) -> (f64, f64, f64) {
        draw_signal_and_prices(&self.cfg, &mut self.signal_rng)
    }

    pub fn return_energy(&mut self, ev: &EVParams, s_leave: f64) -> ReturnDraw {
        let jitter = self.cfg.return_jitter * ev.s_cap;
        let draw = draw_return_energy(ev, s_leave, jitter, &mut self.return_rngs[ev.id]);
        if draw.clamped {
            self.clamped_returns += 1;
        }
        draw
    }

    /// Number of return draws that exhausted their retries.
    pub fn clamped_returns(&self) -> u64 {
        self.clamped_returns
    }
}
