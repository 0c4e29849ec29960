//! TOML configuration. Every key is optional; an empty file reproduces the
//! reference study.

use std::path::Path;

use serde::Deserialize;
use wmra_core::{
    DegradationModel, EVParams, EvType, FleetSpec, InitialEnergy, ScenarioConfig, UtilityModel, ViolationPolicy,
    WmraError,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Model(#[from] WmraError),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetSection {
    pub slot_seconds: f64,
    pub s_min_frac: f64,
    pub s_max_frac: f64,
    pub weight: f64,
    pub c_up_frac: f64,
    pub degradation: DegradationModel,
    pub types: Vec<TypeSection>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeSection {
    pub name: String,
    pub count: usize,
    pub capacity_kwh: f64,
    pub rate_kw: f64,
}

impl Default for FleetSection {
    fn default() -> Self {
        let spec = FleetSpec::default();
        FleetSection {
            slot_seconds: spec.slot_seconds,
            s_min_frac: spec.s_min_frac,
            s_max_frac: spec.s_max_frac,
            weight: spec.weight,
            c_up_frac: spec.c_up_frac,
            degradation: spec.degradation,
            types: spec
                .types
                .into_iter()
                .map(|t| TypeSection { name: t.name, count: t.count, capacity_kwh: t.capacity_kwh, rate_kw: t.rate_kw })
                .collect(),
        }
    }
}

impl FleetSection {
    pub fn spec(&self) -> FleetSpec {
        FleetSpec {
            types: self
                .types
                .iter()
                .map(|t| EvType { name: t.name.clone(), count: t.count, capacity_kwh: t.capacity_kwh, rate_kw: t.rate_kw })
                .collect(),
            slot_seconds: self.slot_seconds,
            s_min_frac: self.s_min_frac,
            s_max_frac: self.s_max_frac,
            weight: self.weight,
            c_up_frac: self.c_up_frac,
            degradation: self.degradation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    /// Upper end of the request grid; defaults to the fleet's total `x_max`.
    pub g_hi: Option<f64>,
    /// Lower end; defaults to `-g_hi`.
    pub g_lo: Option<f64>,
    pub g_levels: usize,
    pub price_lo: f64,
    pub price_hi: f64,
    pub price_levels: usize,
    pub p_return: f64,
    /// Defaults to `1 - p_return`.
    pub p_leave: Option<f64>,
    pub return_jitter: f64,
    pub initial_energy: InitialEnergy,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            g_hi: None,
            g_lo: None,
            g_levels: 200,
            price_lo: 0.10,
            price_hi: 0.12,
            price_levels: 200,
            p_return: 0.95,
            p_leave: None,
            return_jitter: 0.05,
            initial_energy: InitialEnergy::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    /// `V` as a multiple of `V_max`.
    pub v_mult: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection { v_mult: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Horizon for fig2, fig3 and custom.
    pub slots: u64,
    /// First seed.
    pub seed: u64,
    /// Replicas per sweep point; seeds are `seed, seed + 1, ...`.
    pub seeds: u64,
    /// Keep one time-series row every `stride` slots.
    pub stride: u64,
    pub violations: ViolationPolicy,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { slots: 20_000, seed: 0, seeds: 5, stride: 100, violations: ViolationPolicy::Auto }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig3Section {
    pub s_max_fracs: Vec<f64>,
    pub p_returns: Vec<f64>,
}

impl Default for Fig3Section {
    fn default() -> Self {
        Fig3Section { s_max_fracs: vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], p_returns: vec![0.95, 0.05] }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig4Section {
    pub v_mults: Vec<f64>,
    /// The largest multipliers need a long horizon to get past the queue
    /// warm-up, so this sweep has its own.
    pub slots: u64,
}

impl Default for Fig4Section {
    fn default() -> Self {
        Fig4Section { v_mults: vec![0.2, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0], slots: 200_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig5Section {
    pub v_mults: Vec<f64>,
    /// EV whose energy path is recorded.
    pub ev: usize,
    pub slots: u64,
}

impl Default for Fig5Section {
    fn default() -> Self {
        Fig5Section { v_mults: vec![1.0, 2.0, 5.0], ev: 0, slots: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub fleet: FleetSection,
    pub scenario: ScenarioSection,
    pub utility: UtilityModel,
    pub controller: ControllerSection,
    pub run: RunSection,
    pub fig3: Fig3Section,
    pub fig4: Fig4Section,
    pub fig5: Fig5Section,
}

impl Config {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Config::from_toml(&text, &path.display().to_string())
    }

    /// Builds everything once so that bad values surface before any run.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fleet = self.build_fleet(&self.fleet.spec())?;
        self.scenario_for(&fleet, self.run.seed).validate()?;
        self.utility.validate().map_err(WmraError::Config)?;
        wmra_core::queues::v_max(&fleet, &self.utility, self.scenario.price_hi)?;
        let bad = |msg: String| Err(ConfigError::Model(WmraError::Config(msg)));
        if !(self.controller.v_mult > 0.0 && self.controller.v_mult.is_finite()) {
            return bad(format!("controller.v_mult must be > 0, got {}", self.controller.v_mult));
        }
        if self.run.slots == 0 || self.fig4.slots == 0 || self.fig5.slots == 0 {
            return bad("horizons must be at least one slot".into());
        }
        if self.run.seeds == 0 {
            return bad("run.seeds must be at least 1".into());
        }
        if self.fig5.ev >= fleet.len() {
            return bad(format!("fig5.ev = {} but the fleet has {} EVs", self.fig5.ev, fleet.len()));
        }
        for &f in &self.fig3.s_max_fracs {
            let mut spec = self.fleet.spec();
            spec.s_max_frac = f;
            let fl = self.build_fleet(&spec)?;
            wmra_core::queues::v_max(&fl, &self.utility, self.scenario.price_hi)?;
        }
        for &p in &self.fig3.p_returns {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("fig3.p_returns entries must lie in [0, 1], got {p}"));
            }
        }
        for &m in self.fig4.v_mults.iter().chain(&self.fig5.v_mults) {
            if !(m > 0.0 && m.is_finite()) {
                return bad(format!("V multipliers must be > 0, got {m}"));
            }
        }
        Ok(())
    }

    pub fn build_fleet(&self, spec: &FleetSpec) -> Result<Vec<EVParams>, WmraError> {
        spec.build(self.scenario.return_jitter)
    }

    pub fn fleet(&self) -> Result<Vec<EVParams>, WmraError> {
        self.build_fleet(&self.fleet.spec())
    }

    pub fn scenario_for(&self, fleet: &[EVParams], seed: u64) -> ScenarioConfig {
        let s = &self.scenario;
        let g_hi = s.g_hi.unwrap_or_else(|| fleet.iter().map(|ev| ev.x_max).sum());
        ScenarioConfig {
            g_lo: s.g_lo.unwrap_or(-g_hi),
            g_hi,
            g_levels: s.g_levels,
            price_lo: s.price_lo,
            price_hi: s.price_hi,
            price_levels: s.price_levels,
            p_return: s.p_return,
            p_leave: s.p_leave.unwrap_or(1.0 - s.p_return),
            return_jitter: s.return_jitter,
            seed,
            initial_energy: s.initial_energy,
        }
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        let first = self.run.seed;
        (0..self.run.seeds).map(move |k| first.wrapping_add(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_reference_setup() {
        let cfg = Config::from_toml("", "inline").unwrap();
        assert_eq!(cfg, Config::default());
        let fleet = cfg.fleet().unwrap();
        assert_eq!(fleet.len(), 100);
        assert_eq!(fleet.iter().filter(|ev| ev.s_cap == 23.0).count(), 50);
        assert_eq!(fleet.iter().filter(|ev| ev.s_cap == 40.0).count(), 50);
        let sc = cfg.scenario_for(&fleet, 0);
        assert!((sc.g_hi - 1.1528).abs() < 1e-4);
        assert_eq!(sc.g_lo, -sc.g_hi);
        assert!((sc.p_leave - 0.05).abs() < 1e-15);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = Config::from_toml("[run]\nslots = 10\nslotz = 3\n", "bad.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("slotz"), "{msg}");
    }

    #[test]
    fn non_positive_v_max_rejected() {
        let err = Config::from_toml("[fleet]\ns_min_frac = 0.4\ns_max_frac = 0.4001\n", "x").unwrap_err();
        assert!(matches!(err, ConfigError::Model(_)), "{err}");
    }

    #[test]
    fn s_max_override() {
        let cfg = Config::from_toml("[fleet]\ns_max_frac = 0.3\n", "x").unwrap();
        let fleet = cfg.fleet().unwrap();
        assert!((fleet[0].s_max - 6.9).abs() < 1e-12);
    }

    #[test]
    fn tagged_models() {
        let text = "[utility]\nkind = \"exponential\"\nrate = 2.0\n[fleet.degradation]\nkind = \"power\"\ncoef = 1.0\nexponent = 1.5\n";
        let cfg = Config::from_toml(text, "x").unwrap();
        assert_eq!(cfg.utility, UtilityModel::Exponential { rate: 2.0 });
        assert_eq!(cfg.fleet.degradation, DegradationModel::Power { coef: 1.0, exponent: 1.5 });
    }
}
