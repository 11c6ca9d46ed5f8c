//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use mpc_tune::tuner::{StepSchedule, TuneMode};
use serde::{Deserialize, Serialize};

use crate::plants::{LateralSpec, RandomLinearSpec};
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Alg1,
    #[serde(alias = "alg3_ce")]
    Ce,
    Scenario,
}

impl Mode {
    pub fn tune_mode(self) -> Option<TuneMode> {
        match self {
            Self::Alg1 => Some(TuneMode::Alg1),
            Self::Ce => Some(TuneMode::Ce),
            Self::Scenario => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Alg1 => "alg1",
            Self::Ce => "ce",
            Self::Scenario => "scenario",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "alg1" => Ok(Self::Alg1),
            "ce" | "alg3_ce" => Ok(Self::Ce),
            "scenario" => Ok(Self::Scenario),
            _ => Err(format!("unknown mode {s:?}; expected alg1, ce or scenario")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantConfig {
    RandomLinear {
        n_systems: usize,
        #[serde(flatten)]
        spec: RandomLinearSpec,
    },
    Lateral {
        /// Curvature profile, one value per step, relative to the config file.
        curvature_csv: PathBuf,
        #[serde(flatten)]
        spec: LateralSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    pub c1: f64,
    pub c2: f64,
}

/// Upper-level cost `q_scale I`, `r_scale I`, constraint penalty `c3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub q_scale: f64,
    pub r_scale: f64,
    pub c3: f64,
}

/// Initial MPC weights `q I`, `r I`, `p I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialWeights {
    pub q: f64,
    pub r: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    pub modes: Vec<Mode>,
    pub iterations: usize,
    pub schedule: StepSchedule,
    /// Schedule for certainty-equivalence runs; defaults to `schedule`.
    #[serde(default)]
    pub ce_schedule: Option<StepSchedule>,
    pub identify: bool,
    pub delta: f64,
    pub lambda: f64,
    /// Box `|entry| <= factor_bound` on the cost factors.
    pub factor_bound: f64,
    pub initial: InitialWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub episodes: usize,
    /// Held-out evaluation every this many iterations (0: only before and after).
    #[serde(default)]
    pub every: usize,
}

/// Seeds. Episode `i` of system `s` uses `base + 1_000_000 s + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    pub system: u64,
    pub train: u64,
    pub eval: u64,
    pub scenario: u64,
}

pub fn episode_seed(base: u64, system: usize, index: usize) -> u64 {
    base.wrapping_add(1_000_000 * system as u64).wrapping_add(index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    #[serde(rename = "M")]
    pub m: usize,
    pub epsilon: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Sampling ball radius as a multiple of `|theta - theta0|`.
    pub radius_scale: f64,
    /// Risk levels for the sweep CSV.
    #[serde(default)]
    pub epsilons: Vec<f64>,
}

fn default_beta() -> f64 {
    mpc_tune::scenario::DEFAULT_BETA
}

/// Open-loop identification study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SysIdSection {
    pub runs: usize,
    pub iterations: usize,
    pub samples: usize,
    pub delta: f64,
    pub lambda: f64,
    /// Componentwise bound of the additive noise on every state.
    pub noise_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub plant: PlantConfig,
    pub mpc: MpcSection,
    pub cost: CostSection,
    pub tuning: TuningSection,
    pub evaluation: EvaluationSection,
    pub seeds: SeedSection,
    #[serde(default)]
    pub scenario: Option<ScenarioSection>,
    #[serde(default)]
    pub sysid: Option<SysIdSection>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, BenchError> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        let t = &self.tuning;
        if t.modes.is_empty() {
            return bad("tuning.modes is empty".into());
        }
        t.schedule.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        if let Some(s) = &t.ce_schedule {
            s.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        }
        if !(t.delta > 0.0 && t.delta < 1.0) || !(t.lambda > 0.0) || !(t.factor_bound > 0.0) {
            return bad("tuning needs delta in (0, 1), lambda > 0, factor_bound > 0".into());
        }
        if !(t.initial.q > 0.0 && t.initial.r > 0.0 && t.initial.p > 0.0) {
            return bad("initial weights must be positive".into());
        }
        if self.mpc.horizon == 0 || !(self.mpc.c1 >= 0.0 && self.mpc.c2 > 0.0) {
            return bad("mpc needs horizon >= 1, c1 >= 0, c2 > 0".into());
        }
        if !(self.cost.q_scale >= 0.0 && self.cost.r_scale >= 0.0 && self.cost.c3 >= 0.0) {
            return bad("cost scales must be nonnegative".into());
        }
        if self.evaluation.episodes == 0 {
            return bad("evaluation.episodes must be positive".into());
        }
        match &self.plant {
            PlantConfig::RandomLinear { n_systems, spec } => {
                if *n_systems == 0 || spec.n_x == 0 || spec.horizon == 0 || !(spec.dt > 0.0) {
                    return bad("random_linear needs n_systems, n_x, horizon >= 1 and dt > 0".into());
                }
            }
            PlantConfig::Lateral { spec, .. } => {
                if spec.horizon == 0 || !(spec.alpha_theta > 0.0) {
                    return bad("lateral needs horizon >= 1 and alpha_theta > 0".into());
                }
            }
        }
        if let Some(s) = &self.scenario {
            if s.m == 0 || !(s.epsilon > 0.0 && s.epsilon < 1.0) || !(s.beta > 0.0 && s.beta < 1.0) || !(s.radius_scale > 0.0) {
                return bad("scenario needs M >= 1, epsilon and beta in (0, 1), radius_scale > 0".into());
            }
        }
        if let Some(s) = &self.sysid {
            if s.runs == 0 || s.iterations == 0 || s.samples == 0 || !(s.delta > 0.0 && s.delta < 1.0) || !(s.lambda > 0.0) {
                return bad("sysid needs positive counts, delta in (0, 1), lambda > 0".into());
            }
        }
        Ok(())
    }

    pub fn schedule_for(&self, mode: Mode) -> &StepSchedule {
        match mode {
            Mode::Ce => self.tuning.ce_schedule.as_ref().unwrap_or(&self.tuning.schedule),
            _ => &self.tuning.schedule,
        }
    }
}
