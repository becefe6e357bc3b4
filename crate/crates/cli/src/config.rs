use std::path::{Path, PathBuf};

use causal_kmeans::eif::{SemiMethod, SemiOptions};
use causal_kmeans::{
    Error, Estimator, FeatureSpec, LloydOptions, NuisanceSpec, OutcomeSpec, Parametrization,
    Result, SimConfig,
};
use serde::Deserialize;
use toml::{Table, Value};

/// Run configuration as written in the TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_estimator")]
    pub estimator: String,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_parametrization")]
    pub parametrization: String,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub plots: bool,
    pub input: Option<InputConfig>,
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub path: PathBuf,
    #[serde(default = "default_arms")]
    pub arms: usize,
    /// Fitted centers, needed by `diagnose`.
    pub centers: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_ns")]
    pub ns: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Sample size used by `fit`, `diagnose` and `generate`.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_eval_draws")]
    pub eval_draws: usize,
    #[serde(default)]
    pub oracle_nuisances: bool,
    pub estimators: Option<Vec<String>>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            delta: default_delta(),
            sigma: default_sigma(),
            ns: default_ns(),
            reps: default_reps(),
            n: default_n(),
            eval_draws: default_eval_draws(),
            oracle_nuisances: false,
            estimators: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceConfig {
    #[serde(default = "default_outcome")]
    pub outcome: String,
    #[serde(default = "default_outcome_features")]
    pub outcome_features: Vec<usize>,
    #[serde(default = "default_degree")]
    pub outcome_degree: usize,
    pub knn_k: Option<usize>,
    #[serde(default = "default_propensity_features")]
    pub propensity_features: Vec<usize>,
    #[serde(default = "default_degree")]
    pub propensity_degree: usize,
    #[serde(default = "default_clip")]
    pub clip_epsilon: f64,
    #[serde(default = "default_true")]
    pub ridge_fallback: bool,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            outcome: default_outcome(),
            outcome_features: default_outcome_features(),
            outcome_degree: default_degree(),
            knn_k: None,
            propensity_features: default_propensity_features(),
            propensity_degree: default_degree(),
            clip_epsilon: default_clip(),
            ridge_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Option<String>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub lloyd_tol: Option<f64>,
    pub lloyd_max_iter: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    #[serde(default = "default_k_min")]
    pub k_min: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<f64>,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig { k_min: default_k_min(), k_max: default_k_max(), t_grid: default_t_grid() }
    }
}

fn default_seed() -> u64 {
    20_240_601
}
fn default_k() -> usize {
    6
}
fn default_estimator() -> String {
    "semiparametric".into()
}
fn default_folds() -> usize {
    5
}
fn default_restarts() -> usize {
    10
}
fn default_parametrization() -> String {
    "levels".into()
}
fn default_arms() -> usize {
    2
}
fn default_delta() -> f64 {
    0.01
}
fn default_sigma() -> f64 {
    0.15
}
fn default_ns() -> Vec<usize> {
    vec![500, 1000, 2000, 4000]
}
fn default_reps() -> usize {
    20
}
fn default_n() -> usize {
    2000
}
fn default_eval_draws() -> usize {
    200_000
}
fn default_outcome() -> String {
    "linear".into()
}
fn default_outcome_features() -> Vec<usize> {
    vec![1, 2]
}
fn default_propensity_features() -> Vec<usize> {
    vec![1, 2, 3]
}
fn default_degree() -> usize {
    1
}
fn default_clip() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_k_min() -> usize {
    1
}
fn default_k_max() -> usize {
    10
}
fn default_t_grid() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}

/// Where the units come from.
pub enum Source<'a> {
    Input(&'a InputConfig),
    Simulation(&'a SimulationConfig),
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Reads the config file (if any) and applies `--set key=value` overrides.
/// With `default_simulation`, a config naming no data source gets an empty
/// simulation block.
pub fn load(path: Option<&Path>, sets: &[String], default_simulation: bool) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| config_err(format!("invalid config {}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for s in sets {
        apply_override(&mut table, s)?;
    }
    if default_simulation && !table.contains_key("input") && !table.contains_key("simulation") {
        table.insert("simulation".into(), Value::Table(Table::new()));
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(format!("invalid config: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// `a.b.c=value`; the value is parsed as a TOML literal and falls back to a
/// plain string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut node = table;
    for part in parents {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{part}` in `{key}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        match (&self.input, &self.simulation) {
            (Some(_), Some(_)) => return Err(config_err("config has both an input and a simulation block")),
            (None, None) => return Err(config_err("config needs an input or a simulation block")),
            _ => {}
        }
        if self.k < 1 {
            return Err(config_err("k must be at least 1"));
        }
        if self.folds < 2 {
            return Err(config_err("folds must be at least 2"));
        }
        if self.restarts < 1 {
            return Err(config_err("restarts must be at least 1"));
        }
        self.estimator()?;
        self.parametrization()?;
        self.nuisance()?;
        self.semi_options()?;
        if let Some(s) = &self.simulation {
            if s.n < 1 {
                return Err(config_err("simulation.n must be positive"));
            }
        }
        if self.diagnose.k_min < 1 || self.diagnose.k_max < self.diagnose.k_min {
            return Err(config_err("diagnose needs 1 <= k_min <= k_max"));
        }
        if self.diagnose.t_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(config_err("t_grid values must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn source(&self) -> Source<'_> {
        match (&self.input, &self.simulation) {
            (Some(i), _) => Source::Input(i),
            (None, Some(s)) => Source::Simulation(s),
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn estimator(&self) -> Result<Estimator> {
        self.estimator.parse()
    }

    pub fn parametrization(&self) -> Result<Parametrization> {
        self.parametrization.parse()
    }

    pub fn nuisance(&self) -> Result<NuisanceSpec> {
        let n = &self.nuisance;
        let outcome = match n.outcome.as_str() {
            "linear" => OutcomeSpec::Linear(FeatureSpec::new(n.outcome_features.clone(), n.outcome_degree)),
            "knn" => OutcomeSpec::Knn { features: n.outcome_features.clone(), k: n.knn_k },
            other => return Err(config_err(format!("unknown outcome model `{other}`"))),
        };
        if !(n.clip_epsilon > 0.0 && n.clip_epsilon < 0.5) {
            return Err(config_err("clip_epsilon must lie in (0, 0.5)"));
        }
        Ok(NuisanceSpec {
            outcome,
            propensity: FeatureSpec::new(n.propensity_features.clone(), n.propensity_degree),
            clip_epsilon: n.clip_epsilon,
            ridge_fallback: n.ridge_fallback,
        })
    }

    pub fn lloyd_options(&self) -> LloydOptions {
        let mut o = LloydOptions::default();
        if let Some(t) = self.optimizer.lloyd_tol {
            o.tol = t;
        }
        if let Some(m) = self.optimizer.lloyd_max_iter {
            o.max_iter = m;
        }
        o
    }

    pub fn semi_options(&self) -> Result<SemiOptions> {
        let mut o = SemiOptions::default();
        if let Some(m) = &self.optimizer.method {
            o.method = m.parse::<SemiMethod>()?;
        }
        if let Some(t) = self.optimizer.tol {
            if t.is_nan() || t <= 0.0 {
                return Err(config_err("optimizer.tol must be positive"));
            }
            o.tol = t;
        }
        o.max_iter = self.optimizer.max_iter.or(o.max_iter);
        Ok(o)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = self
            .simulation
            .as_ref()
            .ok_or_else(|| config_err("simulate needs a simulation block"))?;
        let estimators = match &s.estimators {
            Some(names) => names.iter().map(|n| n.parse()).collect::<Result<Vec<Estimator>>>()?,
            None => vec![Estimator::PlugIn, Estimator::Semiparametric],
        };
        let cfg = SimConfig {
            delta: s.delta,
            sigma: s.sigma,
            ns: s.ns.clone(),
            reps: s.reps,
            seed: self.seed,
            folds: self.folds,
            estimators,
            nuisance: self.nuisance()?,
            oracle_nuisances: s.oracle_nuisances,
            k: self.k,
            restarts: self.restarts,
            lloyd: self.lloyd_options(),
            semi: self.semi_options()?,
            eval_draws: s.eval_draws,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
