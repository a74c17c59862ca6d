//! Experiment configuration files (JSON or TOML).
//!
//! Each top-level section is decoded on its own and then checked
//! semantically, so one pass reports every problem in the file.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use staleracer_core::adasync::{AdaSyncConfig, Rounding};
use staleracer_core::objective::{Logistic, LogisticRecipe, Quadratic};
use staleracer_core::sim::{Horizon, Seeds, SimOptions};
use staleracer_core::{DelayDistribution, GradientOracle, NoiseModel, Objective, Variant, VariantConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    /// Diagonal quadratic, either with explicit eigenvalues or a log-spaced
    /// spectrum from `c` to `l`.
    Quadratic {
        #[serde(default)]
        eigenvalues: Option<Vec<f64>>,
        #[serde(default)]
        w_star: Option<Vec<f64>>,
        #[serde(default)]
        f_star: f64,
        #[serde(default)]
        c: Option<f64>,
        #[serde(default)]
        l: Option<f64>,
        #[serde(default)]
        dim: Option<usize>,
    },
    Logistic(LogisticRecipe),
}

impl ObjectiveSpec {
    pub fn quadratic_testbed(c: f64, l: f64, dim: usize) -> Self {
        ObjectiveSpec::Quadratic { eigenvalues: None, w_star: None, f_star: 0.0, c: Some(c), l: Some(l), dim: Some(dim) }
    }

    pub fn build(&self) -> Result<Objective, String> {
        match self {
            ObjectiveSpec::Quadratic { eigenvalues: Some(ev), w_star, f_star, .. } => {
                let w_star = w_star.clone().unwrap_or_else(|| vec![0.0; ev.len()]);
                Quadratic::new(ev.clone(), w_star, *f_star).map(Objective::Quadratic).map_err(|e| e.to_string())
            }
            ObjectiveSpec::Quadratic { c: Some(c), l: Some(l), dim: Some(d), .. } => {
                Quadratic::log_spaced(*c, *l, *d).map(Objective::Quadratic).map_err(|e| e.to_string())
            }
            ObjectiveSpec::Quadratic { .. } => {
                Err("quadratic objective needs either `eigenvalues` or all of `c`, `l`, `dim`".into())
            }
            ObjectiveSpec::Logistic(recipe) => Logistic::synthetic(recipe).map(Objective::Logistic).map_err(|e| e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// `w0 = w* + value·1` (or `value·1` when no minimizer is known).
    Offset { value: f64 },
    Point { w: Vec<f64> },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::Offset { value: 1.0 }
    }
}

impl InitSpec {
    pub fn point(&self, objective: &Objective) -> Vec<f64> {
        match self {
            InitSpec::Offset { value } => match objective.minimizer() {
                Some(w) => w.iter().map(|x| x + value).collect(),
                None => vec![*value; objective.dim()],
            },
            InitSpec::Point { w } => w.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaSyncSection {
    pub k0: usize,
    pub slot_length: f64,
    #[serde(default)]
    pub rounding: Rounding,
    #[serde(default = "yes")]
    pub monotone: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
    pub k_values: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Fraction of updates averaged for the final floor.
    #[serde(default = "default_trailing")]
    pub trailing_fraction: f64,
    /// Excess-loss levels for time-to-target, largest first. Empty means a
    /// single target at twice the best median floor.
    #[serde(default)]
    pub targets: Vec<f64>,
}

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

fn default_replications() -> usize {
    20
}

fn default_trailing() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedupSection {
    pub distributions: Vec<DelayDistribution>,
    pub p_values: Vec<usize>,
    /// Also simulate both protocols for this many iterations.
    #[serde(default)]
    pub simulate_iterations: Option<u64>,
}

impl Default for SpeedupSection {
    fn default() -> Self {
        Self {
            distributions: vec![
                DelayDistribution::exponential(1.0).expect("valid"),
                DelayDistribution::shifted_exponential(1.0, 1.0).expect("valid"),
                DelayDistribution::pareto(2.0, 1.0).expect("valid"),
            ],
            p_values: vec![2, 4, 8, 16, 32],
            simulate_iterations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub distributions: Vec<DelayDistribution>,
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
    /// `(K, P)` pairs.
    pub shapes: Vec<(usize, usize)>,
    #[serde(default = "default_verify_iterations")]
    pub iterations: u64,
}

fn default_verify_iterations() -> u64 {
    50_000
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            distributions: vec![
                DelayDistribution::exponential(1.0).expect("valid"),
                DelayDistribution::shifted_exponential(1.0, 1.0).expect("valid"),
                DelayDistribution::pareto(2.0, 1.0).expect("valid"),
                DelayDistribution::hyper_exponential(vec![0.5, 0.5], vec![1.0, 10.0]).expect("valid"),
            ],
            variants: all_variants(),
            shapes: vec![(1, 8), (2, 8), (4, 8), (8, 8)],
            iterations: default_verify_iterations(),
        }
    }
}

/// A full experiment description. Every section is optional at parse time;
/// each subcommand states which ones it needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub delays: Option<DelayDistribution>,
    pub variant: Option<VariantConfig>,
    pub objective: Option<ObjectiveSpec>,
    pub noise: Option<NoiseModel>,
    pub init: InitSpec,
    pub horizon: Option<Horizon>,
    pub seeds: Option<Seeds>,
    pub options: SimOptions,
    pub adasync: Option<AdaSyncSection>,
    pub sweep: Option<SweepSection>,
    pub speedup: Option<SpeedupSection>,
    pub verify: Option<VerifySection>,
}

/// Every problem found in a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration error(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

const SECTIONS: [&str; 12] =
    ["delays", "variant", "objective", "noise", "init", "horizon", "seeds", "options", "adasync", "sweep", "speedup", "verify"];

fn section<T: DeserializeOwned>(root: &serde_json::Map<String, Value>, key: &str, errors: &mut Vec<String>) -> Option<T> {
    let value = root.get(key)?;
    match serde_json::from_value(value.clone()) {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("{key}: {e}"));
            None
        }
    }
}

/// Sections a subcommand cannot run without.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Need {
    Simulation,
    AdaSync,
    Sweep,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigErrors> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigErrors(vec![format!("invalid JSON: {e}")]))?;
        Self::from_value(value)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigErrors> {
        let table: toml::Table = toml::from_str(text).map_err(|e| ConfigErrors(vec![format!("invalid TOML: {e}")]))?;
        let value = serde_json::to_value(table).map_err(|e| ConfigErrors(vec![e.to_string()]))?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self, ConfigErrors> {
        let Value::Object(root) = value else {
            return Err(ConfigErrors(vec!["configuration must be a table/object".into()]));
        };
        let mut errors = Vec::new();
        for key in root.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                errors.push(format!("unknown section `{key}` (expected one of {})", SECTIONS.join(", ")));
            }
        }
        let cfg = ExperimentConfig {
            delays: section(&root, "delays", &mut errors),
            variant: section(&root, "variant", &mut errors),
            objective: section(&root, "objective", &mut errors),
            noise: section(&root, "noise", &mut errors),
            init: section(&root, "init", &mut errors).unwrap_or_default(),
            horizon: section(&root, "horizon", &mut errors),
            seeds: section(&root, "seeds", &mut errors),
            options: section(&root, "options", &mut errors).unwrap_or_default(),
            adasync: section(&root, "adasync", &mut errors),
            sweep: section(&root, "sweep", &mut errors),
            speedup: section(&root, "speedup", &mut errors),
            verify: section(&root, "verify", &mut errors),
        };
        errors.extend(cfg.semantic_errors(&[]));
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigErrors(errors))
        }
    }

    /// Checks the sections a subcommand needs, plus cross-section consistency.
    pub fn require(&self, needs: &[Need]) -> Result<(), ConfigErrors> {
        let errors = self.semantic_errors(needs);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errors))
        }
    }

    fn semantic_errors(&self, needs: &[Need]) -> Vec<String> {
        let mut errors = Vec::new();
        let simulation = needs.iter().any(|n| matches!(n, Need::Simulation | Need::AdaSync | Need::Sweep));
        if simulation {
            for (present, name) in [
                (self.delays.is_some(), "delays"),
                (self.variant.is_some(), "variant"),
                (self.objective.is_some(), "objective"),
                (self.noise.is_some(), "noise"),
                (self.horizon.is_some(), "horizon"),
            ] {
                if !present {
                    errors.push(format!("missing section `{name}`"));
                }
            }
        }
        if needs.contains(&Need::AdaSync) && self.adasync.is_none() {
            errors.push("missing section `adasync`".into());
        }
        if needs.contains(&Need::Sweep) && self.sweep.is_none() {
            errors.push("missing section `sweep`".into());
        }

        if let Some(v) = &self.variant {
            if let Err(e) = v.validate() {
                errors.push(format!("variant: {e}"));
            }
        }
        let objective = match &self.objective {
            Some(spec) => match spec.build() {
                Ok(o) => Some(o),
                Err(e) => {
                    errors.push(format!("objective: {e}"));
                    None
                }
            },
            None => None,
        };
        if let (Some(obj), Some(noise), Some(v)) = (&objective, &self.noise, &self.variant) {
            if let Err(e) = GradientOracle::new(Arc::new(obj.clone()), *noise, v.m) {
                errors.push(format!("noise: {e}"));
            }
        }
        if let (Some(obj), InitSpec::Point { w }) = (&objective, &self.init) {
            if w.len() != obj.dim() {
                errors.push(format!("init: point has dimension {}, objective has {}", w.len(), obj.dim()));
            }
        }
        if let InitSpec::Offset { value } = self.init {
            if !value.is_finite() {
                errors.push("init: offset must be finite".into());
            }
        }
        match self.horizon {
            Some(Horizon::Iterations(0)) => errors.push("horizon: iterations must be positive".into()),
            Some(Horizon::SimTime(t)) if !(t.is_finite() && t > 0.0) => {
                errors.push(format!("horizon: sim_time must be positive, got {t}"))
            }
            _ => {}
        }
        if let (Some(a), Some(v)) = (&self.adasync, &self.variant) {
            let cfg = AdaSyncConfig {
                variant: v.variant,
                k0: a.k0,
                p: v.p,
                slot_length: a.slot_length,
                rounding: a.rounding,
                monotone: a.monotone,
            };
            if let Err(e) = cfg.validate() {
                errors.push(format!("adasync: {e}"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.k_values.is_empty() {
                errors.push("sweep: k_values is empty".into());
            }
            if s.variants.is_empty() {
                errors.push("sweep: variants is empty".into());
            }
            if let Some(v) = &self.variant {
                for &k in &s.k_values {
                    if k == 0 || k > v.p {
                        errors.push(format!("sweep: K={k} outside [1, P={}]", v.p));
                    }
                }
            }
            if s.targets.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
                errors.push("sweep: targets must be positive".into());
            }
            if s.targets.windows(2).any(|w| w[1] >= w[0]) {
                errors.push("sweep: targets must be strictly decreasing".into());
            }
            if s.replications == 0 {
                errors.push("sweep: replications must be positive".into());
            }
            if !(s.trailing_fraction > 0.0 && s.trailing_fraction <= 1.0) {
                errors.push(format!("sweep: trailing_fraction must lie in (0, 1], got {}", s.trailing_fraction));
            }
        }
        if let Some(s) = &self.speedup {
            if s.p_values.contains(&0) {
                errors.push("speedup: P values must be positive".into());
            }
            if s.simulate_iterations.is_some_and(|n| n < 100) {
                errors.push("speedup: simulate_iterations must be at least 100".into());
            }
        }
        if let Some(v) = &self.verify {
            for &(k, p) in &v.shapes {
                if k == 0 || k > p {
                    errors.push(format!("verify: shape (K={k}, P={p}) needs 1 ≤ K ≤ P"));
                }
            }
            if v.iterations < 100 {
                errors.push("verify: iterations must be at least 100".into());
            }
        }
        errors
    }

    pub fn seeds_or(&self, base: u64) -> Seeds {
        self.seeds.unwrap_or(Seeds::new(base, base.wrapping_add(1)))
    }
}

/// Objects built from a validated configuration.
#[derive(Debug, Clone)]
pub struct Built {
    pub delays: DelayDistribution,
    pub variant: VariantConfig,
    pub oracle: GradientOracle,
    pub w0: Vec<f64>,
    pub horizon: Horizon,
    pub f_star: f64,
}

impl Built {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, ConfigErrors> {
        cfg.require(&[Need::Simulation])?;
        let err = |e: String| ConfigErrors(vec![e]);
        let objective = cfg.objective.as_ref().expect("checked").build().map_err(err)?;
        let variant = cfg.variant.expect("checked");
        let w0 = cfg.init.point(&objective);
        let f_star = objective.f_star().unwrap_or(0.0);
        let oracle = GradientOracle::new(Arc::new(objective), cfg.noise.expect("checked"), variant.m)
            .map_err(|e| err(e.to_string()))?;
        Ok(Self {
            delays: cfg.delays.clone().expect("checked"),
            variant,
            oracle,
            w0,
            horizon: cfg.horizon.expect("checked"),
            f_star,
        })
    }
}
