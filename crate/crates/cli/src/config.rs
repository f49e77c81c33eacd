use std::path::{Path, PathBuf};

use alphachain_core::backtest::StrategyConfig;
use alphachain_core::chains::{ChainConfig, MiningSettings};
use alphachain_core::combiner::CombinerConfig;
use alphachain_core::expr::ExprLimits;
use alphachain_core::llm::{BackendConfig, BackendKind};
use alphachain_core::metrics::MetricConfig;
use alphachain_core::panel::DEFAULT_HORIZON;
use alphachain_core::pool::Thresholds;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub days: usize,
    pub instruments: usize,
    pub signal_strength: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            seed: 42,
            days: 500,
            instruments: 50,
            signal_strength: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub valid: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { train: 0.6, valid: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Long-format panel CSV; mutually exclusive with `synth`.
    pub csv: Option<PathBuf>,
    pub synth: Option<SynthSection>,
    pub split: SplitSection,
    /// Forward-return horizon in trading days.
    pub horizon: usize,
    /// Optional `date,return` benchmark file for the backtest.
    pub benchmark_csv: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            csv: None,
            synth: None,
            split: SplitSection::default(),
            horizon: DEFAULT_HORIZON,
            benchmark_csv: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub chains: ChainConfig,
    pub llm: BackendConfig,
    pub thresholds: Thresholds,
    pub combiner: CombinerConfig,
    pub backtest: StrategyConfig,
    pub limits: ExprLimits,
    pub metrics: MetricConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub budget: Option<u64>,
    pub parallel: Option<usize>,
}

fn invalid(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::ConfigInvalid {
        field: field.into(),
        reason: reason.to_string(),
    }
}

impl RunConfig {
    /// Reads `path` (or the synthetic defaults when absent), applies overrides, resolves
    /// relative paths against the config file's directory and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| invalid("--config", format!("{}: {e}", p.display())))?;
                let de = toml::de::Deserializer::parse(&text).map_err(|e| invalid("<file>", e.message()))?;
                let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
                    let field = e.path().to_string();
                    invalid(&field, e.into_inner().message())
                })?;
                (cfg, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => {
                let mut cfg = RunConfig::default();
                cfg.data.synth = Some(SynthSection::default());
                (cfg, PathBuf::new())
            }
        };
        cfg.apply(overrides);
        cfg.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.chains.rng_seed = seed;
            if let Some(s) = self.data.synth.as_mut() {
                s.seed = seed;
            }
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = Some(dir.clone());
        }
        if let Some(kind) = o.backend {
            self.llm.kind = kind;
        }
        if let Some(b) = o.budget {
            self.chains.total_budget = b;
        }
        if let Some(p) = o.parallel {
            self.chains.max_parallel_opt_chains = p;
        }
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.data.csv.as_mut() {
            join(p);
        }
        if let Some(p) = self.data.benchmark_csv.as_mut() {
            join(p);
        }
        match self.output_dir.as_mut() {
            Some(p) => join(p),
            None => self.output_dir = Some(base.join("output")),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.data.csv, &self.data.synth) {
            (Some(_), Some(_)) => return Err(invalid("data", "set exactly one of csv and synth, not both")),
            (None, None) => return Err(invalid("data", "set exactly one of csv and synth")),
            _ => {}
        }
        if let Some(p) = &self.data.csv {
            if !p.is_file() {
                return Err(invalid("data.csv", format!("{} is not a readable file", p.display())));
            }
        }
        if let Some(p) = &self.data.benchmark_csv {
            if !p.is_file() {
                return Err(invalid("data.benchmark_csv", format!("{} is not a readable file", p.display())));
            }
        }
        if let Some(s) = &self.data.synth {
            if s.days < 60 || s.instruments < 5 {
                return Err(invalid("data.synth", "needs at least 60 days and 5 instruments"));
            }
            if !(0.0..=1.0).contains(&s.signal_strength) {
                return Err(invalid("data.synth.signal_strength", "must lie in [0, 1]"));
            }
        }
        let sp = self.data.split;
        if !(sp.train > 0.0 && sp.valid > 0.0 && sp.train + sp.valid < 1.0) {
            return Err(invalid("data.split", "train and valid must be positive with train + valid < 1"));
        }
        if self.data.horizon == 0 {
            return Err(invalid("data.horizon", "must be at least 1"));
        }
        self.chains.validate().map_err(|e| invalid("chains", e))?;
        self.llm.validate().map_err(|e| invalid("llm", e))?;
        self.combiner.validate().map_err(|e| invalid("combiner", e))?;
        self.backtest.validate().map_err(|e| invalid("backtest", e))?;
        self.metrics.validate().map_err(|e| invalid("metrics", e))?;
        let t = &self.thresholds;
        if ![t.min_strength, t.min_consistency, t.max_efficiency, t.min_diversity]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(invalid("thresholds", "all thresholds must be finite"));
        }
        if self.limits.max_depth == 0 || self.limits.max_nodes == 0 || self.limits.max_window == 0 {
            return Err(invalid("limits", "limits must be at least 1"));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir.as_deref().expect("resolved at load")
    }

    pub fn mining_settings(&self) -> MiningSettings {
        MiningSettings {
            chain: self.chains.clone(),
            limits: self.limits.clone(),
            thresholds: self.thresholds,
            metrics: self.metrics,
        }
    }
}
