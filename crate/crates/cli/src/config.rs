use std::path::{Path, PathBuf};

use anyhow::Context;
use cloudsched_core::gnn::TrainConfig;
use cloudsched_core::sim::{PriceSource, SimConfig, WorkloadSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Quiet,
    #[default]
    Normal,
    Verbose,
}

/// Training knobs beyond the optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub episodes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_clusters: usize,
    /// Clusters per state graph for the GCN scorer.
    pub clusters: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            episodes: 10,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_clusters: t.batch_clusters,
            clusters: 2,
            seed: t.seed,
        }
    }
}

impl TrainSection {
    pub fn optimiser(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_clusters: self.batch_clusters,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub out: PathBuf,
    pub verbosity: Verbosity,
    pub sim: SimConfig,
    pub train: TrainSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            verbosity: Verbosity::Normal,
            sim: SimConfig::default(),
            train: TrainSection::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: CliConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Makes relative paths inside the file relative to the file itself.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(model) = &mut self.sim.model {
            fix(model);
        }
        match &mut self.sim.workload {
            WorkloadSpec::TraceDir { path, .. } | WorkloadSpec::File { path } => fix(path),
            WorkloadSpec::Synthetic { .. } | WorkloadSpec::Inline { .. } => {}
        }
        if let PriceSource::File { path } = &mut self.sim.prices {
            fix(path);
        }
    }

    /// Reseeds everything random: workload, prices, policy and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.train.seed = seed;
        match &mut self.sim.workload {
            WorkloadSpec::Synthetic { seed: s } | WorkloadSpec::TraceDir { seed: s, .. } => *s = seed,
            WorkloadSpec::File { .. } | WorkloadSpec::Inline { .. } => {}
        }
        if let PriceSource::Synthetic { seed: s } = &mut self.sim.prices {
            *s = seed;
        }
    }
}
