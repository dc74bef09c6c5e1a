//! TOML run configuration.
//!
//! ```toml
//! preset = "hard-truck"      # benchmark profile the [benchmark] keys override
//! seeds = 5
//! strategies = ["naive", "mono", "bp", "bmp", "bmd"]
//!
//! [benchmark]
//! noise = 0.5
//!
//! [source]
//! feature_dim = 8
//!
//! [adaptation]
//! epochs = 30
//! alpha = 0.3
//! beta = 0.1
//! ```
//!
//! Every key is optional. Unknown keys are rejected.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use bmd_core::benchmark::BenchmarkProfile;
use bmd_core::engine::{AdaptationConfig, ExperimentConfig, SourceConfig, Strategy};
use serde::{Deserialize, Serialize};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    seeds: Option<usize>,
    strategies: Option<Vec<Strategy>>,
    benchmark: Option<toml::Table>,
    #[serde(default)]
    source: SourceConfig,
    #[serde(default)]
    adaptation: AdaptationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfigFile {
    pub preset: String,
    pub seeds: usize,
    pub strategies: Vec<Strategy>,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            preset: "hard-truck".into(),
            seeds: 5,
            strategies: Strategy::ALL.to_vec(),
            experiment: ExperimentConfig::default(),
        }
    }
}

fn describe(e: &toml::de::Error, text: &str) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {}", e.message())
        }
        None => e.message().to_string(),
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfigFile> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| anyhow!("{}", describe(&e, text)))?;
    let preset = raw.preset.unwrap_or_else(|| "hard-truck".into());
    let mut profile = BenchmarkProfile::by_name(&preset)
        .ok_or_else(|| anyhow!("unknown preset '{preset}' (valid: hard-truck, separable, zero-shift)"))?;
    if let Some(overrides) = raw.benchmark {
        let mut table = toml::Table::try_from(&profile).context("serializing benchmark preset")?;
        for (k, v) in overrides {
            table.insert(k, v);
        }
        profile = table
            .try_into()
            .map_err(|e: toml::de::Error| anyhow!("[benchmark]: {}", e.message()))?;
    }
    let cfg = RunConfigFile {
        preset,
        seeds: raw.seeds.unwrap_or(5),
        strategies: raw.strategies.unwrap_or_else(|| Strategy::ALL.to_vec()),
        experiment: ExperimentConfig {
            benchmark: profile,
            source: raw.source,
            adaptation: raw.adaptation,
        },
    };
    if cfg.seeds == 0 {
        return Err(anyhow!("seeds must be >= 1"));
    }
    if cfg.strategies.is_empty() {
        return Err(anyhow!("strategies must not be empty"));
    }
    cfg.experiment.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_run_config(&text).with_context(|| format!("invalid config {}", path.display()))
}
