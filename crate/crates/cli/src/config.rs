use std::path::Path;

use anyhow::Context;
use probe_core::eval::{EvalConfig, ModelConfig};
use probe_core::synth::SynthConfig;
use probe_core::ProbeError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremSettings {
    pub samples: usize,
    pub sweeps: usize,
    pub sweep_points: usize,
    pub bias_settings: usize,
}

impl Default for TheoremSettings {
    fn default() -> Self {
        Self {
            samples: 1000,
            sweeps: 20,
            sweep_points: 400,
            bias_settings: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    pub min_user_records: usize,
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self { min_user_records: 20 }
    }
}

/// One JSON document per run; every field has a default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub theorems: TheoremSettings,
    pub report: ReportSettings,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| {
            ProbeError::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            }
            .into()
        })
    }

    /// Propagates the master seed into every component.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.model.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.synth.seed = self.seed;
        self
    }
}
