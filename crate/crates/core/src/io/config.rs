//! Run configuration: fail-closed JSON parsing with full validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, CostPairings};
use crate::denoiser::AggregationState;
use crate::error::{Error, Result};
use crate::schedule::{make_schedule, NoiseSchedule, ScheduleKind};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Cosine,
            steps: 8,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileNames {
    pub style: String,
    pub subject: String,
}

impl Default for ProfileNames {
    fn default() -> Self {
        ProfileNames {
            style: "gram".into(),
            subject: "layout".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingMode {
    Resolved,
    Printed,
}

impl PairingMode {
    pub fn pairings(&self) -> CostPairings {
        match self {
            PairingMode::Resolved => CostPairings::default(),
            PairingMode::Printed => CostPairings::printed(),
        }
    }
}

/// One generation batch: every subject crossed with every style, run
/// once per seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Backbone checkpoint directory.
    pub backbone: PathBuf,
    #[serde(default)]
    pub style_projector: Option<PathBuf>,
    #[serde(default)]
    pub subject_projector: Option<PathBuf>,
    /// Reference images as tensor blobs, [3,H,W] in [0,1].
    pub subject_refs: Vec<PathBuf>,
    pub style_refs: Vec<PathBuf>,
    /// Single prompt for every pair, or one prompt per subject ref.
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub prompts: Option<Vec<String>>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub aggregation: AggregationState,
    #[serde(default)]
    pub descriptors: ProfileNames,
    #[serde(default = "default_pairing")]
    pub pairings: PairingMode,
    pub out_dir: PathBuf,
    /// Master seed; per-run seeds derive from (seed, grid index).
    pub seed: u64,
    /// Per-pair generation seeds (the protocol default is three).
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_pairing() -> PairingMode {
    PairingMode::Resolved
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl RunConfig {
    /// Prompt for subject index `i`.
    pub fn prompt_for(&self, i: usize) -> Result<&str> {
        if let Some(list) = &self.prompts {
            return list
                .get(i)
                .map(|s| s.as_str())
                .ok_or_else(|| Error::Config(format!("prompts: no entry for subject {i}")));
        }
        self.prompt
            .as_deref()
            .ok_or_else(|| Error::Config("config needs `prompt` or `prompts`".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.controller
            .validate()
            .map_err(|e| Error::Config(format!("controller: {e}")))?;
        let agg = &self.aggregation;
        if agg.mu_c < 0.0 {
            return Err(Error::Config("aggregation.mu_c must be >= 0".into()));
        }
        if agg.mu_cap < agg.mu_s0 {
            return Err(Error::Config(format!(
                "aggregation.mu_cap {} below mu_s0 {}",
                agg.mu_cap, agg.mu_s0
            )));
        }
        if self.schedule.steps == 0 {
            return Err(Error::Config("schedule.steps must be >= 1".into()));
        }
        if self.subject_refs.is_empty() || self.style_refs.is_empty() {
            return Err(Error::Config(
                "subject_refs and style_refs must be nonempty".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        match (&self.prompt, &self.prompts) {
            (None, None) => {
                return Err(Error::Config("config needs `prompt` or `prompts`".into()))
            }
            (_, Some(list)) if list.len() != self.subject_refs.len() => {
                return Err(Error::Config(format!(
                    "prompts: {} entries for {} subject refs",
                    list.len(),
                    self.subject_refs.len()
                )))
            }
            _ => {}
        }
        crate::conditioning::style_profile(&self.descriptors.style)?;
        crate::conditioning::subject_profile(&self.descriptors.subject)?;
        // Referenced files must exist at load time.
        let mut missing = Vec::new();
        let mut check = |p: &Path| {
            if !p.exists() {
                missing.push(p.display().to_string());
            }
        };
        check(&self.backbone);
        if let Some(p) = &self.style_projector {
            check(p);
        }
        if let Some(p) = &self.subject_projector {
            check(p);
        }
        for p in self.subject_refs.iter().chain(&self.style_refs) {
            check(p);
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "missing referenced files: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }
}

/// Parses and validates a config, rejecting unknown keys and naming the
/// offending key on type errors.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
    config.validate()?;
    Ok(config)
}

pub fn serialize_config(config: &RunConfig) -> Result<String> {
    serde_json::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))
}
