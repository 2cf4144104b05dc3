//! Runtime configuration, loaded from one TOML file.
//!
//! ```toml
//! chunk_seconds = 2.0
//! device = "cabin"
//!
//! [devices.cabin]
//! chunk_seconds = 1.0
//!
//! [kv]
//! p_percent = 25.0
//!
//! [skills]
//! dir = "../skills"
//! ```
//!
//! Relative `skills.dir` paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::kv::PruneConfig;
use crate::memory::HmeParams;
use crate::proactive::ProactiveConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Per-device overrides of the stream parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceOverride {
    pub chunk_seconds: Option<f64>,
    pub cache_max_frames: Option<usize>,
    pub slow_stride: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkillsConfig {
    pub dir: Option<PathBuf>,
    /// Skills loaded at startup; their label triggers become persistent nodes.
    pub load: Vec<String>,
}

/// Keyword-to-call mapping used to draft agent steps for the mock backend.
/// String arguments equal to `$query` are replaced with the user query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intent {
    pub keywords: Vec<String>,
    #[serde(default)]
    pub skill: Option<String>,
    pub call: String,
    #[serde(default)]
    pub args: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub max_steps: usize,
    pub intents: Vec<Intent>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_steps: 8,
            intents: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub queue_cap: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self { queue_cap: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub chunk_seconds: f64,
    pub cache_max_frames: usize,
    pub slow_stride: usize,
    pub device: Option<String>,
    pub devices: BTreeMap<String, DeviceOverride>,
    pub kv: PruneConfig,
    pub memory: HmeParams,
    pub proactive: ProactiveConfig,
    pub skills: SkillsConfig,
    pub agent: AgentConfig,
    pub gateway: GatewayConfig,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            chunk_seconds: 2.0,
            cache_max_frames: 256,
            slow_stride: 5,
            device: None,
            devices: BTreeMap::new(),
            kv: PruneConfig::default(),
            memory: HmeParams::default(),
            proactive: ProactiveConfig::default(),
            skills: SkillsConfig::default(),
            agent: AgentConfig::default(),
            gateway: GatewayConfig::default(),
        }
    }
}

impl RuntimeConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RuntimeConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        let cfg = cfg.resolved()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        if let Some(dir) = cfg.skills.dir.as_mut() {
            if dir.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    /// Applies the selected device's overrides.
    pub fn resolved(mut self) -> Result<Self, ConfigError> {
        if let Some(name) = self.device.clone() {
            let o = self
                .devices
                .get(&name)
                .ok_or_else(|| ConfigError::Invalid(format!("device {name:?} has no [devices.{name}] table")))?
                .clone();
            if let Some(v) = o.chunk_seconds {
                self.chunk_seconds = v;
            }
            if let Some(v) = o.cache_max_frames {
                self.cache_max_frames = v;
            }
            if let Some(v) = o.slow_stride {
                self.slow_stride = v;
            }
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.chunk_seconds > 0.0) || (self.chunk_seconds * 1000.0).round() < 1.0 {
            return fail("chunk_seconds must be at least 0.001");
        }
        if self.cache_max_frames == 0 {
            return fail("cache_max_frames must be positive");
        }
        if self.slow_stride == 0 {
            return fail("slow_stride must be positive");
        }
        if self.agent.max_steps == 0 {
            return fail("agent.max_steps must be positive");
        }
        if self.gateway.queue_cap == 0 {
            return fail("gateway.queue_cap must be positive");
        }
        if self.memory.batch_size == 0 || self.memory.wave_batches == 0 {
            return fail("memory.batch_size and memory.wave_batches must be positive");
        }
        self.kv.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
