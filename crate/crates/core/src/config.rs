//! Run configuration file: simulator, encoder and policy constants plus an
//! optional template table.
//!
//! ```toml
//! [sim]
//! dt = 0.1
//! perception_radius = 50.0
//!
//! [encoder]
//! hidden = 64
//!
//! [policy]
//! reaction_range = 12.0
//!
//! [templates.S3_crossing]
//! ego_start_speed = [6.0, 10.0]
//! # ...
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TemplateTable;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::policy::DrivingPolicy;
use crate::sim::SimConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub encoder: EncoderConfig,
    pub policy: DrivingPolicy,
    /// Replaces the bundled template table when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<TemplateTable>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate().map_err(Error::Config)?;
        self.encoder.validate().map_err(Error::Config)?;
        self.policy.validate().map_err(Error::Config)?;
        if let Some(t) = &self.templates {
            t.validate()?;
        }
        Ok(())
    }

    pub fn template_table(&self) -> TemplateTable {
        self.templates.clone().unwrap_or_default()
    }
}
