use std::path::Path;

use refinery::distill::{GradSuiteConfig, RefineConfig};
use refinery::synth::TeacherSpec;
use refinery::vit::ViTConfig;
use serde::{Deserialize, Serialize};

use crate::commands::Fail;

/// The single config document. Thresholds and pixel normalization live in
/// `refine` and are shared by every command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ViTConfig,
    pub teacher: TeacherSpec,
    pub refine: RefineConfig,
    pub gradcheck: GradSuiteConfig,
}

pub fn load(path: Option<&Path>) -> Result<Config, Fail> {
    let cfg: Config = match path {
        None => Config::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Fail::io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Fail::validation(format!("{}: {e}", p.display())))?
        }
    };
    cfg.model.validate()?;
    cfg.refine.validate()?;
    Ok(cfg)
}
