//! The merged run configuration: a TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use texvit_core::data::CorruptionSpec;
use texvit_core::train::TrainConfig;
use texvit_core::{preset, Error, Result, TexViTConfig};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default = "default_preset")]
    pub preset: String,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub corruption: CorruptionSpec,
}

fn default_preset() -> String {
    "desk".into()
}

impl Default for CliConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config parses")
    }
}

impl CliConfig {
    /// Relative paths in the file resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_manifest, &mut cfg.val_manifest, &mut cfg.checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Everything is checked before any work starts.
    pub fn validate(&self) -> Result<TexViTConfig> {
        let model = preset(&self.preset)?;
        self.training.validate()?;
        self.corruption.validate()?;
        Ok(model)
    }
}
