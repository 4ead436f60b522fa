use std::path::Path;

use atlasfuse::fusion::FusionConfig;
use atlasfuse::phantom::PhantomParams;
use atlasfuse::registration::RegistrationConfig;
use atlasfuse::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "OASIS_SEED";

/// Shared configuration file. Every section and key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub registration: RegistrationConfig,
    pub fusion: FusionConfig,
    pub phantom: PhantomParams,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => serde_json::from_slice(&std::fs::read(p)?).map_err(|e| Error::Format {
                path: p.to_path_buf(),
                reason: e.to_string(),
            }),
        }
    }

    /// Seed precedence: command-line flag, then `OASIS_SEED`, then the file.
    /// An override applies to every section; otherwise each keeps its own.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::InvalidParams(format!("{SEED_ENV}={v:?}: {e}")))?,
            ),
            Err(_) => None,
        };
        if let Some(seed) = flag.or(env) {
            self.phantom.seed = seed;
            self.registration.seed = seed;
        }
        Ok(self.phantom.seed)
    }
}
