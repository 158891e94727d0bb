use std::path::PathBuf;

use latentpaint_core::adaptation::AdaptationConfig;
use latentpaint_core::inversion::RefineConfig;
use latentpaint_core::pipeline::ModelPaths;

#[derive(Debug, thiserror::Error)]
#[error("{var}: cannot parse `{value}`")]
pub struct ConfigError {
    pub var: &'static str,
    pub value: String,
}

/// Server settings; see [`ServiceConfig::from_env`] for the variables.
#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub paths: ModelPaths,
    pub port: u16,
    /// Maximum number of live sessions.
    pub capacity: usize,
    /// Sessions and styles are persisted here when set.
    pub session_dir: Option<PathBuf>,
    pub refine: RefineConfig,
    pub adaptation: AdaptationConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            paths: ModelPaths::named("models", "toy-v1"),
            port: 8080,
            capacity: 16,
            session_dir: None,
            refine: RefineConfig::default(),
            adaptation: AdaptationConfig::default(),
        }
    }
}

fn parsed<T: std::str::FromStr>(var: &'static str, value: Option<String>, into: &mut T) -> Result<(), ConfigError> {
    if let Some(v) = value {
        *into = v.trim().parse().map_err(|_| ConfigError { var, value: v })?;
    }
    Ok(())
}

impl ServiceConfig {
    /// Reads `LATENTPAINT_CHECKPOINT` (model name or `.gen.arc` path),
    /// `LATENTPAINT_MODELS`, `LATENTPAINT_ENCODER`, `LATENTPAINT_CATALOG`,
    /// `LATENTPAINT_PORT`, `LATENTPAINT_CAPACITY`, `LATENTPAINT_SESSION_DIR`,
    /// and the step counts `LATENTPAINT_INVERT_STEPS`,
    /// `LATENTPAINT_PREVIEW_STEPS`, `LATENTPAINT_ADAPT_STEPS`.
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let models = get("LATENTPAINT_MODELS").unwrap_or_else(|| "models".into());
        let checkpoint = get("LATENTPAINT_CHECKPOINT").unwrap_or_else(|| "toy-v1".into());
        c.paths = ModelPaths::resolve(&checkpoint, &models);
        if let Some(p) = get("LATENTPAINT_ENCODER") {
            c.paths.encoder = p.into();
        }
        if let Some(p) = get("LATENTPAINT_CATALOG") {
            c.paths.catalog = p.into();
        }
        c.session_dir = get("LATENTPAINT_SESSION_DIR").map(PathBuf::from);
        parsed("LATENTPAINT_PORT", get("LATENTPAINT_PORT"), &mut c.port)?;
        parsed("LATENTPAINT_CAPACITY", get("LATENTPAINT_CAPACITY"), &mut c.capacity)?;
        parsed("LATENTPAINT_INVERT_STEPS", get("LATENTPAINT_INVERT_STEPS"), &mut c.refine.steps)?;
        parsed("LATENTPAINT_PREVIEW_STEPS", get("LATENTPAINT_PREVIEW_STEPS"), &mut c.adaptation.preview_steps)?;
        parsed("LATENTPAINT_ADAPT_STEPS", get("LATENTPAINT_ADAPT_STEPS"), &mut c.adaptation.steps)?;
        Ok(c)
    }
}
