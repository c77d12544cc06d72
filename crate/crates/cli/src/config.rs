//! Tool configuration: named backends plus per-command settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use splitreason::annotate::{MatchConfig, PromptTemplate};
use splitreason::backend::{
    Backend, HttpBackend, HttpBackendConfig, Role, ScriptedBackend, ScriptedBehavior,
};
use splitreason::orchestrator::RunConfig;
use splitreason::perfsim::SimConfig;
use splitreason::reward::RewardConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendSpec {
    /// Replays a script file; the path is relative to the config file.
    Scripted { script: PathBuf },
    /// OpenAI-compatible completions server. Only the name of the auth
    /// environment variable is ever stored.
    Http(HttpBackendConfig),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSection {
    pub small: Option<String>,
    pub large: Option<String>,
    #[serde(flatten)]
    pub config: RunConfig,
}

fn default_retries() -> u32 {
    2
}

fn default_bins() -> usize {
    splitreason::annotate::DEFAULT_BINS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateSection {
    /// Backend used for records that arrive without snippets.
    #[serde(default)]
    pub annotator: Option<String>,
    /// Prompt template file containing the `{trace}` placeholder.
    #[serde(default)]
    pub template: Option<PathBuf>,
    /// Extra attempts after a retriable annotator failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        Self {
            annotator: None,
            template: None,
            retries: default_retries(),
            bins: default_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default, rename = "match")]
    pub matching: MatchConfig,
    #[serde(default)]
    pub annotate: AnnotateSection,
    #[serde(default)]
    pub sim: SimConfig,
}

/// A loaded config: scripts and templates are read eagerly so that missing
/// files fail at load time.
#[derive(Debug, Clone, Default)]
pub struct LoadedConfig {
    pub tool: ToolConfig,
    pub base_dir: PathBuf,
    scripts: BTreeMap<String, ScriptedBehavior>,
    template: Option<PromptTemplate>,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base).with_context(|| format!("in config {}", path.display()))
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let tool: ToolConfig = toml::from_str(text)?;
        let mut scripts = BTreeMap::new();
        for (name, spec) in &tool.backends {
            if let BackendSpec::Scripted { script } = spec {
                let path = base_dir.join(script);
                let behavior = ScriptedBehavior::load(&path).with_context(|| {
                    format!("backend `{name}`: loading script {}", path.display())
                })?;
                scripts.insert(name.clone(), behavior);
            }
        }
        for name in [&tool.run.small, &tool.run.large, &tool.annotate.annotator]
            .into_iter()
            .flatten()
        {
            if !tool.backends.contains_key(name) {
                bail!("unknown backend `{name}`");
            }
        }
        tool.run
            .config
            .validate()
            .map_err(anyhow::Error::msg)
            .context("[run]")?;
        tool.reward.validate().context("[reward]")?;
        tool.matching
            .validate()
            .map_err(anyhow::Error::msg)
            .context("[match]")?;
        tool.sim.validate().context("[sim]")?;
        let template = match &tool.annotate.template {
            Some(p) => {
                let path = base_dir.join(p);
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading template {}", path.display()))?;
                Some(PromptTemplate::new(text)?)
            }
            None => None,
        };
        Ok(Self {
            tool,
            base_dir: base_dir.to_path_buf(),
            scripts,
            template,
        })
    }

    pub fn template(&self) -> Option<&PromptTemplate> {
        self.template.as_ref()
    }

    /// A fresh session on the named backend.
    pub fn backend(&self, name: &str, role: Role) -> Result<Box<dyn Backend>> {
        let spec = self
            .tool
            .backends
            .get(name)
            .with_context(|| format!("unknown backend `{name}`"))?;
        Ok(match spec {
            BackendSpec::Scripted { .. } => {
                let behavior = self.scripts[name].clone();
                Box::new(ScriptedBackend::new(behavior, role)?)
            }
            BackendSpec::Http(cfg) => Box::new(HttpBackend::new(cfg.clone(), role)?),
        })
    }

    /// Names of the small and large backends for `run`.
    pub fn run_pair(&self) -> Result<(&str, &str)> {
        match (&self.tool.run.small, &self.tool.run.large) {
            (Some(s), Some(l)) => Ok((s, l)),
            _ => bail!("[run] must name both a `small` and a `large` backend"),
        }
    }
}
