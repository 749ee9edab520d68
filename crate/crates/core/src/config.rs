//! Run configuration: TOML file, environment and flag overrides, validation.
//!
//! Precedence is flags > environment > file > defaults. Every field can be
//! overridden by its dotted key (`loss.gamma`, `adjudicator.parallelism`).
//! From the environment the key is upper-cased with `.` turned into `__`
//! and prefixed with `SELFTRAIN__`, e.g. `SELFTRAIN__LOSS__GAMMA=0.2`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjudicator::{
    Adjudicator, Agent, AgentPersona, AgentRole, HttpTransport, MockAgent, PromptTemplates, RetryPolicy, ScriptEntry,
    Transport,
};
use crate::data::{Dataset, Split};
use crate::features::FeatureConfig;
use crate::loss::LossConfig;

pub const ENV_PREFIX: &str = "SELFTRAIN__";
pub const DEFAULT_API_KEY_ENV: &str = "SELFTRAIN_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{key}`: {message}")]
    Override { key: String, message: String },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Acceptance {
    /// Accept a round when dev Macro-F1 is at least the previous value.
    #[default]
    NonStrict,
    /// Accept only on a strict improvement.
    Strict,
}

impl Acceptance {
    pub fn accepts(self, after: f64, before: f64) -> bool {
        match self {
            Acceptance::NonStrict => after >= before,
            Acceptance::Strict => after > before,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Retrain {
    /// Continue from the current parameters.
    #[default]
    WarmStart,
    /// Start every retrain from zero weights.
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Mock,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    #[default]
    Oracle,
    Fixed,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub mode: MockKind,
    pub flip_probability: f64,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    /// JSON object mapping sample id to a scripted decision (fixed mode).
    pub script: Option<PathBuf>,
    /// Samples whose calls always fail transiently.
    pub fail_ids: Vec<String>,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            mode: MockKind::Oracle,
            flip_probability: 0.1,
            seed: None,
            script: None,
            fail_ids: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            endpoint: String::new(),
            model: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            temperature: 0.0,
            max_tokens: 512,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub kind: TransportKind,
    pub mock: MockConfig,
    pub live: LiveConfig,
}

/// Per-agent settings layered over the shared transport.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub system_prompt: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub flip_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjudicatorConfig {
    pub parallelism: usize,
    pub retry: RetryPolicy,
    pub prompts: PromptTemplates,
    pub transport: TransportConfig,
    pub moderator: AgentConfig,
    pub user: AgentConfig,
}

impl Default for AdjudicatorConfig {
    fn default() -> Self {
        AdjudicatorConfig {
            parallelism: 8,
            retry: RetryPolicy::default(),
            prompts: PromptTemplates::default(),
            transport: TransportConfig::default(),
            moderator: AgentConfig::default(),
            user: AgentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub run_dir: PathBuf,
    /// Required; there is no implicit default seed.
    pub seed: Option<u64>,
    pub n_labeled: usize,
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub embedding_dim: Option<usize>,
    pub acceptance: Acceptance,
    pub retrain: Retrain,
    pub loss: LossConfig<f64>,
    pub features: FeatureConfig,
    pub adjudicator: AdjudicatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            run_dir: PathBuf::from("run"),
            seed: None,
            n_labeled: 100,
            k: 500,
            epochs: 10,
            learning_rate: 0.1,
            embedding_dim: None,
            acceptance: Acceptance::default(),
            retrain: Retrain::default(),
            loss: LossConfig::default(),
            features: FeatureConfig::default(),
            adjudicator: AdjudicatorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// The seed, once validation has guaranteed it is set.
    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    /// SHA-256 of the canonical JSON form; stamped into checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes to JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Applies dotted-key overrides in order. Values are parsed as TOML
    /// scalars/arrays when possible and taken as strings otherwise.
    pub fn apply_overrides<K: AsRef<str>, V: AsRef<str>>(&mut self, pairs: &[(K, V)]) -> Result<(), ConfigError> {
        if pairs.is_empty() {
            return Ok(());
        }
        let mut root = toml::Value::try_from(&*self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (key, raw) in pairs {
            let key = key.as_ref();
            let value = parse_value(raw.as_ref());
            set_path(&mut root, key, value).map_err(|message| ConfigError::Override {
                key: key.to_string(),
                message,
            })?;
        }
        *self = root.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Ok(())
    }

    /// Overrides from `SELFTRAIN__*` variables in `vars`.
    pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.split("__").map(str::to_lowercase).collect::<Vec<_>>().join("."), v))
            })
            .collect();
        out.sort();
        out
    }

    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.seed.is_none() {
            p.push("seed is required (set `seed` or pass --seed)".to_string());
        }
        if self.dataset.as_os_str().is_empty() {
            p.push("dataset path is not set".to_string());
        } else if !self.dataset.is_file() {
            p.push(format!("dataset {} does not exist", self.dataset.display()));
        }
        if self.n_labeled < 2 {
            p.push(format!("n_labeled must be at least 2, got {}", self.n_labeled));
        }
        if self.k == 0 {
            p.push("k must be at least 1".to_string());
        }
        if self.epochs == 0 {
            p.push("epochs must be at least 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            p.push(format!("learning_rate must be positive and finite, got {}", self.learning_rate));
        }
        if let Err(e) = self.loss.validate() {
            p.push(format!("loss: {e}"));
        }
        if self.features.hash_dim == 0 {
            p.push("features.hash_dim must be positive".to_string());
        }
        let adj = &self.adjudicator;
        if adj.parallelism == 0 {
            p.push("adjudicator.parallelism must be at least 1".to_string());
        }
        let prompts = [
            adj.moderator.system_prompt.as_deref().unwrap_or(crate::adjudicator::prompt::MODERATOR_SYSTEM_PROMPT),
            adj.user.system_prompt.as_deref().unwrap_or(crate::adjudicator::prompt::USER_SYSTEM_PROMPT),
        ];
        if prompts[0] == prompts[1] {
            p.push("moderator and user system prompts must differ".to_string());
        }
        match adj.transport.kind {
            TransportKind::Mock => {
                let m = &adj.transport.mock;
                let flips = [Some(m.flip_probability), adj.moderator.flip_probability, adj.user.flip_probability];
                for f in flips.into_iter().flatten() {
                    if !(0.0..=1.0).contains(&f) {
                        p.push(format!("flip probability must lie in [0, 1], got {f}"));
                    }
                }
                if m.mode == MockKind::Fixed {
                    match &m.script {
                        None => p.push("mock mode `fixed` needs adjudicator.transport.mock.script".to_string()),
                        Some(s) if !s.is_file() => p.push(format!("mock script {} does not exist", s.display())),
                        _ => {}
                    }
                }
            }
            TransportKind::Live => {
                let l = &adj.transport.live;
                for (role, agent) in [(AgentRole::Moderator, &adj.moderator), (AgentRole::User, &adj.user)] {
                    if agent.endpoint.as_deref().unwrap_or(&l.endpoint).is_empty() {
                        p.push(format!("live transport needs an endpoint for the {role}"));
                    }
                    if agent.model.as_deref().unwrap_or(&l.model).is_empty() {
                        p.push(format!("live transport needs a model for the {role}"));
                    }
                }
            }
        }
        p
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    fn persona(&self, role: AgentRole) -> AgentPersona {
        let (mut persona, agent) = match role {
            AgentRole::Moderator => (AgentPersona::moderator(), &self.adjudicator.moderator),
            AgentRole::User => (AgentPersona::user(), &self.adjudicator.user),
        };
        if let Some(p) = &agent.system_prompt {
            persona.system_prompt = p.clone();
        }
        persona
    }

    fn transport(&self, role: AgentRole, dataset: &Dataset) -> Result<Arc<dyn Transport>, ConfigError> {
        let t = &self.adjudicator.transport;
        let agent = match role {
            AgentRole::Moderator => &self.adjudicator.moderator,
            AgentRole::User => &self.adjudicator.user,
        };
        Ok(match t.kind {
            TransportKind::Mock => {
                let flip = agent.flip_probability.unwrap_or(t.mock.flip_probability);
                Arc::new(self.mock_agent(flip, dataset)?)
            }
            TransportKind::Live => {
                let l = &t.live;
                let api_key = std::env::var(&l.api_key_env).ok().filter(|k| !k.is_empty());
                Arc::new(
                    HttpTransport::new(
                        agent.endpoint.clone().unwrap_or_else(|| l.endpoint.clone()),
                        agent.model.clone().unwrap_or_else(|| l.model.clone()),
                        api_key,
                    )
                    .with_sampling(l.temperature, l.max_tokens)
                    .with_timeout(Duration::from_secs(l.timeout_secs)),
                )
            }
        })
    }

    /// The scripted agent described by `adjudicator.transport.mock`, with
    /// the given flip probability in oracle mode.
    pub fn mock_agent(&self, flip_probability: f64, dataset: &Dataset) -> Result<MockAgent, ConfigError> {
        let m = &self.adjudicator.transport.mock;
        let seed = m.seed.or(self.seed).unwrap_or(0);
        let mock = match m.mode {
            MockKind::Oracle => {
                let golds: HashMap<String, _> = dataset
                    .samples()
                    .iter()
                    .filter(|s| s.split == Split::Train)
                    .filter_map(|s| s.gold_label.map(|g| (s.id.clone(), g)))
                    .collect();
                MockAgent::oracle(Arc::new(golds), flip_probability, seed)
            }
            MockKind::Fixed => {
                let path = m.script.as_ref().ok_or_else(|| ConfigError::Invalid(vec!["fixed mock needs a script".into()]))?;
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                let script: BTreeMap<String, ScriptEntry> =
                    serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
                MockAgent::fixed(script)
            }
            MockKind::Adversarial => MockAgent::adversarial(),
        };
        Ok(mock.with_failing(m.fail_ids.iter().cloned()))
    }

    /// Builds both agents from the transport settings. Oracle mocks read
    /// gold labels of the training split from `dataset`.
    pub fn build_adjudicator(&self, dataset: &Dataset) -> Result<Adjudicator, ConfigError> {
        let moderator = Agent::new(self.persona(AgentRole::Moderator), self.transport(AgentRole::Moderator, dataset)?);
        let user = Agent::new(self.persona(AgentRole::User), self.transport(AgentRole::User, dataset)?);
        Adjudicator::new(moderator, user, self.adjudicator.prompts.clone(), self.adjudicator.retry)
            .map_err(|e| ConfigError::Invalid(vec![e.to_string()]))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or("empty key")?;
    let mut node = root;
    for part in parts {
        let table = node.as_table_mut().ok_or_else(|| format!("`{part}` is not a table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| format!("parent of `{last}` is not a table"))?
        .insert(last.to_string(), value);
    Ok(())
}
