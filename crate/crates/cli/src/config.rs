//! Run configuration: a sectioned TOML file plus `section.key=value`
//! overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use debias_core::align::{DpoConfig, OptimConfig, RmConfig};
use debias_core::cot::PipelineConfig;
use debias_core::decode::GuidedDecodeConfig;
use debias_core::lmclient::{canonical_string, DEFAULT_API_KEY_ENV};
use debias_core::metrics::BleuConfig;
use debias_core::par::Exec;
use debias_core::prefgen::{
    CounterfactualKind, PrefgenConfig, PromptStyle, DEFAULT_LENGTH_RATIO_CAP,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: unknown key `{0}`")]
    UnknownKey(String),
    #[error("config: bad override `{0}`; expected section.key=value")]
    BadOverride(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    /// Master seed. Section seeds that are not set explicitly inherit it.
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 42,
            exec: ExecMode::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    /// Directory whose template files override the built-in ones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replay_store: Option<PathBuf>,
    /// Expected split sizes; the published ones when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Answers only from the replay store.
    #[default]
    Replay,
    /// Calls the endpoint; nothing is stored.
    Live,
    /// Calls the endpoint and stores every answer in the replay store.
    Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientSection {
    pub backend: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub model_name: String,
    pub max_inflight: usize,
    /// Environment variable holding the bearer token; empty for none.
    pub api_key_env: String,
    pub max_retries: u32,
    /// Re-record requests already in the store.
    pub force: bool,
}

impl Default for ClientSection {
    fn default() -> Self {
        Self {
            backend: BackendKind::Replay,
            base_url: None,
            model_name: "generator".to_string(),
            max_inflight: 4,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            max_retries: 3,
            force: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    #[default]
    Random,
    Uniform,
}

/// How the toy language model is initialised before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySection {
    pub init: InitKind,
    pub init_scale: f64,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            init: InitKind::Random,
            init_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftSection {
    /// Fine-tune on the chosen completions before preference training.
    pub enabled: bool,
    #[serde(flatten)]
    pub optim: OptimConfig,
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            enabled: false,
            optim: OptimConfig::sft_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CotSection {
    pub temperature: f64,
    pub max_tokens: u32,
    pub retry_budget: u32,
}

impl Default for CotSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            temperature: p.temperature,
            max_tokens: p.max_tokens,
            retry_budget: p.retry_budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefgenSection {
    pub kinds: Vec<CounterfactualKind>,
    pub samples_per_kind: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub length_ratio_cap: f64,
    /// Prompt stored on each pair; decoding builds prompts the same way.
    pub prompt_style: PromptStyle,
}

impl Default for PrefgenSection {
    fn default() -> Self {
        let p = PrefgenConfig::default();
        Self {
            kinds: p.kinds,
            samples_per_kind: p.samples_per_kind,
            temperature: p.temperature,
            max_tokens: p.max_tokens,
            length_ratio_cap: DEFAULT_LENGTH_RATIO_CAP,
            prompt_style: p.prompt_style,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub paths: PathsSection,
    pub client: ClientSection,
    pub toy: ToySection,
    pub sft: SftSection,
    pub dpo: DpoConfig,
    pub rm: RmConfig,
    pub decode: GuidedDecodeConfig,
    pub cot: CotSection,
    pub prefgen: PrefgenSection,
    pub bleu: BleuConfig,
}

/// Sections whose `seed` key defaults to `run.seed`.
const SEEDED_SECTIONS: [&str; 3] = ["sft", "dpo", "rm"];

/// Parse `value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Apply `section.key=value` (nested keys allowed) to `table`.
pub fn apply_override(table: &mut Table, item: &str) -> Result<(), ConfigError> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(item.to_string()))?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::BadOverride(item.to_string()));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(item.to_string()))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Every key in `given` must survive a deserialize/serialize round trip.
fn check_known(given: &Table, known: &Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in given {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (v, known.get(k)) {
            (_, None) => return Err(ConfigError::UnknownKey(path)),
            (Value::Table(g), Some(Value::Table(n))) => check_known(g, n, &path)?,
            _ => {}
        }
    }
    Ok(())
}

fn has_key(table: &Table, section: &str, key: &str) -> bool {
    table
        .get(section)
        .and_then(Value::as_table)
        .is_some_and(|t| t.contains_key(key))
}

/// A validated configuration and where relative paths resolve from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub fingerprint: String,
}

impl RunConfig {
    /// Build from TOML text and overrides. Overrides win over the file.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: Table =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let known: Table = Value::try_from(&config)
            .map_err(|e| ConfigError::Parse(e.to_string()))?
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        check_known(&table, &known, "")?;
        let seed = config.run.seed;
        for section in SEEDED_SECTIONS {
            if !has_key(&table, section, "seed") {
                match section {
                    "sft" => config.sft.optim.seed = seed,
                    "dpo" => config.dpo.optim.seed = seed,
                    _ => config.rm.seed = seed,
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.dpo
            .validate()
            .map_err(|e| invalid(format!("[dpo] {e}")))?;
        self.rm
            .validate()
            .map_err(|e| invalid(format!("[rm] {e}")))?;
        self.sft
            .optim
            .validate()
            .map_err(|e| invalid(format!("[sft] {e}")))?;
        self.decode
            .validate()
            .map_err(|e| invalid(format!("[decode] {e}")))?;
        self.prefgen_config()
            .validate()
            .map_err(|e| invalid(format!("[prefgen] {e}")))?;
        if self.client.max_inflight == 0 {
            return Err(invalid("[client] max_inflight must be positive".into()));
        }
        if self.cot.temperature.is_nan() || self.cot.temperature < 0.0 || self.cot.max_tokens == 0 {
            return Err(invalid(
                "[cot] temperature must be nonnegative and max_tokens positive".into(),
            ));
        }
        if self.bleu.max_n == 0 {
            return Err(invalid("[bleu] max_n must be positive".into()));
        }
        if !(self.toy.init_scale >= 0.0 && self.toy.init_scale.is_finite()) {
            return Err(invalid("[toy] init_scale must be nonnegative".into()));
        }
        Ok(())
    }

    /// Load `path` (or defaults when `None`) and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig, ConfigError> {
        let (text, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (text, dir)
            }
            None => (String::new(), PathBuf::new()),
        };
        let config = Self::from_toml_with(&text, overrides)?;
        let fingerprint = config.fingerprint();
        Ok(LoadedConfig {
            config,
            base_dir,
            fingerprint,
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical_string(&value).as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn exec(&self) -> Exec {
        match self.run.exec {
            ExecMode::Parallel => Exec::Parallel,
            ExecMode::Sequential => Exec::Sequential,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            model_name: self.client.model_name.clone(),
            temperature: self.cot.temperature,
            max_tokens: self.cot.max_tokens,
            retry_budget: self.cot.retry_budget,
            max_inflight: self.client.max_inflight,
        }
    }

    pub fn prefgen_config(&self) -> PrefgenConfig {
        PrefgenConfig {
            kinds: self.prefgen.kinds.clone(),
            samples_per_kind: self.prefgen.samples_per_kind,
            model_name: self.client.model_name.clone(),
            temperature: self.prefgen.temperature,
            max_tokens: self.prefgen.max_tokens,
            seed: self.run.seed,
            length_ratio_cap: self.prefgen.length_ratio_cap,
            prompt_style: self.prefgen.prompt_style,
            max_inflight: self.client.max_inflight,
        }
    }
}

impl LoadedConfig {
    /// Resolve a path from the config file against the file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.run.seed
    }

    /// Provenance object written at the top of every artifact.
    pub fn meta(&self, command: &str) -> serde_json::Value {
        serde_json::json!({
            "command": command,
            "fingerprint": self.fingerprint,
            "seed": self.seed(),
            "tool": concat!("debias ", env!("CARGO_PKG_VERSION")),
        })
    }

    pub fn meta_line(&self, command: &str) -> String {
        let v = serde_json::json!({ "_meta": self.meta(command) });
        format!("{}\n", canonical_string(&v))
    }
}
