//! Backend configuration file (TOML).
//!
//! ```toml
//! model = "gpt-3.5-turbo"
//! temperature = 0.0
//! max_output = 1024
//!
//! [backend]
//! kind = "http"                 # or "mock"
//! endpoint = "https://api.example.com/v1/chat/completions"
//! secret_env = "OPENAI_API_KEY" # the key itself never appears in files or flags
//!
//! [price]
//! input_per_1k = 0.0015
//! output_per_1k = 0.002
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use tarmt_core::gateway::{
    load_replay_file, ChatBackend, GatewaySettings, HttpBackend, HttpBackendConfig, MockBackend, MockMode, MockScript, PriceTable, RetryPolicy,
};
use tarmt_core::memo_trap::MemoTrapParams;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendFile {
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output")]
    pub max_output: u32,
    pub backend: BackendSection,
    #[serde(default)]
    pub price: PriceTable,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
}

fn default_max_output() -> u32 {
    1024
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Overrides the backend id recorded in outputs (http only).
    pub id: Option<String>,
    pub endpoint: Option<String>,
    pub secret_env: Option<String>,
    pub auth_header: Option<String>,
    pub auth_scheme: Option<String>,
    pub timeout_secs: Option<u64>,
    #[serde(default)]
    pub mock: MockSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSection {
    #[serde(default = "default_mock_mode")]
    pub mode: MockMode,
    /// JSONL replay table; relative paths resolve against the config file.
    pub replay_file: Option<PathBuf>,
    #[serde(default)]
    pub latency_ms: f64,
    pub override_prob_per_constraint: Option<f64>,
    pub fix_per_revision: Option<usize>,
    pub seed: Option<u64>,
}

impl MockSection {
    pub fn memo_trap_params(&self) -> MemoTrapParams {
        let d = MemoTrapParams::default();
        MemoTrapParams {
            override_prob_per_constraint: self.override_prob_per_constraint.unwrap_or(d.override_prob_per_constraint),
            fix_per_revision: self.fix_per_revision.unwrap_or(d.fix_per_revision),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

fn default_mock_mode() -> MockMode {
    MockMode::MemoTrap
}

impl Default for MockSection {
    fn default() -> Self {
        Self {
            mode: default_mock_mode(),
            replay_file: None,
            latency_ms: 0.0,
            override_prob_per_constraint: None,
            fix_per_revision: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    pub max_in_flight: Option<usize>,
    pub requests_per_second: Option<f64>,
}

pub struct LoadedBackend {
    pub backend: Arc<dyn ChatBackend>,
    pub settings: GatewaySettings,
}

impl BackendFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing backend config {}", path.display()))
    }

    pub fn settings(&self) -> GatewaySettings {
        let mut s = GatewaySettings::new(&self.model);
        s.temperature = self.temperature;
        s.max_output = self.max_output;
        s.prices = self.price;
        if let Some(retry) = self.retry {
            s.retry = retry;
        }
        if let Some(n) = self.limits.max_in_flight {
            s.max_in_flight = n;
        }
        s.requests_per_second = self.limits.requests_per_second;
        s
    }
}

/// Failure to construct a backend, kept apart from data errors so the
/// caller can pick the backend exit code.
#[derive(Debug)]
pub struct BackendSetupError(pub anyhow::Error);

impl std::fmt::Display for BackendSetupError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for BackendSetupError {}

pub fn load_backend(path: &Path) -> Result<LoadedBackend> {
    let file = BackendFile::read(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let settings = file.settings();
    let backend: Arc<dyn ChatBackend> = match file.backend.kind {
        BackendKind::Mock => Arc::new(mock_backend(&file.backend.mock, base)?),
        BackendKind::Http => {
            let Some(endpoint) = &file.backend.endpoint else {
                bail!("backend config {}: http backend needs `endpoint`", path.display());
            };
            let mut cfg = HttpBackendConfig::new(endpoint);
            cfg.secret_env = file.backend.secret_env.clone();
            if let Some(h) = &file.backend.auth_header {
                cfg.auth_header = h.clone();
            }
            if let Some(s) = &file.backend.auth_scheme {
                cfg.auth_scheme = (!s.is_empty()).then(|| s.clone());
            }
            if let Some(t) = file.backend.timeout_secs {
                cfg.timeout_secs = t;
            }
            let id = file.backend.id.clone().unwrap_or_else(|| format!("http:{endpoint}"));
            Arc::new(HttpBackend::new(id, cfg).map_err(|e| BackendSetupError(e.into()))?)
        }
    };
    Ok(LoadedBackend { backend, settings })
}

fn mock_backend(section: &MockSection, base: &Path) -> Result<MockBackend> {
    let script = match section.mode {
        MockMode::MemoTrap => {
            let params = section.memo_trap_params();
            if !(0.0..=1.0).contains(&params.override_prob_per_constraint) || params.fix_per_revision == 0 {
                bail!("mock: override probability must be in [0, 1] and fix_per_revision positive");
            }
            MockScript::memo_trap(params)
        },
        MockMode::Replay => {
            let Some(file) = &section.replay_file else {
                bail!("replay mock needs `replay_file`");
            };
            let table = load_replay_file(&base.join(file)).map_err(|e| BackendSetupError(e.into()))?;
            MockScript::replay(table)
        }
    };
    Ok(MockBackend::new(script).with_latency(section.latency_ms))
}
