//! Run and universe configuration (TOML). Unknown keys are rejected; secrets come
//! only from the environment.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{CompositeProvider, DataProvider, FinnhubNewsProvider, FixtureProvider, YahooQuoteProvider};
use crate::net::RetryPolicy;
use crate::quant::weights::Caps;
use crate::quant::MetricConfig;

pub const ENV_CHAT_API_KEY: &str = "CHAT_API_KEY";
pub const ENV_CHAT_API_URL: &str = "CHAT_API_URL";
pub const ENV_NEWS_API_KEY: &str = "NEWS_API_KEY";
pub const ENV_GATEWAY_TOKEN: &str = "GATEWAY_TOKEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
    #[error("data provider: {0}")]
    Provider(String),
}

/// Secrets and endpoints read from the environment.
#[derive(Debug, Clone, Default)]
pub struct Secrets {
    pub chat_api_key: Option<String>,
    pub chat_api_url: Option<String>,
    pub news_api_key: Option<String>,
    pub gateway_token: Option<String>,
}

impl Secrets {
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Self {
            chat_api_key: var(ENV_CHAT_API_KEY),
            chat_api_url: var(ENV_CHAT_API_URL),
            news_api_key: var(ENV_NEWS_API_KEY),
            gateway_token: var(ENV_GATEWAY_TOKEN),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Scripted,
    Chat,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "chat" => Ok(Self::Chat),
            other => Err(format!("unknown backend {other:?} (expected scripted or chat)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapsConfig {
    pub max_weight: f64,
    pub max_sector_share: f64,
}

impl Default for CapsConfig {
    fn default() -> Self {
        let c = Caps::default();
        Self {
            max_weight: c.max_weight,
            max_sector_share: c.max_sector_share,
        }
    }
}

impl CapsConfig {
    pub fn to_caps(&self) -> Caps {
        Caps {
            max_weight: self.max_weight,
            max_sector_share: self.max_sector_share,
            ..Caps::default()
        }
    }
}

/// Preferred list sizes per stage; each must sit inside the stage's hard bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTargets {
    pub screening: usize,
    pub analysis: usize,
    pub buys: usize,
    pub positions: usize,
}

impl Default for StageTargets {
    fn default() -> Self {
        Self {
            screening: 60,
            analysis: 40,
            buys: 25,
            positions: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    /// Trading sessions pinned per ticker.
    pub window_days: usize,
    pub lookback_days: u32,
    pub max_context_items: usize,
    /// Prompt budget in estimated tokens (4 characters each).
    pub token_budget: usize,
    pub targets: StageTargets,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            window_days: 90,
            lookback_days: 7,
            max_context_items: 120,
            token_budget: 60_000,
            targets: StageTargets::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Used when `CHAT_API_URL` is unset.
    pub endpoint: String,
    pub timeout_secs: u64,
    pub min_interval_ms: u64,
    pub retry: RetryPolicy,
    pub repair_budget: u32,
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self {
            model: "gpt-4.1-nano".into(),
            temperature: 0.0,
            max_tokens: 4096,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            timeout_secs: 120,
            min_interval_ms: 0,
            retry: RetryPolicy::default(),
            repair_budget: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySettings {
    pub bind: String,
    /// Environment variable holding the shared bearer token.
    pub token_env: String,
    /// How often the worker re-reads persisted run state.
    pub poll_interval_ms: u64,
    /// Console assets served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8787".into(),
            token_env: ENV_GATEWAY_TOKEN.into(),
            poll_interval_ms: 500,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub universe_file: PathBuf,
    pub as_of: NaiveDate,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub auto_approve: bool,
    /// Root holding one directory per run.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Delisted-firm corpus; the bundled one when absent.
    #[serde(default)]
    pub corpus_file: Option<PathBuf>,
    #[serde(default)]
    pub prior_holdings: Vec<String>,
    /// A previous run directory whose published allocation supplies prior holdings.
    #[serde(default)]
    pub prior_run: Option<PathBuf>,
    #[serde(default)]
    pub caps: CapsConfig,
    #[serde(default)]
    pub windows: MetricConfig,
    #[serde(default)]
    pub pipeline: PipelineSettings,
    #[serde(default)]
    pub chat: ChatSettings,
    #[serde(default)]
    pub gateway: GatewaySettings,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Parses, resolves relative paths against the file's directory and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::parse(&read(path)?, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.universe_file);
        resolve(base, &mut self.out_dir);
        for p in [&mut self.cache_dir, &mut self.corpus_file, &mut self.prior_run, &mut self.gateway.static_dir]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let c = &self.caps;
        if !(c.max_weight > 0.0 && c.max_weight <= 1.0) {
            return bad(format!("caps.max_weight must be in (0, 1], got {}", c.max_weight));
        }
        if !(c.max_sector_share > 0.0 && c.max_sector_share <= 1.0) {
            return bad(format!("caps.max_sector_share must be in (0, 1], got {}", c.max_sector_share));
        }
        if c.max_weight * 30.0 < 1.0 {
            return bad(format!("caps.max_weight {} cannot fill a 30-position portfolio", c.max_weight));
        }
        let w = &self.windows;
        if w.risk_window < 2 || w.beta_window < 3 || w.zscore_baseline < 2 || w.volume_window < 2 || w.slope_window < 2 {
            return bad("metric windows must each be at least 2 sessions (beta at least 3)".into());
        }
        let p = &self.pipeline;
        if p.window_days < w.full_history() {
            return bad(format!(
                "pipeline.window_days {} is shorter than the {} sessions the metric windows need",
                p.window_days,
                w.full_history()
            ));
        }
        if p.lookback_days == 0 || p.max_context_items == 0 || p.token_budget == 0 {
            return bad("pipeline.lookback_days, max_context_items and token_budget must be positive".into());
        }
        let t = &p.targets;
        for (name, v, lo, hi) in [
            ("screening", t.screening, 50, 100),
            ("analysis", t.analysis, 35, 50),
            ("buys", t.buys, 20, 30),
            ("positions", t.positions, 15, 30),
        ] {
            if v < lo || v > hi {
                return bad(format!("pipeline.targets.{name} = {v} is outside {lo}..={hi}"));
            }
        }
        if !(0.0..=2.0).contains(&self.chat.temperature) {
            return bad("chat.temperature must be within [0, 2]".into());
        }
        Ok(())
    }

    /// Checks that every secret the configured backend needs is present.
    pub fn require_secrets(&self, secrets: &Secrets) -> Result<(), ConfigError> {
        if self.backend == BackendKind::Chat && secrets.chat_api_key.is_none() {
            return Err(ConfigError::MissingEnv(ENV_CHAT_API_KEY));
        }
        Ok(())
    }

    pub fn chat_endpoint(&self, secrets: &Secrets) -> String {
        secrets.chat_api_url.clone().unwrap_or_else(|| self.chat.endpoint.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    /// Versioned files: `prices/<T>.csv`, `news/<T>.json`.
    Fixture { path: PathBuf },
    /// Yahoo-style quotes plus Finnhub-style news (`NEWS_API_KEY`).
    Live {
        #[serde(default = "default_quotes_url")]
        quotes_url: String,
        #[serde(default = "default_news_url")]
        news_url: String,
        #[serde(default = "default_min_interval")]
        min_interval_ms: u64,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

fn default_quotes_url() -> String {
    YahooQuoteProvider::DEFAULT_BASE_URL.into()
}
fn default_news_url() -> String {
    FinnhubNewsProvider::DEFAULT_BASE_URL.into()
}
fn default_min_interval() -> u64 {
    250
}

fn default_benchmarks() -> Vec<String> {
    vec!["SPY".into(), "QQQ".into(), "DIA".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniverseFile {
    pub tickers: Vec<String>,
    /// The first benchmark is the beta reference.
    #[serde(default = "default_benchmarks")]
    pub benchmarks: Vec<String>,
    #[serde(default)]
    pub sectors: BTreeMap<String, String>,
    pub provider: ProviderConfig,
}

pub const UNCLASSIFIED: &str = "Unclassified";

impl UniverseFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut u = Self::parse(&read(path)?, path)?;
        if let ProviderConfig::Fixture { path: p } = &mut u.provider {
            resolve(path.parent().unwrap_or(Path::new(".")), p);
        }
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tickers.is_empty() {
            return Err(ConfigError::Invalid("universe has no tickers".into()));
        }
        if self.benchmarks.is_empty() {
            return Err(ConfigError::Invalid("universe has no benchmarks".into()));
        }
        let mut seen = HashSet::new();
        for t in self.tickers.iter().chain(&self.benchmarks) {
            if t.is_empty() || !seen.insert(t) {
                return Err(ConfigError::Invalid(format!("duplicate or empty symbol {t:?}")));
            }
        }
        Ok(())
    }

    pub fn sector_of(&self, symbol: &str) -> &str {
        self.sectors.get(symbol).map(String::as_str).unwrap_or(UNCLASSIFIED)
    }

    pub fn build_provider(&self, secrets: &Secrets) -> Result<Box<dyn DataProvider>, ConfigError> {
        match &self.provider {
            ProviderConfig::Fixture { path } => Ok(Box::new(
                FixtureProvider::from_dir(path).map_err(|e| ConfigError::Provider(e.to_string()))?,
            )),
            ProviderConfig::Live {
                quotes_url,
                news_url,
                min_interval_ms,
                retry,
            } => {
                let key = secrets.news_api_key.clone().ok_or(ConfigError::MissingEnv(ENV_NEWS_API_KEY))?;
                let interval = Duration::from_millis(*min_interval_ms);
                Ok(Box::new(CompositeProvider::new(
                    Box::new(YahooQuoteProvider::new(quotes_url.clone(), interval, *retry)),
                    Box::new(FinnhubNewsProvider::new(news_url.clone(), key, interval, *retry)),
                )))
            }
        }
    }
}
