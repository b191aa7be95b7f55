#![allow(dead_code)]

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use equicrew_core::config::RunConfig;
use equicrew_core::synthetic::{SyntheticMarket, SyntheticSpec};
use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
    pub market: SyntheticMarket,
    pub config: RunConfig,
}

impl Fixture {
    pub fn runs(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }
}

pub fn as_of() -> NaiveDate {
    NaiveDate::from_ymd_opt(2025, 6, 6).unwrap()
}

/// A synthetic fixture universe on disk and a scripted run config pointing at it.
pub fn fixture(seed: u64, tickers: usize, auto_approve: bool) -> Fixture {
    let spec = SyntheticSpec {
        tickers,
        seed,
        ..SyntheticSpec::default()
    };
    let market = SyntheticMarket::generate(&spec);
    let dir = tempfile::tempdir().unwrap();
    market.write_fixture_dir(&dir.path().join("data")).unwrap();
    let text = format!(
        "universe_file = \"data/universe.toml\"\nas_of = \"{}\"\nseed = {seed}\nauto_approve = {auto_approve}\nout_dir = \"runs\"\n",
        spec.as_of
    );
    let path = dir.path().join("run.toml");
    std::fs::write(&path, text).unwrap();
    let config = RunConfig::load(&path).unwrap();
    Fixture { dir, market, config }
}

use std::collections::BTreeMap;

use equicrew_core::agents::{bundled_crews, AgentBackend, CrewSpec};
use equicrew_core::config::PipelineSettings;
use equicrew_core::market_data::{pin_snapshot, SnapshotRequest};
use equicrew_core::pipeline::types::Stage;
use equicrew_core::pipeline::{MarketView, StageContext};
use equicrew_core::quant::weights::Caps;
use equicrew_core::quant::MetricConfig;

/// Everything a stage function borrows, owned in one place.
pub struct Harness {
    pub market: MarketView,
    pub crews: BTreeMap<Stage, CrewSpec>,
    pub settings: PipelineSettings,
    pub caps: Caps,
    _snapshot_dir: TempDir,
}

impl Harness {
    pub fn new(market: &SyntheticMarket, priors: Vec<String>) -> Self {
        let settings = PipelineSettings::default();
        let dir = tempfile::tempdir().unwrap();
        let provider = market.provider();
        let request = SnapshotRequest {
            universe: market.tickers.clone(),
            benchmarks: market.benchmarks.clone(),
            as_of: market.spec.as_of,
            window_days: settings.window_days,
            lookback_days: settings.lookback_days,
        };
        let snapshot = pin_snapshot(&provider, None, &request, dir.path()).unwrap();
        let view = MarketView::new(snapshot, market.sectors.clone(), priors, MetricConfig::default()).unwrap();
        Self {
            market: view,
            crews: bundled_crews(),
            settings,
            caps: Caps::default(),
            _snapshot_dir: dir,
        }
    }

    pub fn ctx<'a>(&'a self, backend: &'a dyn AgentBackend, attempt: u32) -> StageContext<'a> {
        StageContext {
            market: &self.market,
            backend,
            crews: &self.crews,
            settings: &self.settings,
            caps: &self.caps,
            seed: 42,
            attempt,
            repair_budget: 1,
            transcript: None,
        }
    }
}

pub fn synthetic(seed: u64, tickers: usize) -> SyntheticMarket {
    SyntheticMarket::generate(&SyntheticSpec {
        tickers,
        seed,
        ..SyntheticSpec::default()
    })
}
pub mod mock_chat;
