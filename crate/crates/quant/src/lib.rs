//! Pure, deterministic numerics shared by the pipeline, the gateway and the
//! browser demo. Nothing in this crate performs I/O.

pub mod metrics;
pub mod performance;
pub mod series;
mod stats;
pub mod vector;
pub mod weights;

pub use metrics::MetricError;
pub use series::{PriceBar, PriceSeries, ReturnSeries, SeriesError};
pub use vector::{
    compute_metric_vector, global_mean_benchmark, CohortBenchmark, MetricConfig, MetricValue,
    MetricVector, METRIC_NAMES,
};

/// Trading sessions per year used for every annualization.
pub const SESSIONS_PER_YEAR: f64 = 252.0;
