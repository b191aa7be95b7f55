//! The five-stage selection pipeline.

pub mod gates;
pub mod market;
pub mod stages;
pub mod types;

pub use gates::GateError;
pub use market::MarketView;
pub use stages::{
    allocate, analysis_basis, logical_time, run_analysis_stage, run_portfolio_stage, run_postmortem_stage,
    run_screening_stage, run_timing_stage, stage_seed, PortfolioOutcome, StageContext, StageError, StageOutcome,
};
pub use types::*;
