//! Runs every metrics-engine operation against the brute-force oracles on randomized
//! synthetic series and reports per-operation results.
#![allow(dead_code)]

use equicrew_quant::metrics;
use equicrew_quant::{compute_metric_vector, global_mean_benchmark, MetricConfig, PriceSeries};

use super::oracles::{self, rel_close};

pub const TOL: f64 = 1e-9;
pub const RSI_TOL: f64 = 1e-6;

#[derive(Debug)]
pub struct OracleOutcome {
    pub operation: &'static str,
    pub checked: usize,
    pub failures: Vec<String>,
}

impl OracleOutcome {
    fn new(operation: &'static str) -> Self {
        Self {
            operation,
            checked: 0,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, case: usize, got: f64, want: f64, tol: f64) {
        self.checked += 1;
        if !rel_close(got, want, tol) {
            self.failures.push(format!("case {case}: got {got:e}, oracle {want:e}"));
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `cases` randomized series (60..=140 bars each) checked against every oracle.
pub fn run(cases: usize, seed: u64) -> Vec<OracleOutcome> {
    let mut rng = oracles::rng(seed);
    let as_of = oracles::as_of();
    let names = [
        "horizon_return(21)",
        "horizon_return(5)",
        "annualized_volatility",
        "max_drawdown",
        "sharpe",
        "sortino",
        "beta",
        "alpha_ann",
        "rsi_14",
        "zscore_5d",
        "volume_trend",
        "price_vs_ma5",
        "regression_slope",
        "compute_metric_vector",
        "global_mean_benchmark",
    ];
    let mut out: Vec<OracleOutcome> = names.iter().map(|n| OracleOutcome::new(n)).collect();
    let config = MetricConfig::default();
    let mut vectors = Vec::new();
    let mut oracle_rows: Vec<Vec<(String, f64)>> = Vec::new();

    for case in 0..cases {
        let len = 60 + (case * 7919 % 81);
        let asset = oracles::synthetic(&mut rng, len);
        let bench = oracles::synthetic(&mut rng, len);
        let series = PriceSeries::from_closes_and_volumes("A", &asset.closes, &asset.volumes, as_of).unwrap();
        let bench_series =
            PriceSeries::from_closes_and_volumes("B", &bench.closes, &bench.volumes, as_of).unwrap();
        let closes = &asset.closes;
        let volumes: Vec<f64> = asset.volumes.iter().map(|v| *v as f64).collect();
        let all_returns = oracles::simple_returns(closes);
        let returns = series.returns();
        let rf = [0.0, 0.02, 0.05][case % 3];

        out[0].check(case, metrics::horizon_return(&series, 21).unwrap(), oracles::horizon_return(closes, 21), TOL);
        out[1].check(case, metrics::horizon_return(&series, 5).unwrap(), oracles::horizon_return(closes, 5), TOL);
        out[2].check(case, metrics::annualized_volatility(&returns).unwrap(), oracles::volatility(&all_returns), TOL);
        out[3].check(case, metrics::max_drawdown(&series).unwrap(), oracles::max_drawdown(closes), TOL);
        out[4].check(case, metrics::sharpe(&returns, rf).unwrap(), oracles::sharpe(&all_returns, rf), TOL);
        out[5].check(case, metrics::sortino(&returns, rf).unwrap(), oracles::sortino(&all_returns, rf), TOL);
        let bench_returns = oracles::simple_returns(&bench.closes);
        let (beta, alpha) = metrics::beta_alpha(&returns, &bench_series.returns()).unwrap();
        let (ob, oa) = oracles::beta_alpha(&all_returns, &bench_returns);
        out[6].check(case, beta, ob, TOL);
        out[7].check(case, alpha, oa, TOL);
        out[8].check(case, metrics::rsi_14(&series).unwrap(), oracles::rsi_14(closes), RSI_TOL);
        out[9].check(case, metrics::zscore_5d(&series, 21).unwrap(), oracles::zscore_5d(closes, 21), TOL);
        out[10].check(case, metrics::volume_trend(&series, 21).unwrap(), oracles::volume_trend(&volumes, 21), TOL);
        out[11].check(case, metrics::price_vs_ma5(&series).unwrap(), oracles::price_vs_ma5(closes), TOL);
        out[12].check(case, metrics::regression_slope(&series, 21).unwrap(), oracles::regression_slope(closes, 21), TOL);

        // The assembled vector composes the same oracles over the configured windows.
        let v = compute_metric_vector(&series, &bench_series, &config).unwrap();
        let risk_returns = &all_returns[all_returns.len() - config.risk_window..];
        let beta_n = config.beta_window.min(all_returns.len());
        let (vb, va) = oracles::beta_alpha(
            &all_returns[all_returns.len() - beta_n..],
            &bench_returns[bench_returns.len() - beta_n..],
        );
        let expected = vec![
            ("return_21d", oracles::horizon_return(closes, 21)),
            ("return_5d", oracles::horizon_return(closes, 5)),
            ("momentum_21d", oracles::horizon_return(closes, 21)),
            ("volatility_ann", oracles::volatility(risk_returns)),
            ("max_drawdown", oracles::max_drawdown(&closes[closes.len() - config.risk_window - 1..])),
            ("sharpe", oracles::sharpe(risk_returns, 0.0)),
            ("sortino", oracles::sortino(risk_returns, 0.0)),
            ("beta", vb),
            ("alpha_ann", va),
            ("rsi_14", oracles::rsi_14(closes)),
            ("zscore_5d", oracles::zscore_5d(closes, config.zscore_baseline)),
            ("volume_trend", oracles::volume_trend(&volumes, config.volume_window)),
            ("price_vs_ma5", oracles::price_vs_ma5(closes)),
            ("regression_slope", oracles::regression_slope(closes, config.slope_window)),
        ];
        for (name, want) in &expected {
            let tol = if *name == "rsi_14" { RSI_TOL } else { TOL };
            match v.get(name) {
                Some(got) => out[13].check(case, got, *want, tol),
                None => {
                    // Sortino is legitimately unavailable when the window has no downside.
                    if !(*name == "sortino" && risk_returns.iter().all(|r| *r >= 0.0)) {
                        out[13].checked += 1;
                        out[13].failures.push(format!("case {case}: {name} unavailable"));
                    }
                }
            }
        }
        oracle_rows.push(expected.iter().map(|(n, x)| (n.to_string(), *x)).collect());
        vectors.push(v);
    }

    // every prefix of the generated series is a cohort of its own
    for size in 1..=vectors.len() {
        let g = global_mean_benchmark(&vectors[..size]).unwrap();
        for (i, name) in equicrew_quant::METRIC_NAMES.iter().enumerate() {
            let values: Vec<f64> = oracle_rows[..size].iter().map(|row| row[i].1).collect();
            out[14].check(size, g.metric_means[*name], oracles::avg(&values), TOL);
        }
    }
    out
}
