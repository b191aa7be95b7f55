//! Brute-force reference implementations, written independently of the library's
//! code paths: pairwise variance instead of two-pass, Cramer's rule on raw sums
//! instead of centred OLS, explicit peak/trough enumeration, row-by-row RSI tables.
#![allow(dead_code)]

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const YEAR: f64 = 252.0;

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-6)
}

pub fn pairwise_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mut acc = 0.0;
    for i in 0..xs.len() {
        for j in (i + 1)..xs.len() {
            acc += (xs[i] - xs[j]).powi(2);
        }
    }
    acc / (n * (n - 1.0))
}

pub fn pairwise_std(xs: &[f64]) -> f64 {
    pairwise_variance(xs).sqrt()
}

pub fn avg(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

/// Slope and intercept of y on x via Cramer's rule on the 2x2 normal equations.
pub fn cramer_ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let det = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    (slope, intercept)
}

pub fn simple_returns(closes: &[f64]) -> Vec<f64> {
    (1..closes.len()).map(|i| (closes[i] - closes[i - 1]) / closes[i - 1]).collect()
}

pub fn horizon_return(closes: &[f64], h: usize) -> f64 {
    let n = closes.len();
    (closes[n - 1] - closes[n - 1 - h]) / closes[n - 1 - h]
}

pub fn volatility(returns: &[f64]) -> f64 {
    pairwise_std(returns) * YEAR.sqrt()
}

pub fn max_drawdown(closes: &[f64]) -> f64 {
    let mut worst = 0.0_f64;
    for t in 0..closes.len() {
        for u in t..closes.len() {
            worst = worst.max((closes[t] - closes[u]) / closes[t]);
        }
    }
    worst
}

pub fn sharpe(returns: &[f64], rf: f64) -> f64 {
    let excess: Vec<f64> = returns.iter().map(|r| r - rf / YEAR).collect();
    avg(&excess) / pairwise_std(returns) * YEAR.sqrt()
}

pub fn sortino(returns: &[f64], rf: f64) -> f64 {
    let excess: Vec<f64> = returns.iter().map(|r| r - rf / YEAR).collect();
    let mut sq = 0.0;
    for e in &excess {
        if *e < 0.0 {
            sq += e * e;
        }
    }
    avg(&excess) / (sq / excess.len() as f64).sqrt() * YEAR.sqrt()
}

pub fn beta_alpha(asset: &[f64], bench: &[f64]) -> (f64, f64) {
    let (slope, intercept) = cramer_ols(bench, asset);
    (slope, intercept * YEAR)
}

/// Spreadsheet-style RSI: one row per change with gain, loss, avg gain, avg loss columns.
pub fn rsi_14(closes: &[f64]) -> f64 {
    struct Row {
        gain: f64,
        loss: f64,
        avg_gain: f64,
        avg_loss: f64,
    }
    let mut rows: Vec<Row> = Vec::new();
    for i in 1..closes.len() {
        let change = closes[i] - closes[i - 1];
        let gain = if change > 0.0 { change } else { 0.0 };
        let loss = if change < 0.0 { -change } else { 0.0 };
        let k = rows.len();
        let (avg_gain, avg_loss) = if k < 13 {
            (f64::NAN, f64::NAN)
        } else if k == 13 {
            let g: f64 = rows.iter().map(|r| r.gain).sum::<f64>() + gain;
            let l: f64 = rows.iter().map(|r| r.loss).sum::<f64>() + loss;
            (g / 14.0, l / 14.0)
        } else {
            let prev = &rows[k - 1];
            ((prev.avg_gain * 13.0 + gain) / 14.0, (prev.avg_loss * 13.0 + loss) / 14.0)
        };
        rows.push(Row {
            gain,
            loss,
            avg_gain,
            avg_loss,
        });
    }
    let last = rows.last().unwrap();
    if last.avg_loss == 0.0 && last.avg_gain == 0.0 {
        50.0
    } else if last.avg_loss == 0.0 {
        100.0
    } else if last.avg_gain == 0.0 {
        0.0
    } else {
        let rs = last.avg_gain / last.avg_loss;
        100.0 - 100.0 / (1.0 + rs)
    }
}

pub fn zscore_5d(closes: &[f64], baseline: usize) -> f64 {
    let n = closes.len();
    let mut window = Vec::new();
    for end in (n - baseline)..n {
        window.push(closes[end] / closes[end - 5] - 1.0);
    }
    let latest = closes[n - 1] / closes[n - 6] - 1.0;
    (latest - avg(&window)) / pairwise_std(&window)
}

pub fn volume_trend(volumes: &[f64], window: usize) -> f64 {
    let tail = &volumes[volumes.len() - window..];
    let xs: Vec<f64> = (1..=window).map(|i| i as f64).collect();
    cramer_ols(&xs, tail).0 / avg(tail)
}

pub fn price_vs_ma5(closes: &[f64]) -> f64 {
    let tail = &closes[closes.len() - 5..];
    tail[4] / avg(tail) - 1.0
}

pub fn regression_slope(closes: &[f64], window: usize) -> f64 {
    let tail = &closes[closes.len() - window..];
    let xs: Vec<f64> = (1..=window).map(|i| i as f64).collect();
    cramer_ols(&xs, tail).0 / tail[0]
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let ma = avg(a);
    let mb = avg(b);
    let n = a.len() as f64;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    cov / (pairwise_std(a) * pairwise_std(b))
}

pub fn compound(weekly: &[f64]) -> f64 {
    let mut g = 1.0;
    for r in weekly {
        g *= 1.0 + r;
    }
    g - 1.0
}

/// Random walk closes with per-series drift and volatility, plus noisy volumes.
pub struct SyntheticSeries {
    pub closes: Vec<f64>,
    pub volumes: Vec<u64>,
}

pub fn synthetic(rng: &mut ChaCha8Rng, len: usize) -> SyntheticSeries {
    let drift = rng.random_range(-0.002..0.003);
    let vol = rng.random_range(0.005..0.04);
    let mut price = rng.random_range(5.0..500.0);
    let base_volume = rng.random_range(10_000.0..5_000_000.0);
    let mut closes = Vec::with_capacity(len);
    let mut volumes = Vec::with_capacity(len);
    for _ in 0..len {
        let shock: f64 = rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0);
        price *= (drift + vol * shock).exp();
        closes.push(price);
        let v: f64 = base_volume * (1.0 + 0.4 * rng.random_range(-1.0..1.0));
        volumes.push(v.round() as u64);
    }
    SyntheticSeries { closes, volumes }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn as_of() -> NaiveDate {
    NaiveDate::from_ymd_opt(2025, 6, 6).unwrap()
}
