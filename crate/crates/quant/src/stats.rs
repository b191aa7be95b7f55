/// Standard deviations of dimensionless return series below this are treated as zero;
/// float noise from ratios of geometric series lands around 1e-17.
pub(crate) const DEGENERATE_STD: f64 = 1e-12;

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with the n-1 denominator. Caller guarantees `xs.len() >= 2`.
pub(crate) fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}

/// OLS slope of `ys` against x = 0, 1, ..., n-1.
pub(crate) fn index_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// OLS of `ys` on `xs`, returning (slope, intercept). `None` when `xs` has no variance.
pub(crate) fn ols(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let x_mean = mean(xs);
    let y_mean = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - x_mean) * (y - y_mean);
        sxx += (x - x_mean) * (x - x_mean);
    }
    if sxx / xs.len() as f64 <= DEGENERATE_STD * DEGENERATE_STD {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, y_mean - slope * x_mean))
}
