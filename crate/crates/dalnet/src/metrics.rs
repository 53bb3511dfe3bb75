//! Probabilistic-forecast evaluation: per-step empirical quantiles and
//! prediction intervals from generated ensembles, coverage (PICP/ACE),
//! sharpness (average width), the negatively oriented interval score, point
//! MSE, Gaussian KDE with Silverman bandwidth, and KL divergence between
//! densities on a shared grid.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ensemble needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("ensemble contains non-finite values")]
    NonFinite,
    #[error("quantile level {0} outside (0, 1)")]
    BadQuantile(f64),
    #[error("pinc {0} outside (0, 1)")]
    BadPinc(f64),
    #[error("length mismatch: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("samples have zero spread; density is degenerate")]
    ZeroSpread,
    #[error("density grids differ; evaluate both on a shared grid first")]
    GridMismatch,
    #[error("empty input")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// S generated curves for one condition day, row-major `[s, n]`.
#[derive(Debug, Clone)]
pub struct Ensemble {
    s: usize,
    n: usize,
    values: Vec<f64>,
}

impl Ensemble {
    pub fn new(values: Vec<f64>, s: usize, n: usize) -> Result<Self> {
        if s < 2 {
            return Err(MetricsError::TooFewSamples(s));
        }
        if values.len() != s * n {
            return Err(MetricsError::LengthMismatch { lhs: values.len(), rhs: s * n });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        Ok(Ensemble { s, n, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let s = rows.len();
        if s < 2 {
            return Err(MetricsError::TooFewSamples(s));
        }
        let n = rows[0].len();
        let mut values = Vec::with_capacity(s * n);
        for r in rows {
            if r.len() != n {
                return Err(MetricsError::LengthMismatch { lhs: r.len(), rhs: n });
            }
            values.extend_from_slice(r);
        }
        Ensemble::new(values, s, n)
    }

    pub fn num_samples(&self) -> usize {
        self.s
    }

    pub fn seq_len(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// All ensemble values at one time step.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.s).map(|i| self.values[i * self.n + j]).collect()
    }

    pub fn mean_curve(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| self.column(j).iter().sum::<f64>() / self.s as f64)
            .collect()
    }
}

// ── Quantiles and intervals ──────────────────────────────────────────

/// Linear-interpolation sample quantile.
pub fn quantile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFewSamples(samples.len()));
    }
    if !(0.0 < q && q < 1.0) {
        return Err(MetricsError::BadQuantile(q));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
    } else {
        Ok(sorted[lo])
    }
}

/// Per-time-step quantile values of an ensemble at the given levels.
pub fn empirical_quantiles(ensemble: &Ensemble, levels: &[f64]) -> Result<Vec<Vec<f64>>> {
    levels
        .iter()
        .map(|&q| (0..ensemble.seq_len()).map(|j| quantile(&ensemble.column(j), q)).collect())
        .collect()
}

/// Central prediction interval with nominal coverage `pinc` (a fraction).
#[derive(Debug, Clone)]
pub struct PredictionInterval {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub pinc: f64,
    pub alpha: f64,
}

impl PredictionInterval {
    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }
}

/// Interval from the ensemble's per-step quantiles at alpha/2 and 1-alpha/2.
pub fn interval_from_ensemble(ensemble: &Ensemble, pinc: f64) -> Result<PredictionInterval> {
    if !(0.0 < pinc && pinc < 1.0) {
        return Err(MetricsError::BadPinc(pinc));
    }
    let alpha = 1.0 - pinc;
    let qs = empirical_quantiles(ensemble, &[alpha / 2.0, 1.0 - alpha / 2.0])?;
    Ok(PredictionInterval { lower: qs[0].clone(), upper: qs[1].clone(), pinc, alpha })
}

/// Empirical coverage of a set of intervals.
#[derive(Debug, Clone, Copy)]
pub struct Coverage {
    /// Fraction of actual values inside their interval (inclusive bounds).
    pub picp: f64,
    /// |picp - pinc|.
    pub ace: f64,
    /// picp - pinc, sign preserved.
    pub ace_signed: f64,
}

/// PICP over every (interval, actual curve) pair; bounds count as covered.
pub fn picp_ace(
    intervals: &[PredictionInterval],
    actuals: &[Vec<f64>],
    pinc: f64,
) -> Result<Coverage> {
    if intervals.len() != actuals.len() {
        return Err(MetricsError::LengthMismatch { lhs: intervals.len(), rhs: actuals.len() });
    }
    if intervals.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut covered = 0usize;
    let mut total = 0usize;
    for (iv, actual) in intervals.iter().zip(actuals) {
        if iv.lower.len() != actual.len() {
            return Err(MetricsError::LengthMismatch { lhs: iv.lower.len(), rhs: actual.len() });
        }
        for ((&l, &u), &y) in iv.lower.iter().zip(&iv.upper).zip(actual) {
            if l <= y && y <= u {
                covered += 1;
            }
            total += 1;
        }
    }
    let picp = covered as f64 / total as f64;
    Ok(Coverage { picp, ace: (picp - pinc).abs(), ace_signed: picp - pinc })
}

/// Mean interval width over all evaluated points.
pub fn average_width(intervals: &[PredictionInterval]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for iv in intervals {
        for w in iv.widths() {
            sum += w;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(sum / count as f64)
}

/// Negatively oriented interval score, averaged over all points: inside the
/// interval costs -2·alpha·width; misses add -4·(distance past the bound).
pub fn overall_score(
    intervals: &[PredictionInterval],
    actuals: &[Vec<f64>],
    alpha: f64,
) -> Result<f64> {
    if intervals.len() != actuals.len() {
        return Err(MetricsError::LengthMismatch { lhs: intervals.len(), rhs: actuals.len() });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (iv, actual) in intervals.iter().zip(actuals) {
        if iv.lower.len() != actual.len() {
            return Err(MetricsError::LengthMismatch { lhs: iv.lower.len(), rhs: actual.len() });
        }
        for ((&l, &u), &y) in iv.lower.iter().zip(&iv.upper).zip(actual) {
            let w = u - l;
            let mut s = -2.0 * alpha * w;
            if y < l {
                s -= 4.0 * (l - y);
            } else if y > u {
                s -= 4.0 * (y - u);
            }
            sum += s;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(sum / count as f64)
}

/// MSE between the ensemble's mean curve and the actual curve.
pub fn point_mse(ensemble: &Ensemble, actual: &[f64]) -> Result<f64> {
    if actual.len() != ensemble.seq_len() {
        return Err(MetricsError::LengthMismatch { lhs: actual.len(), rhs: ensemble.seq_len() });
    }
    let mean = ensemble.mean_curve();
    Ok(mean.iter().zip(actual).map(|(m, y)| (m - y) * (m - y)).sum::<f64>() / actual.len() as f64)
}

// ── Kernel density estimation ────────────────────────────────────────

/// A density evaluated on a uniform grid; trapezoidal integral is 1.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

pub const KDE_GRID_POINTS: usize = 512;

/// Silverman's rule: 0.9·min(sigma, IQR/1.34)·n^(-1/5). Falls back to sigma
/// when the IQR is degenerate.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Err(MetricsError::ZeroSpread);
    }
    let iqr = quantile(samples, 0.75)? - quantile(samples, 0.25)?;
    let spread = if iqr > 0.0 { sigma.min(iqr / 1.34) } else { sigma };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

fn kde_on_grid(samples: &[f64], grid: &[f64], bandwidth: f64) -> Vec<f64> {
    let n = samples.len() as f64;
    let norm = 1.0 / (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let mut density: Vec<f64> = grid
        .iter()
        .map(|&x| {
            samples
                .iter()
                .map(|&xi| {
                    let z = (x - xi) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    // The grid truncates the kernels' tails; rescale so the trapezoidal
    // integral is exactly one, which downstream KL computation relies on.
    let integral = trapezoid(grid, &density);
    for d in density.iter_mut() {
        *d /= integral;
    }
    density
}

fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + i as f64 * step).collect()
}

/// Gaussian-kernel KDE with Silverman bandwidth on a uniform grid spanning
/// [min - 3h, max + 3h].
pub fn kde(samples: &[f64], points: usize) -> Result<DensityEstimate> {
    let bandwidth = silverman_bandwidth(samples)?;
    let (min, max) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let grid = uniform_grid(min - 3.0 * bandwidth, max + 3.0 * bandwidth, points);
    let density = kde_on_grid(samples, &grid, bandwidth);
    Ok(DensityEstimate { grid, density, bandwidth })
}

/// KDE of two sample sets on one shared grid spanning both, so the pair can
/// be compared with [`kl_divergence`].
pub fn kde_pair(
    p_samples: &[f64],
    q_samples: &[f64],
    points: usize,
) -> Result<(DensityEstimate, DensityEstimate)> {
    let hp = silverman_bandwidth(p_samples)?;
    let hq = silverman_bandwidth(q_samples)?;
    let pad = 3.0 * hp.max(hq);
    let lo = p_samples
        .iter()
        .chain(q_samples)
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = p_samples
        .iter()
        .chain(q_samples)
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let grid = uniform_grid(lo - pad, hi + pad, points);
    let p = DensityEstimate {
        density: kde_on_grid(p_samples, &grid, hp),
        grid: grid.clone(),
        bandwidth: hp,
    };
    let q = DensityEstimate { density: kde_on_grid(q_samples, &grid, hq), grid, bandwidth: hq };
    Ok((p, q))
}

/// Pointwise KL kernel over discrete distributions: sum of p·ln(p/q), with
/// both densities floored at 1e-12 before the log.
pub fn kl_discrete(p: &[f64], q: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-12;
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pi = pi.max(FLOOR);
            let qi = qi.max(FLOOR);
            pi * (pi / qi).ln()
        })
        .sum()
}

/// Trapezoidal KL divergence of two densities on the same grid.
pub fn kl_divergence(p: &DensityEstimate, q: &DensityEstimate) -> Result<f64> {
    if p.grid.len() != q.grid.len() || p.grid.iter().zip(&q.grid).any(|(a, b)| a != b) {
        return Err(MetricsError::GridMismatch);
    }
    const FLOOR: f64 = 1e-12;
    let integrand: Vec<f64> = p
        .density
        .iter()
        .zip(&q.density)
        .map(|(&pi, &qi)| {
            let pi = pi.max(FLOOR);
            let qi = qi.max(FLOOR);
            pi * (pi / qi).ln()
        })
        .collect();
    Ok(trapezoid(&p.grid, &integrand))
}
