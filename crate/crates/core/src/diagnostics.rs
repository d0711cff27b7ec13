//! Measurement protocol for gradient estimators: per-coordinate moments,
//! SNR and bias, the paired t-test, log-log scaling fits and the running
//! covariance trace used during training.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::estimators::{self, EstimatorError, EstimatorId};
use crate::gaussian::NoiseBatch;
use crate::models::{LatentModel, ParamVector};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("log-log fit needs positive statistics, got {0}")]
    NonPositive(f64),
    #[error("log-log fit needs strictly increasing K")]
    NotIncreasing,
    #[error("decay must lie in (0, 1), got {0}")]
    Decay(f64),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

pub type Result<T> = std::result::Result<T, DiagError>;

/// Sample counts at or above this use the normal approximation to the t
/// distribution.
pub const NORMAL_APPROX_N: usize = 10_000;

/// Streaming per-coordinate mean and sum of squared deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Moments {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(DiagError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
        Ok(())
    }

    /// Chan et al. pairwise combination; exact up to rounding.
    pub fn merge(&mut self, other: &Moments) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(DiagError::Dimension {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        if other.n == 0 {
            return Ok(());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for j in 0..self.dim() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * nb / n;
            self.m2[j] += other.m2[j] + delta * delta * na * nb / n;
        }
        self.n += other.n;
        Ok(())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> Result<Vec<f64>> {
        if self.n < 2 {
            return Err(DiagError::TooFewSamples { need: 2, got: self.n });
        }
        Ok(self.m2.iter().map(|s| s / (self.n - 1) as f64).collect())
    }

    /// Standard error of each mean.
    pub fn stderr(&self) -> Result<Vec<f64>> {
        let n = self.n as f64;
        Ok(self.variance()?.into_iter().map(|v| (v / n).sqrt()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorStats {
    pub estimator: EstimatorId,
    pub k: usize,
    pub n: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub bias2: Vec<f64>,
    /// `None` where the variance is zero.
    pub snr: Vec<Option<f64>>,
}

impl EstimatorStats {
    pub fn from_moments(m: &Moments, reference: &[f64], estimator: EstimatorId, k: usize) -> Result<Self> {
        if reference.len() != m.dim() {
            return Err(DiagError::Dimension {
                expected: m.dim(),
                got: reference.len(),
            });
        }
        let variance = m.variance()?;
        let snr = m
            .mean()
            .iter()
            .zip(&variance)
            .map(|(mu, v)| (*v > 0.0).then(|| mu.abs() / v.sqrt()))
            .collect();
        Ok(EstimatorStats {
            estimator,
            k,
            n: m.count(),
            mean: m.mean().to_vec(),
            bias2: m.mean().iter().zip(reference).map(|(a, b)| (a - b).powi(2)).collect(),
            variance,
            snr,
        })
    }
}

/// Per-coordinate statistics of `samples` (one row per gradient draw).
pub fn estimator_stats(
    samples: &[Vec<f64>],
    reference: &[f64],
    estimator: EstimatorId,
    k: usize,
) -> Result<EstimatorStats> {
    let mut m = Moments::new(reference.len());
    for s in samples {
        m.push(s)?;
    }
    EstimatorStats::from_moments(&m, reference, estimator, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n: usize,
    pub coordinate: usize,
    /// Set when the differences have zero variance.
    pub degenerate: bool,
}

/// Two-sided p-value for a t statistic with `n - 1` degrees of freedom.
pub fn t_p_value(t: f64, n: usize) -> f64 {
    let tail = if n >= NORMAL_APPROX_N {
        Normal::new(0.0, 1.0).expect("unit normal").sf(t.abs())
    } else {
        StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .sf(t.abs())
    };
    (2.0 * tail).clamp(0.0, 1.0)
}

/// t-test from the moments of paired differences.
pub fn t_test_from_moments(diff_mean: f64, diff_m2: f64, n: usize, coordinate: usize) -> Result<TTestResult> {
    if n < 2 {
        return Err(DiagError::TooFewSamples { need: 2, got: n });
    }
    let var = diff_m2 / (n - 1) as f64;
    if var <= 0.0 {
        let (t, p_value) = if diff_mean == 0.0 {
            (0.0, 1.0)
        } else {
            (diff_mean.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTestResult {
            t,
            p_value,
            n,
            coordinate,
            degenerate: true,
        });
    }
    let t = diff_mean / (var / n as f64).sqrt();
    Ok(TTestResult {
        t,
        p_value: t_p_value(t, n),
        n,
        coordinate,
        degenerate: false,
    })
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(DiagError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut m = Moments::new(1);
    for (x, y) in a.iter().zip(b) {
        m.push(&[x - y])?;
    }
    t_test_from_moments(m.mean[0], m.m2[0], m.n, 0)
}

/// Per-coordinate paired t-tests, streamed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDiffs(Moments);

impl PairedDiffs {
    pub fn new(dim: usize) -> Self {
        PairedDiffs(Moments::new(dim))
    }

    pub fn push(&mut self, a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != b.len() {
            return Err(DiagError::Dimension {
                expected: a.len(),
                got: b.len(),
            });
        }
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        self.0.push(&d)
    }

    pub fn merge(&mut self, other: &PairedDiffs) -> Result<()> {
        self.0.merge(&other.0)
    }

    pub fn tests(&self) -> Result<Vec<TTestResult>> {
        (0..self.0.dim())
            .map(|j| t_test_from_moments(self.0.mean[j], self.0.m2[j], self.0.n, j))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

/// Least-squares slope of `ln(statistic)` against `ln(K)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(DiagError::TooFewSamples {
            need: 3,
            got: points.len(),
        });
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) || points[0].0 <= 0.0 {
        return Err(DiagError::NotIncreasing);
    }
    if let Some(&(_, s)) = points.iter().find(|(_, s)| !(*s > 0.0 && s.is_finite())) {
        return Err(DiagError::NonPositive(s));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(SlopeFit {
        slope,
        stderr: (rss / (n - 2.0) / sxx).sqrt(),
        intercept,
    })
}

/// Exponential moving averages of the first and second moment of a
/// gradient stream; the reported trace is the per-coordinate variance
/// averaged over coordinates, with the usual `1 - decay^t` debiasing.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceTraceEma {
    decay: f64,
    steps: u32,
    m1: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceTraceEma {
    pub fn new(dim: usize, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(DiagError::Decay(decay));
        }
        Ok(VarianceTraceEma {
            decay,
            steps: 0,
            m1: vec![0.0; dim],
            m2: vec![0.0; dim],
        })
    }

    pub fn push(&mut self, g: &[f64]) -> Result<f64> {
        if g.len() != self.m1.len() {
            return Err(DiagError::Dimension {
                expected: self.m1.len(),
                got: g.len(),
            });
        }
        let d = self.decay;
        for ((a, b), &v) in self.m1.iter_mut().zip(&mut self.m2).zip(g) {
            *a = d * *a + (1.0 - d) * v;
            *b = d * *b + (1.0 - d) * v * v;
        }
        self.steps += 1;
        Ok(self.value())
    }

    /// `1 / (1 - decay^t)`.
    pub fn correction(&self) -> f64 {
        1.0 / (1.0 - self.decay.powi(self.steps as i32))
    }

    pub fn value(&self) -> f64 {
        if self.steps == 0 || self.m1.is_empty() {
            return 0.0;
        }
        let c = self.correction();
        let total: f64 = self
            .m1
            .iter()
            .zip(&self.m2)
            .map(|(a, b)| (b * c - (a * c).powi(2)).max(0.0))
            .sum();
        total / self.m1.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMean {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n: usize,
}

/// Monte Carlo estimate of the expected standard IWAE inference-network
/// gradient, using draws `0..n_ref` of `(seed, stream)`.
pub fn reference_mean<M: LatentModel + ?Sized>(
    model: &M,
    params: &ParamVector,
    x: &[f64],
    k: usize,
    n_ref: usize,
    seed: u64,
    stream: u64,
) -> Result<ReferenceMean> {
    let mut m = Moments::new(params.phi_indices().len());
    for draw in 0..n_ref as u64 {
        let eps = NoiseBatch::draw(seed, stream, draw, k, model.latent_dim());
        let lw = estimators::log_weights(model, params, x, &eps)?;
        m.push(&estimators::iwae_grad_standard(&lw)?.phi_grad)?;
    }
    Ok(ReferenceMean {
        stderr: m.stderr()?,
        mean: m.mean,
        n: n_ref,
    })
}
