//! SNR, squared bias and variance of inference-network gradients on the
//! linear-Gaussian model, swept over `K`.
//!
//! Each trial draws `theta* ~ N(0, I)`, one observation `x ~ p(x | theta*)`
//! and parameters at the optimum for `theta*` plus Gaussian noise. All
//! estimators then see the same noise batches, and bias is measured against
//! a separate Monte Carlo estimate of the expected standard gradient.

use serde::Serialize;

use super::{runtime, stream_id, write_csv, CliError, ExperimentConfig};
use crate::diagnostics::{reference_mean, EstimatorStats, Moments, PairedDiffs};
use crate::estimators::{estimate, log_weights, EstimatorId};
use crate::gaussian::{NoiseBatch, NoiseStream};
use crate::models::{ParamVector, ToyModel};

const DOMAIN_THETA: u8 = 1;
const DOMAIN_PERTURB: u8 = 2;
const DOMAIN_MEASURE: u8 = 3;
const DOMAIN_REFERENCE: u8 = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnrRow {
    pub estimator: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub trial: usize,
    pub coordinate: usize,
    pub mean: f64,
    pub variance: f64,
    pub bias2: f64,
    /// Empty when the variance is zero.
    pub snr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TTestRow {
    pub estimator: String,
    pub reference: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub trial: usize,
    pub coordinate: usize,
    pub t: f64,
    pub p_value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToySnrReport {
    pub stats: Vec<SnrRow>,
    pub ttests: Vec<TTestRow>,
}

/// Averages over trials and coordinates for one (estimator, K) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSummary {
    pub snr: f64,
    pub variance: f64,
    pub bias2: f64,
}

impl ToySnrReport {
    pub fn summary(&self, estimator: EstimatorId, k: usize) -> Option<CellSummary> {
        let rows: Vec<&SnrRow> = self
            .stats
            .iter()
            .filter(|r| r.estimator == estimator.name() && r.k == k)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(CellSummary {
            snr: rows.iter().map(|r| r.snr.unwrap_or(0.0)).sum::<f64>() / n,
            variance: rows.iter().map(|r| r.variance).sum::<f64>() / n,
            bias2: rows.iter().map(|r| r.bias2).sum::<f64>() / n,
        })
    }
}

/// Parameters and observation of one trial.
pub fn toy_trial(cfg: &ExperimentConfig, model: &ToyModel, trial: usize) -> Result<(ParamVector, Vec<f64>), CliError> {
    let d = model.dim();
    let s = NoiseStream::new(cfg.seed, stream_id(DOMAIN_THETA, trial, 0));
    let mut theta = vec![0.0; d];
    s.fill_normal(0, &mut theta);
    let x = model.sample_x(&theta, &s, d as u64);
    let params = model
        .optimal_params(&theta)
        .map_err(runtime)?
        .perturbed(cfg.measurement.perturbation, cfg.seed, stream_id(DOMAIN_PERTURB, trial, 0));
    Ok((params, x))
}

/// Noise batch number `draw` of the measurement stream for `(trial, k)`.
pub fn measurement_noise(cfg: &ExperimentConfig, trial: usize, k: usize, draw: usize, dim: usize) -> NoiseBatch {
    NoiseBatch::draw(cfg.seed, stream_id(DOMAIN_MEASURE, trial, k), draw as u64, k, dim)
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<ToySnrReport, CliError> {
    let model = super::toy_model(cfg);
    let ids = cfg.estimator.parsed_ids()?;
    let m = &cfg.measurement;
    let mut report = ToySnrReport::default();
    for trial in 0..m.trials {
        let (params, x) = toy_trial(cfg, &model, trial)?;
        let dim = params.phi_indices().len();
        for &k in &cfg.estimator.k_grid {
            let active: Vec<EstimatorId> = ids.iter().copied().filter(|id| k >= id.min_k()).collect();
            if active.is_empty() {
                continue;
            }
            let reference = reference_mean(
                &model,
                &params,
                &x,
                k,
                m.reference_samples,
                cfg.seed,
                stream_id(DOMAIN_REFERENCE, trial, k),
            )
            .map_err(runtime)?;
            let mut moments: Vec<Moments> = active.iter().map(|_| Moments::new(dim)).collect();
            let mut paired: Vec<PairedDiffs> = active.iter().map(|_| PairedDiffs::new(dim)).collect();
            for draw in 0..m.samples {
                let eps = measurement_noise(cfg, trial, k, draw, model.dim());
                let lw = log_weights(&model, &params, &x, &eps).map_err(runtime)?;
                let mut cache: Vec<(EstimatorId, Vec<f64>)> = Vec::new();
                let mut phi = |id: EstimatorId| -> Result<Vec<f64>, CliError> {
                    if let Some((_, g)) = cache.iter().find(|(c, _)| *c == id) {
                        return Ok(g.clone());
                    }
                    let g = estimate(id, cfg.estimator.alpha_for(id), &lw).map_err(runtime)?.phi_grad;
                    cache.push((id, g.clone()));
                    Ok(g)
                };
                for (i, &id) in active.iter().enumerate() {
                    let g = phi(id)?;
                    let r = phi(id.unbiased_reference())?;
                    moments[i].push(&g).map_err(runtime)?;
                    paired[i].push(&g, &r).map_err(runtime)?;
                }
            }
            for (i, &id) in active.iter().enumerate() {
                let s = EstimatorStats::from_moments(&moments[i], &reference.mean, id, k).map_err(runtime)?;
                for c in 0..dim {
                    report.stats.push(SnrRow {
                        estimator: id.name().to_string(),
                        k,
                        trial,
                        coordinate: c,
                        mean: s.mean[c],
                        variance: s.variance[c],
                        bias2: s.bias2[c],
                        snr: s.snr[c],
                    });
                }
                if id.unbiased_reference() == id {
                    continue;
                }
                for t in paired[i].tests().map_err(runtime)? {
                    report.ttests.push(TTestRow {
                        estimator: id.name().to_string(),
                        reference: id.unbiased_reference().name().to_string(),
                        k,
                        trial,
                        coordinate: t.coordinate,
                        t: t.t,
                        p_value: t.p_value,
                        n: t.n,
                    });
                }
            }
        }
    }
    report
        .stats
        .sort_by(|a, b| (&a.estimator, a.k, a.trial, a.coordinate).cmp(&(&b.estimator, b.k, b.trial, b.coordinate)));
    report
        .ttests
        .sort_by(|a, b| (&a.estimator, a.k, a.trial, a.coordinate).cmp(&(&b.estimator, b.k, b.trial, b.coordinate)));
    Ok(report)
}

pub fn run(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let report = sweep(cfg)?;
    write_csv(&cfg.output.join("toy_snr.csv"), &report.stats)?;
    write_csv(&cfg.output.join("toy_snr_ttest.csv"), &report.ttests)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.measurement.trials = 1;
        cfg.measurement.samples = 10;
        cfg.measurement.reference_samples = 10;
        cfg.estimator.k_grid = vec![1];
        cfg
    }

    #[test]
    fn single_cell_smoke() {
        let cfg = smoke();
        let r = sweep(&cfg).unwrap();
        let ids = cfg.estimator.parsed_ids().unwrap();
        let usable = ids.iter().filter(|id| id.min_k() == 1).count();
        let coords = cfg.model.latent_dim * (cfg.model.latent_dim + 1);
        assert_eq!(r.stats.len(), usable * coords);
        assert!(r.stats.iter().all(|s| s.mean.is_finite() && s.variance.is_finite() && s.bias2.is_finite()));
        assert!(r.stats.windows(2).all(|w| (&w[0].estimator, w[0].coordinate) <= (&w[1].estimator, w[1].coordinate)));
    }

    #[test]
    fn rerun_is_identical() {
        let mut cfg = smoke();
        cfg.estimator.k_grid = vec![2, 3];
        assert_eq!(sweep(&cfg).unwrap(), sweep(&cfg).unwrap());
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(sweep(&cfg).unwrap(), sweep(&other).unwrap());
    }
}
