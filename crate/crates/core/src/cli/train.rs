//! Autoencoder training with any estimator, logging the held-out bound and
//! EMA variance traces of both gradient halves.
//!
//! Every (estimator, K) run starts from the same initialization and sees the
//! same minibatches, binarizations and noise, so runs are directly
//! comparable step by step.

use serde::Serialize;

use super::{runtime, stream_id, write_atomic, write_csv, CliError, ExperimentConfig};
use crate::cli::config::DataSource;
use crate::data::{binarize_image, load_idx, split, standard_split, synthetic_dataset, Dataset};
use crate::diagnostics::VarianceTraceEma;
use crate::estimators::{estimate, iwae_bound, jvi1_estimate, log_weights, EstimatorId};
use crate::gaussian::{NoiseBatch, NoiseStream};
use crate::models::{LatentModel, MlpVae, ParamVector};

const DOMAIN_SHUFFLE: u8 = 16;
const DOMAIN_TRAIN: u8 = 17;
const DOMAIN_EVAL: u8 = 18;
/// Keeps the decoder initialization independent of the synthetic generator,
/// which draws from the same seed.
const INIT_SALT: u64 = 0x5eed_1417_0000_0001;
/// Binarization epoch reserved for the fixed evaluation images.
const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRow {
    pub step: usize,
    pub estimator: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub train_objective: f64,
    pub heldout_bound: f64,
    pub var_trace_theta: f64,
    pub var_trace_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JviRow {
    pub step: usize,
    pub estimator: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub heldout_jvi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub estimator: EstimatorId,
    pub k: usize,
    pub rows: Vec<TrainRow>,
    pub jvi_rows: Vec<JviRow>,
    pub params: ParamVector,
}

impl TrainRun {
    pub fn initial_bound(&self) -> f64 {
        self.rows.first().map_or(f64::NAN, |r| r.heldout_bound)
    }

    pub fn final_bound(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.heldout_bound)
    }
}

/// Adam on one block of coordinates.
#[derive(Debug, Clone)]
pub struct Adam {
    step_size: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: &crate::cli::config::OptimizerConfig, dim: usize) -> Self {
        Adam {
            step_size: cfg.step_size,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    /// Moves `params[idx[i]]` along `sign * grad[i]`: `+1` ascends, `-1`
    /// descends.
    pub fn step(&mut self, params: &mut [f64], idx: &[usize], grad: &[f64], sign: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (&j, &g)) in idx.iter().zip(grad).enumerate() {
            let g = sign * g;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[j] += self.step_size * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.epsilon);
        }
    }
}

/// Train and held-out splits, with the held-out images binarized once.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub heldout: Vec<Vec<f64>>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<TrainData, CliError> {
    let d = &cfg.data;
    let (train, valid, _test) = match d.source {
        DataSource::Synthetic => {
            let all = synthetic_dataset(d.synthetic_size, cfg.model.obs_dim, cfg.model.latent_dim, cfg.seed)
                .map_err(runtime)?;
            split(&all, d.fractions, cfg.seed).map_err(runtime)?
        }
        DataSource::Idx => {
            let tr = load_idx(&d.train_images).map_err(runtime)?;
            let te = load_idx(&d.test_images).map_err(runtime)?;
            standard_split(&tr, &te, d.valid_size).map_err(runtime)?
        }
    };
    if train.obs_dim() != cfg.model.obs_dim {
        return Err(CliError::Config(format!(
            "model.obs_dim is {} but the images have {} pixels",
            cfg.model.obs_dim,
            train.obs_dim()
        )));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(CliError::Runtime("training or held-out split is empty".into()));
    }
    let n = cfg.training.eval_images.min(valid.len());
    let heldout = (0..n).map(|i| binarize_image(&valid, i, cfg.seed, EVAL_EPOCH)).collect();
    Ok(TrainData { train, heldout })
}

pub fn model(cfg: &ExperimentConfig) -> MlpVae {
    MlpVae::new(cfg.model.latent_dim, cfg.model.hidden_dim, cfg.model.obs_dim)
}

pub fn initial_params(cfg: &ExperimentConfig) -> ParamVector {
    model(cfg).init_scaled(cfg.seed ^ INIT_SALT, cfg.model.init_gain)
}

/// Mean held-out IWAE bound and JVI estimate with fixed noise per image.
fn evaluate(cfg: &ExperimentConfig, m: &MlpVae, params: &ParamVector, data: &TrainData, k: usize) -> (f64, f64) {
    let (mut bound, mut jvi) = (0.0, 0.0);
    for (i, x) in data.heldout.iter().enumerate() {
        let eps = NoiseBatch::draw(cfg.seed, stream_id(DOMAIN_EVAL, i, k), 0, k, m.latent_dim());
        let rows: Vec<&[f64]> = eps.rows().collect();
        let lw = m.log_weights_value(params.flat(), x, &rows);
        bound += iwae_bound(&lw).unwrap_or(f64::NAN);
        jvi += if k >= 2 { jvi1_estimate(&lw).unwrap_or(f64::NAN) } else { f64::NAN };
    }
    let n = data.heldout.len() as f64;
    (bound / n, jvi / n)
}

fn checkpoint_name(id: EstimatorId, k: usize) -> String {
    format!("checkpoint_{}_k{k}.bin", id.name())
}

fn save_checkpoint(cfg: &ExperimentConfig, id: EstimatorId, k: usize, p: &ParamVector) -> Result<(), CliError> {
    let mut bytes = Vec::new();
    p.write_checkpoint(&mut bytes).map_err(runtime)?;
    write_atomic(&cfg.output.join(checkpoint_name(id, k)), &bytes)
}

/// Minibatch schedule: image indices of step `step`, and the epoch they
/// belong to. Each epoch is a fresh seeded permutation.
struct Batches {
    n: usize,
    batch: usize,
    per_epoch: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
}

impl Batches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let batch = batch.min(n);
        Batches {
            n,
            batch,
            per_epoch: n / batch,
            seed,
            epoch: usize::MAX,
            order: Vec::new(),
        }
    }

    fn get(&mut self, step: usize) -> (usize, &[usize]) {
        let epoch = step / self.per_epoch;
        if epoch != self.epoch {
            let s = NoiseStream::new(self.seed, stream_id(DOMAIN_SHUFFLE, epoch, 0));
            self.order = (0..self.n).collect();
            for i in (1..self.n).rev() {
                let j = ((s.uniform(i as u64) * (i + 1) as f64) as usize).min(i);
                self.order.swap(i, j);
            }
            self.epoch = epoch;
        }
        let start = (step % self.per_epoch) * self.batch;
        (epoch, &self.order[start..start + self.batch])
    }
}

struct StepResult {
    objective: f64,
    theta: Vec<f64>,
    phi: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn batch_gradient(
    cfg: &ExperimentConfig,
    m: &MlpVae,
    params: &ParamVector,
    data: &TrainData,
    batches: &mut Batches,
    id: EstimatorId,
    k: usize,
    step: usize,
) -> Result<StepResult, CliError> {
    let (epoch, idx) = batches.get(step);
    let idx = idx.to_vec();
    let mut out = StepResult {
        objective: 0.0,
        theta: vec![0.0; params.theta_indices().len()],
        phi: vec![0.0; params.phi_indices().len()],
    };
    let scale = 1.0 / idx.len() as f64;
    for (b, &i) in idx.iter().enumerate() {
        let x = binarize_image(&data.train, i, cfg.seed, epoch as u64);
        let eps = NoiseBatch::draw(cfg.seed, stream_id(DOMAIN_TRAIN, step, k), b as u64, k, m.latent_dim());
        let lw = log_weights(m, params, &x, &eps).map_err(runtime)?;
        let g = estimate(id, cfg.estimator.alpha_for(id), &lw).map_err(runtime)?;
        out.objective += scale * if id.is_jvi() { jvi1_estimate(lw.log_w()).map_err(runtime)? } else { lw.iwae_bound() };
        for (a, v) in out.theta.iter_mut().zip(&g.theta_grad) {
            *a += scale * v;
        }
        for (a, v) in out.phi.iter_mut().zip(&g.phi_grad) {
            *a += scale * v;
        }
    }
    let finite = out.objective.is_finite() && out.theta.iter().chain(&out.phi).all(|v| v.is_finite());
    if !finite {
        return Err(CliError::Runtime(format!("{id} K={k}: non-finite objective or gradient at step {step}")));
    }
    Ok(out)
}

/// Total optimizer steps: the step cap or the epoch budget, whichever is
/// smaller.
pub fn total_steps(cfg: &ExperimentConfig, train_len: usize) -> usize {
    let per_epoch = (train_len / cfg.training.batch_size.min(train_len)).max(1);
    cfg.training.max_steps.min(cfg.training.epochs * per_epoch)
}

/// One training run. On divergence the last good parameters are written
/// as the run's checkpoint before the error is returned.
pub fn train_one(cfg: &ExperimentConfig, data: &TrainData, id: EstimatorId, k: usize) -> Result<TrainRun, CliError> {
    let m = model(cfg);
    let mut params = initial_params(cfg);
    let theta_idx = params.theta_indices();
    let phi_idx = params.phi_indices();
    let mut opt_theta = Adam::new(&cfg.optimizer, theta_idx.len());
    let mut opt_phi = Adam::new(&cfg.optimizer, phi_idx.len());
    let t = &cfg.training;
    let mut ema_theta = VarianceTraceEma::new(theta_idx.len(), t.ema_decay).map_err(runtime)?;
    let mut ema_phi = VarianceTraceEma::new(phi_idx.len(), t.ema_decay).map_err(runtime)?;
    let eval_k = if t.eval_k == 0 { k } else { t.eval_k };
    let steps = total_steps(cfg, data.train.len());
    let mut batches = Batches::new(data.train.len(), t.batch_size, cfg.seed);
    let mut run = TrainRun {
        estimator: id,
        k,
        rows: Vec::new(),
        jvi_rows: Vec::new(),
        params: params.clone(),
    };
    // Row `s` describes the parameters after `s` updates; its objective and
    // traces include the gradient taken at those parameters.
    for step in 0..=steps {
        let g = match batch_gradient(cfg, &m, &params, data, &mut batches, id, k, step) {
            Ok(g) => g,
            Err(e) => {
                save_checkpoint(cfg, id, k, &params)?;
                return Err(e);
            }
        };
        let vt = ema_theta.push(&g.theta).map_err(runtime)?;
        let vp = ema_phi.push(&g.phi).map_err(runtime)?;
        if step % t.log_every == 0 || step == steps {
            let (bound, jvi) = evaluate(cfg, &m, &params, data, eval_k);
            run.rows.push(TrainRow {
                step,
                estimator: id.name().to_string(),
                k,
                train_objective: g.objective,
                heldout_bound: bound,
                var_trace_theta: vt,
                var_trace_phi: vp,
            });
            if id.is_jvi() {
                run.jvi_rows.push(JviRow {
                    step,
                    estimator: id.name().to_string(),
                    k,
                    heldout_jvi: jvi,
                });
            }
        }
        if step == steps {
            break;
        }
        let before = params.clone();
        opt_theta.step(params.flat_mut(), &theta_idx, &g.theta, 1.0);
        // RWS trains the inference network on its own objective, returned
        // as a descent direction.
        let sign = if id.is_rws() { -1.0 } else { 1.0 };
        opt_phi.step(params.flat_mut(), &phi_idx, &g.phi, sign);
        if !params.flat().iter().all(|v| v.is_finite()) {
            save_checkpoint(cfg, id, k, &before)?;
            return Err(CliError::Runtime(format!("{id} K={k}: parameters diverged at step {step}")));
        }
    }
    run.params = params;
    Ok(run)
}

pub fn run(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let ids = cfg.estimator.parsed_ids()?;
    let mut rows = Vec::new();
    let mut jvi_rows = Vec::new();
    for &id in &ids {
        for &k in &cfg.estimator.k_grid {
            let r = train_one(cfg, &data, id, k)?;
            save_checkpoint(cfg, id, k, &r.params)?;
            rows.extend(r.rows);
            jvi_rows.extend(r.jvi_rows);
        }
    }
    write_csv(&cfg.output.join("train.csv"), &rows)?;
    if ids.iter().any(|id| id.is_jvi()) {
        write_csv(&cfg.output.join("heldout_jvi.csv"), &jvi_rows)?;
    }
    Ok(())
}
