//! Linear-Gaussian toy model.
//!
//! `z ~ N(theta, I)`, `x | z ~ N(z, I)` and `q(z | x) = N(A x + b, v I)` with
//! a frozen variance `v` (two thirds by default). The marginal
//! `p(x) = N(theta, 2 I)` and posterior `p(z | x) = N((x + theta) / 2, I / 2)`
//! are available in closed form, which makes the model the reference
//! testbed for every estimator.

use super::params::contiguous;
use super::{check_dim, LatentModel, ParamSlice, ParamVector, Result, Role, SamplePartials};
use crate::gaussian::{DiagGaussian, NoiseStream, LN_2PI};
use crate::tape::{TapeGraph, TapeScalar};

pub const DEFAULT_Q_VARIANCE: f64 = 2.0 / 3.0;
/// Variance of the exact posterior.
pub const POSTERIOR_VARIANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    dim: usize,
    q_variance: f64,
    tied_bias: bool,
}

impl ToyModel {
    pub fn new(dim: usize) -> Self {
        ToyModel {
            dim,
            q_variance: DEFAULT_Q_VARIANCE,
            tied_bias: false,
        }
    }

    /// Overrides the frozen inference variance (one half makes `q` exact at
    /// the optimum).
    pub fn with_q_variance(mut self, v: f64) -> Self {
        self.q_variance = v;
        self
    }

    /// Shared-parameter variant: the inference mean is `A x + theta / 2`, so
    /// `theta` is read by both `p` and `q` and there is no separate `b`.
    pub fn tied(dim: usize) -> Self {
        ToyModel {
            tied_bias: true,
            ..ToyModel::new(dim)
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn q_variance(&self) -> f64 {
        self.q_variance
    }

    pub fn is_tied(&self) -> bool {
        self.tied_bias
    }

    /// Packs `(theta, A, b)` into a parameter vector; `A` is row-major and
    /// `b` is ignored for the tied variant.
    pub fn params(&self, theta: &[f64], a: &[f64], b: &[f64]) -> Result<ParamVector> {
        let d = self.dim;
        check_dim("theta", d, theta.len())?;
        check_dim("A", d * d, a.len())?;
        let mut flat = Vec::with_capacity(d * d + 2 * d);
        flat.extend_from_slice(theta);
        flat.extend_from_slice(a);
        if !self.tied_bias {
            check_dim("b", d, b.len())?;
            flat.extend_from_slice(b);
        }
        ParamVector::new(self.layout(), flat)
    }

    /// Parameters at the exact posterior-mean map for the given `theta`.
    pub fn optimal_params(&self, theta: &[f64]) -> Result<ParamVector> {
        let (a, b) = optimal_inference(theta);
        self.params(theta, &a, &b)
    }

    /// `log N(x; theta, 2 I)`.
    pub fn log_marginal(&self, params: &ParamVector, x: &[f64]) -> Result<f64> {
        check_dim("x", self.dim, x.len())?;
        let theta = &params.flat()[..self.dim];
        Ok(x.iter()
            .zip(theta)
            .map(|(xj, tj)| -0.5 * (2.0 * std::f64::consts::TAU).ln() - 0.25 * (xj - tj).powi(2))
            .sum())
    }

    /// Draws `x ~ p(x | theta)` from entries `start..start + d` of a stream.
    pub fn sample_x(&self, theta: &[f64], noise: &NoiseStream, start: u64) -> Vec<f64> {
        let mut e = vec![0.0; self.dim];
        noise.fill_normal(start, &mut e);
        theta
            .iter()
            .zip(e)
            .map(|(t, e)| t + std::f64::consts::SQRT_2 * e)
            .collect()
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let d = self.dim;
        (0, d, d + d * d)
    }

    fn inference_mean(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let (t0, a0, b0) = self.offsets();
        (0..d)
            .map(|j| {
                let ax: f64 = (0..d).map(|k| params[a0 + j * d + k] * x[k]).sum();
                ax + if self.tied_bias {
                    0.5 * params[t0 + j]
                } else {
                    params[b0 + j]
                }
            })
            .collect()
    }
}

/// `A* = I / 2`, `b* = theta / 2`: the exact posterior mean is
/// `(x + theta) / 2`.
pub fn optimal_inference(theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = theta.len();
    let mut a = vec![0.0; d * d];
    for j in 0..d {
        a[j * d + j] = 0.5;
    }
    (a, theta.iter().map(|t| 0.5 * t).collect())
}

impl LatentModel for ToyModel {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn obs_dim(&self) -> usize {
        self.dim
    }

    fn layout(&self) -> Vec<ParamSlice> {
        let d = self.dim;
        if self.tied_bias {
            contiguous(&[("theta", d, Role::Shared), ("A", d * d, Role::Phi)])
        } else {
            contiguous(&[("theta", d, Role::Theta), ("A", d * d, Role::Phi), ("b", d, Role::Phi)])
        }
    }

    fn log_joint(
        &self,
        g: &mut TapeGraph,
        params: &[TapeScalar],
        x: &[f64],
        z: &[TapeScalar],
    ) -> Result<TapeScalar> {
        let d = self.dim;
        check_dim("params", self.num_params(), params.len())?;
        check_dim("x", d, x.len())?;
        check_dim("z", d, z.len())?;
        let mut terms = Vec::with_capacity(2 * d + 1);
        for j in 0..d {
            let prior = g.sub(z[j], params[j])?;
            let prior = g.square(prior)?;
            let xj = g.constant(x[j])?;
            let lik = g.sub(xj, z[j])?;
            let lik = g.square(lik)?;
            let both = g.add(prior, lik)?;
            terms.push(g.scale(both, -0.5)?);
        }
        terms.push(g.constant(-LN_2PI * d as f64)?);
        Ok(g.sum(&terms)?)
    }

    fn inference(&self, g: &mut TapeGraph, params: &[TapeScalar], x: &[f64]) -> Result<DiagGaussian> {
        let d = self.dim;
        check_dim("params", self.num_params(), params.len())?;
        check_dim("x", d, x.len())?;
        let (t0, a0, b0) = self.offsets();
        let xs: Vec<TapeScalar> = x
            .iter()
            .map(|&v| g.constant(v))
            .collect::<std::result::Result<_, _>>()?;
        let half = g.constant(0.5)?;
        let log_scale = g.constant(0.5 * self.q_variance.ln())?;
        let mut mean = Vec::with_capacity(d);
        for j in 0..d {
            let mut terms = Vec::with_capacity(d + 1);
            for k in 0..d {
                terms.push(g.mul(params[a0 + j * d + k], xs[k])?);
            }
            terms.push(if self.tied_bias {
                g.mul(params[t0 + j], half)?
            } else {
                params[b0 + j]
            });
            mean.push(g.sum(&terms)?);
        }
        Ok(DiagGaussian::new(mean, vec![log_scale; d])?)
    }

    fn log_weight_value(&self, params: &[f64], x: &[f64], eps: &[f64]) -> Result<f64> {
        let d = self.dim;
        check_dim("params", self.num_params(), params.len())?;
        check_dim("x", d, x.len())?;
        check_dim("eps", d, eps.len())?;
        let mu = self.inference_mean(params, x);
        let sigma = self.q_variance.sqrt();
        let mut lw = 0.0;
        for j in 0..d {
            let z = mu[j] + sigma * eps[j];
            let prior = z - params[j];
            let lik = x[j] - z;
            lw += -0.5 * (prior * prior + lik * lik) - LN_2PI;
            lw -= -0.5 * LN_2PI - sigma.ln() - 0.5 * eps[j] * eps[j];
        }
        Ok(lw)
    }

    fn sample_partials(&self, params: &[f64], x: &[f64], eps: &[f64]) -> Result<SamplePartials> {
        let d = self.dim;
        let n = self.num_params();
        check_dim("params", n, params.len())?;
        check_dim("x", d, x.len())?;
        check_dim("eps", d, eps.len())?;
        let (t0, a0, b0) = self.offsets();
        let mu = self.inference_mean(params, x);
        let v = self.q_variance;
        let sigma = v.sqrt();
        let mut out = SamplePartials {
            log_w: 0.0,
            dlogw_dz: vec![0.0; d],
            model_grad: vec![0.0; n],
            score: vec![0.0; n],
            path: vec![0.0; n],
        };
        for j in 0..d {
            let z = mu[j] + sigma * eps[j];
            let prior = z - params[t0 + j];
            let lik = x[j] - z;
            out.log_w += -0.5 * (prior * prior + lik * lik) - LN_2PI;
            out.log_w -= -0.5 * LN_2PI - sigma.ln() - 0.5 * eps[j] * eps[j];
            // d log q / d mu_j at fixed z, and d log w / d z_j.
            let dq_dmu = (z - mu[j]) / v;
            let dw_dz = lik - prior + dq_dmu;
            out.dlogw_dz[j] = dw_dz;
            out.model_grad[t0 + j] = prior;
            for (k, xk) in x.iter().enumerate() {
                out.score[a0 + j * d + k] = dq_dmu * xk;
                out.path[a0 + j * d + k] = dw_dz * xk;
            }
            if self.tied_bias {
                out.score[t0 + j] = 0.5 * dq_dmu;
                out.path[t0 + j] = 0.5 * dw_dz;
            } else {
                out.score[b0 + j] = dq_dmu;
                out.path[b0 + j] = dw_dz;
            }
        }
        Ok(out)
    }
}
