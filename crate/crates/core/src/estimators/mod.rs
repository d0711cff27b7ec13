//! Multi-sample bounds and their gradient estimators.
//!
//! Every direct estimator here is a weighted sum of the per-sample partials
//! held by a [`LogWeightBatch`]:
//!
//! ```text
//! theta: sum_i a_i * model_grad_i
//! phi:   sum_i b_i * path_i + c_i * score_i
//! ```
//!
//! so the estimators differ only in their coefficients, and several of them
//! can be evaluated on one batch under common random numbers.
//!
//! Sign convention: everything is an ascent direction on its objective
//! except the two RWS inference-network gradients, which are returned as
//! descent directions on the KL surrogate. `dreg_alpha_phi_grad` folds that
//! sign in, so at `alpha = 1` it equals `-rws_dreg_phi_grad`.

mod surrogate;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::gaussian::{DistError, NoiseBatch};
use crate::models::{check_dim, LatentModel, ModelError, ParamVector, Role, SamplePartials};
use crate::tape::TapeError;

pub use surrogate::{surrogate_loss, surrogate_loss_anchored, SurrogateKind};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("log-weight {index} is {value}; parameters are degenerate")]
    NonFiniteLogWeight { index: usize, value: f64 },
    #[error("every log-weight is -inf")]
    Degenerate,
    #[error("non-finite gradient entry at {index}")]
    NonFiniteGradient { index: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("{0} requires alpha")]
    MissingAlpha(&'static str),
    #[error("{0} takes no alpha")]
    UnexpectedAlpha(EstimatorId),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorId {
    Iwae,
    Stl,
    IwaeDreg,
    RwsWake,
    RwsDreg,
    DregAlpha,
    Jvi1,
    Jvi1Dreg,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 8] = [
        EstimatorId::Iwae,
        EstimatorId::Stl,
        EstimatorId::IwaeDreg,
        EstimatorId::RwsWake,
        EstimatorId::RwsDreg,
        EstimatorId::DregAlpha,
        EstimatorId::Jvi1,
        EstimatorId::Jvi1Dreg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorId::Iwae => "iwae",
            EstimatorId::Stl => "stl",
            EstimatorId::IwaeDreg => "iwae-dreg",
            EstimatorId::RwsWake => "rws-wake",
            EstimatorId::RwsDreg => "rws-dreg",
            EstimatorId::DregAlpha => "dreg-alpha",
            EstimatorId::Jvi1 => "jvi1",
            EstimatorId::Jvi1Dreg => "jvi1-dreg",
        }
    }

    /// RWS estimators train the inference network on a separate objective.
    pub fn is_rws(self) -> bool {
        matches!(self, EstimatorId::RwsWake | EstimatorId::RwsDreg)
    }

    pub fn is_jvi(self) -> bool {
        matches!(self, EstimatorId::Jvi1 | EstimatorId::Jvi1Dreg)
    }

    /// The estimator whose expectation this one is meant to match.
    pub fn unbiased_reference(self) -> EstimatorId {
        match self {
            EstimatorId::RwsWake | EstimatorId::RwsDreg => EstimatorId::RwsWake,
            EstimatorId::Jvi1 | EstimatorId::Jvi1Dreg => EstimatorId::Jvi1,
            _ => EstimatorId::Iwae,
        }
    }

    pub fn min_k(self) -> usize {
        if self.is_jvi() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorId {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorId::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| EstimatorError::Unknown {
                what: "estimator",
                name: s.to_string(),
            })
    }
}

/// One gradient draw. `theta_grad` is indexed like
/// [`ParamVector::theta_indices`] and `phi_grad` like
/// [`ParamVector::phi_indices`]; either is empty when the estimator does not
/// produce it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub estimator: EstimatorId,
    pub k: usize,
    pub alpha: Option<f64>,
    pub theta_grad: Vec<f64>,
    pub phi_grad: Vec<f64>,
}

impl GradEstimate {
    pub fn new(
        estimator: EstimatorId,
        k: usize,
        alpha: Option<f64>,
        theta_grad: Vec<f64>,
        phi_grad: Vec<f64>,
    ) -> Result<Self> {
        match (estimator, alpha) {
            (EstimatorId::DregAlpha, None) => return Err(EstimatorError::MissingAlpha("dreg-alpha")),
            (EstimatorId::DregAlpha, Some(a)) => check_alpha(a)?,
            (_, Some(_)) => return Err(EstimatorError::UnexpectedAlpha(estimator)),
            _ => {}
        }
        if let Some(index) = theta_grad.iter().chain(&phi_grad).position(|v| !v.is_finite()) {
            return Err(EstimatorError::NonFiniteGradient { index });
        }
        Ok(GradEstimate {
            estimator,
            k,
            alpha,
            theta_grad,
            phi_grad,
        })
    }

    /// Scatters both parts onto the flat parameter vector; shared
    /// coordinates receive the sum.
    pub fn dense(&self, roles: &[Role]) -> Vec<f64> {
        let mut out = vec![0.0; roles.len()];
        let theta = roles.iter().enumerate().filter(|(_, r)| r.in_theta()).map(|(i, _)| i);
        for (i, g) in theta.zip(&self.theta_grad) {
            out[i] += g;
        }
        let phi = roles.iter().enumerate().filter(|(_, r)| r.in_phi()).map(|(i, _)| i);
        for (i, g) in phi.zip(&self.phi_grad) {
            out[i] += g;
        }
        out
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(EstimatorError::Alpha(alpha))
    }
}

fn check_log_weights(log_w: &[f64]) -> Result<()> {
    if let Some(index) = log_w.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(EstimatorError::NonFiniteLogWeight {
            index,
            value: log_w[index],
        });
    }
    if log_w.is_empty() {
        return Err(EstimatorError::TooFewSamples { need: 1, got: 0 });
    }
    if log_w.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(EstimatorError::Degenerate);
    }
    Ok(())
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log (1/K sum_i w_i)`.
pub fn iwae_bound(log_w: &[f64]) -> Result<f64> {
    check_log_weights(log_w)?;
    Ok(log_sum_exp(log_w) - (log_w.len() as f64).ln())
}

/// Normalized weights and their squares, both taken from log space.
pub fn normalized_weights(log_w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_log_weights(log_w)?;
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = shifted.iter().sum();
    let log_total = total.ln();
    let w = shifted.iter().map(|s| s / total).collect();
    let w2 = log_w.iter().map(|l| (2.0 * ((l - m) - log_total)).exp()).collect();
    Ok((w, w2))
}

/// First-order jackknife of the IWAE bound:
/// `K IWAE_K - (K-1)/K sum_i IWAE_{K-1}(without i)`.
pub fn jvi1_estimate(log_w: &[f64]) -> Result<f64> {
    let k = log_w.len();
    if k < 2 {
        return Err(EstimatorError::TooFewSamples { need: 2, got: k });
    }
    let full = iwae_bound(log_w)?;
    let loo = leave_one_out_lse(log_w)?;
    let kf = k as f64;
    let inner: f64 = loo.iter().map(|l| l - (kf - 1.0).ln()).sum();
    Ok(kf * full - (kf - 1.0) / kf * inner)
}

fn leave_one_out_lse(log_w: &[f64]) -> Result<Vec<f64>> {
    let mut rest = Vec::with_capacity(log_w.len());
    let mut out = Vec::with_capacity(log_w.len());
    for i in 0..log_w.len() {
        rest.clear();
        rest.extend(log_w.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &l)| l));
        let l = log_sum_exp(&rest);
        if l == f64::NEG_INFINITY {
            return Err(EstimatorError::Degenerate);
        }
        out.push(l);
    }
    Ok(out)
}

/// `K` importance weights for one `x` with the per-sample partials every
/// estimator needs. The reparameterization Jacobian `dz/dphi` is never
/// stored; only its product with `d log w / d z` is.
#[derive(Debug, Clone)]
pub struct LogWeightBatch {
    samples: Vec<SamplePartials>,
    log_w: Vec<f64>,
    theta_idx: Vec<usize>,
    phi_idx: Vec<usize>,
    eps: NoiseBatch,
}

/// Draws `z_i = z(eps_i)` from the inference network and records every
/// per-sample partial.
pub fn log_weights<M: LatentModel + ?Sized>(
    model: &M,
    params: &ParamVector,
    x: &[f64],
    eps: &NoiseBatch,
) -> Result<LogWeightBatch> {
    check_dim("params", model.num_params(), params.len())?;
    check_dim("x", model.obs_dim(), x.len())?;
    check_dim("eps", model.latent_dim(), eps.dim())?;
    let samples = eps
        .rows()
        .map(|e| model.sample_partials(params.flat(), x, e))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    LogWeightBatch::from_partials(samples, params.roles(), eps.clone())
}

impl LogWeightBatch {
    pub fn from_partials(samples: Vec<SamplePartials>, roles: &[Role], eps: NoiseBatch) -> Result<Self> {
        let log_w: Vec<f64> = samples.iter().map(|s| s.log_w).collect();
        check_log_weights(&log_w)?;
        for s in &samples {
            for v in [&s.model_grad, &s.score, &s.path] {
                check_dim("per-sample partial", roles.len(), v.len())?;
            }
        }
        Ok(LogWeightBatch {
            samples,
            log_w,
            theta_idx: (0..roles.len()).filter(|&i| roles[i].in_theta()).collect(),
            phi_idx: (0..roles.len()).filter(|&i| roles[i].in_phi()).collect(),
            eps,
        })
    }

    pub fn k(&self) -> usize {
        self.log_w.len()
    }

    pub fn log_w(&self) -> &[f64] {
        &self.log_w
    }

    pub fn samples(&self) -> &[SamplePartials] {
        &self.samples
    }

    pub fn noise(&self) -> &NoiseBatch {
        &self.eps
    }

    pub fn iwae_bound(&self) -> f64 {
        log_sum_exp(&self.log_w) - (self.k() as f64).ln()
    }

    pub fn normalized_weights(&self) -> (Vec<f64>, Vec<f64>) {
        normalized_weights(&self.log_w).expect("checked at construction")
    }

    fn theta(&self, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.theta_idx.len()];
        for (s, &c) in self.samples.iter().zip(a) {
            if c != 0.0 {
                for (o, &j) in out.iter_mut().zip(&self.theta_idx) {
                    *o += c * s.model_grad[j];
                }
            }
        }
        out
    }

    fn phi(&self, b: &[f64], c: Option<&[f64]>) -> Vec<f64> {
        let mut out = vec![0.0; self.phi_idx.len()];
        for (i, s) in self.samples.iter().enumerate() {
            if b[i] != 0.0 {
                for (o, &j) in out.iter_mut().zip(&self.phi_idx) {
                    *o += b[i] * s.path[j];
                }
            }
            if let Some(c) = c.filter(|c| c[i] != 0.0) {
                for (o, &j) in out.iter_mut().zip(&self.phi_idx) {
                    *o += c[i] * s.score[j];
                }
            }
        }
        out
    }
}

/// Self-normalized total derivative: the exact gradient of the IWAE bound
/// at fixed noise.
pub fn iwae_grad_standard(lw: &LogWeightBatch) -> Result<GradEstimate> {
    let (w, _) = lw.normalized_weights();
    let neg: Vec<f64> = w.iter().map(|v| -v).collect();
    GradEstimate::new(EstimatorId::Iwae, lw.k(), None, lw.theta(&w), lw.phi(&w, Some(&neg)))
}

/// Per-sample split of the standard inference-network gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalDerivativeTerms {
    /// `-w~_i d log q(z_i | x) / d phi` at fixed `z_i`.
    pub score: Vec<f64>,
    /// `w~_i (d log w_i / d z_i)(d z_i / d phi)`.
    pub path: Vec<f64>,
}

pub fn decompose_total_derivative(lw: &LogWeightBatch) -> Vec<TotalDerivativeTerms> {
    let (w, _) = lw.normalized_weights();
    lw.samples
        .iter()
        .zip(w)
        .map(|(s, wi)| TotalDerivativeTerms {
            score: lw.phi_idx.iter().map(|&j| -wi * s.score[j]).collect(),
            path: lw.phi_idx.iter().map(|&j| wi * s.path[j]).collect(),
        })
        .collect()
}

/// Standard estimator with the score term dropped.
pub fn iwae_grad_stl(lw: &LogWeightBatch) -> Result<GradEstimate> {
    let (w, _) = lw.normalized_weights();
    GradEstimate::new(EstimatorId::Stl, lw.k(), None, lw.theta(&w), lw.phi(&w, None))
}

/// Doubly reparameterized IWAE gradient: squared weights on the path term.
pub fn iwae_grad_dreg(lw: &LogWeightBatch) -> Result<GradEstimate> {
    let (w, w2) = lw.normalized_weights();
    GradEstimate::new(EstimatorId::IwaeDreg, lw.k(), None, lw.theta(&w), lw.phi(&w2, None))
}

/// Generative-model update of RWS (identical to the IWAE one); tagged
/// `rws-wake` with an empty `phi_grad`.
pub fn rws_theta_grad(lw: &LogWeightBatch) -> Result<GradEstimate> {
    let (w, _) = lw.normalized_weights();
    GradEstimate::new(EstimatorId::RwsWake, lw.k(), None, lw.theta(&w), Vec::new())
}

/// Wake-phase inference update, as a descent direction.
pub fn rws_wake_phi_grad(lw: &LogWeightBatch) -> Result<GradEstimate> {
    let (w, _) = lw.normalized_weights();
    let zeros = vec![0.0; lw.k()];
    let neg: Vec<f64> = w.iter().map(|v| -v).collect();
    GradEstimate::new(EstimatorId::RwsWake, lw.k(), None, Vec::new(), lw.phi(&zeros, Some(&neg)))
}

/// Reparameterized wake update, as a descent direction.
pub fn rws_dreg_phi_grad(lw: &LogWeightBatch) -> Result<GradEstimate> {
    let (w, w2) = lw.normalized_weights();
    let b: Vec<f64> = w2.iter().zip(&w).map(|(s, v)| s - v).collect();
    GradEstimate::new(EstimatorId::RwsDreg, lw.k(), None, Vec::new(), lw.phi(&b, None))
}

/// Path coefficient `alpha w~ + (1 - 2 alpha) w~^2`; the generative-model
/// part is the IWAE one.
pub fn dreg_alpha_phi_grad(alpha: f64, lw: &LogWeightBatch) -> Result<GradEstimate> {
    check_alpha(alpha)?;
    let (w, w2) = lw.normalized_weights();
    let b: Vec<f64> = w.iter().zip(&w2).map(|(v, s)| alpha * v + (1.0 - 2.0 * alpha) * s).collect();
    GradEstimate::new(EstimatorId::DregAlpha, lw.k(), Some(alpha), lw.theta(&w), lw.phi(&b, None))
}

/// Jackknife coefficients `(d, e)`: `d_j` multiplies `grad log w_j` in the
/// exact gradient of the jackknife estimate and `e_j` is its counterpart
/// with every inner normalized weight squared.
fn jvi1_coefficients(lw: &LogWeightBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = lw.k();
    if k < 2 {
        return Err(EstimatorError::TooFewSamples { need: 2, got: k });
    }
    let kf = k as f64;
    let (w, w2) = lw.normalized_weights();
    let loo = leave_one_out_lse(&lw.log_w)?;
    let shrink = (kf - 1.0) / kf;
    let mut d: Vec<f64> = w.iter().map(|v| kf * v).collect();
    let mut e: Vec<f64> = w2.iter().map(|v| kf * v).collect();
    for (i, li) in loo.iter().enumerate() {
        for j in (0..k).filter(|&j| j != i) {
            let lr = lw.log_w[j] - li;
            d[j] -= shrink * lr.exp();
            e[j] -= shrink * (2.0 * lr).exp();
        }
    }
    Ok((d, e))
}

/// Exact gradient of [`jvi1_estimate`] at fixed noise.
pub fn jvi1_grad(lw: &LogWeightBatch) -> Result<GradEstimate> {
    let (d, _) = jvi1_coefficients(lw)?;
    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
    GradEstimate::new(EstimatorId::Jvi1, lw.k(), None, lw.theta(&d), lw.phi(&d, Some(&neg)))
}

/// The jackknife combination with each inner inference gradient replaced by
/// its doubly reparameterized form.
pub fn jvi1_dreg_grad(lw: &LogWeightBatch) -> Result<GradEstimate> {
    let (d, e) = jvi1_coefficients(lw)?;
    GradEstimate::new(EstimatorId::Jvi1Dreg, lw.k(), None, lw.theta(&d), lw.phi(&e, None))
}

/// Dispatches on the estimator id. RWS ids return the inference-network
/// descent direction together with the generative-model update.
pub fn estimate(id: EstimatorId, alpha: Option<f64>, lw: &LogWeightBatch) -> Result<GradEstimate> {
    if id != EstimatorId::DregAlpha && alpha.is_some() {
        return Err(EstimatorError::UnexpectedAlpha(id));
    }
    let mut out = match id {
        EstimatorId::Iwae => iwae_grad_standard(lw),
        EstimatorId::Stl => iwae_grad_stl(lw),
        EstimatorId::IwaeDreg => iwae_grad_dreg(lw),
        EstimatorId::RwsWake => rws_wake_phi_grad(lw),
        EstimatorId::RwsDreg => rws_dreg_phi_grad(lw),
        EstimatorId::DregAlpha => dreg_alpha_phi_grad(alpha.ok_or(EstimatorError::MissingAlpha("dreg-alpha"))?, lw),
        EstimatorId::Jvi1 => jvi1_grad(lw),
        EstimatorId::Jvi1Dreg => jvi1_dreg_grad(lw),
    }?;
    if id.is_rws() {
        out.theta_grad = rws_theta_grad(lw)?.theta_grad;
    }
    Ok(out)
}
