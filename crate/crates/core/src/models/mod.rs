//! Model families and their flat parameter vectors.
//!
//! A model only describes architecture. Parameter values live in a
//! [`ParamVector`] whose layout tags every coordinate as belonging to the
//! generative model, the inference network, or both.

mod params;
pub mod toy;
pub mod vae;

use thiserror::Error;

use crate::gaussian::{DiagGaussian, DistError};
use crate::tape::{TapeError, TapeGraph, TapeScalar};

pub use params::{ParamSlice, ParamVector, Role};
pub use toy::ToyModel;
pub use vae::MlpVae;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter layout: {0}")]
    Layout(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::Dimension { what, expected, got })
    }
}

/// A latent-variable model `p(x, z)` together with its amortized Gaussian
/// inference network `q(z | x)`.
///
/// `params` are the tape nodes for the whole flat parameter vector, in
/// layout order. Callers decide which of them are live, stopped or
/// constant.
pub trait LatentModel {
    fn latent_dim(&self) -> usize;

    fn obs_dim(&self) -> usize;

    fn layout(&self) -> Vec<ParamSlice>;

    fn log_joint(
        &self,
        g: &mut TapeGraph,
        params: &[TapeScalar],
        x: &[f64],
        z: &[TapeScalar],
    ) -> Result<TapeScalar>;

    fn inference(&self, g: &mut TapeGraph, params: &[TapeScalar], x: &[f64]) -> Result<DiagGaussian>;

    /// `log p(x, z) - log q(z | x)` for `z = z(eps)`, values only.
    fn log_weight_value(&self, params: &[f64], x: &[f64], eps: &[f64]) -> Result<f64> {
        let mut g = TapeGraph::new();
        let p: Vec<TapeScalar> = params
            .iter()
            .map(|&v| g.constant(v))
            .collect::<std::result::Result<_, _>>()?;
        let q = self.inference(&mut g, &p, x)?;
        let z = q.sample_reparam(&mut g, eps)?;
        let lp = self.log_joint(&mut g, &p, x, &z)?;
        let lq = q.log_prob(&mut g, &z)?;
        Ok(lp.value() - lq.value())
    }

    /// Per-sample partial derivatives of `log w` at `z = z(eps)`.
    ///
    /// The default records one graph and runs three reverse sweeps on it;
    /// models with closed forms may override.
    fn sample_partials(&self, params: &[f64], x: &[f64], eps: &[f64]) -> Result<SamplePartials> {
        tape_sample_partials(self, params, x, eps)
    }

    fn num_params(&self) -> usize {
        self.layout().iter().map(|s| s.len).sum()
    }
}

/// Partials of one importance weight, each over the full flat parameter
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePartials {
    pub log_w: f64,
    /// `d log w / d z` with the parameters fixed.
    pub dlogw_dz: Vec<f64>,
    /// `d log p(x, z) / d params` with `z` held fixed.
    pub model_grad: Vec<f64>,
    /// `d log q(z | x) / d params` with `z` held fixed.
    pub score: Vec<f64>,
    /// `(d log w / d z) (d z / d params)`: the reparameterization path.
    pub path: Vec<f64>,
}

/// Tape extraction of [`SamplePartials`]: `z` is recorded live from the
/// inference network, and both densities read a stopped copy of it, so
/// the stop nodes collect `d/dz` while the parameter leaves collect the
/// fixed-`z` partials. A seeded sweep from `z` then yields the path term.
pub fn tape_sample_partials<M: LatentModel + ?Sized>(
    model: &M,
    params: &[f64],
    x: &[f64],
    eps: &[f64],
) -> Result<SamplePartials> {
    check_dim("params", model.num_params(), params.len())?;
    check_dim("eps", model.latent_dim(), eps.len())?;
    let mut g = TapeGraph::with_capacity(4 * params.len() + 64);
    let p = g.leaves_from(params)?;
    let q = model.inference(&mut g, &p, x)?;
    let z = q.sample_reparam(&mut g, eps)?;
    let zs = z
        .iter()
        .map(|&v| g.stop_gradient(v))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let lp = model.log_joint(&mut g, &p, x, &zs)?;
    let lq = q.log_prob(&mut g, &zs)?;
    let gp = g.backward(lp)?;
    let gq = g.backward(lq)?;
    let dlogw_dz: Vec<f64> = zs.iter().map(|s| gp.wrt(s) - gq.wrt(s)).collect();
    let seeds: Vec<(TapeScalar, f64)> = z.iter().copied().zip(dlogw_dz.iter().copied()).collect();
    let path = g.backward_seeded(&seeds)?.wrt_all(&p);
    Ok(SamplePartials {
        log_w: lp.value() - lq.value(),
        dlogw_dz,
        model_grad: gp.wrt_all(&p),
        score: gq.wrt_all(&p),
        path,
    })
}
