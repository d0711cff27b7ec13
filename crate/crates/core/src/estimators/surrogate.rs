//! Scalar surrogate objectives whose single reverse sweep produces an
//! estimator, including for parameters read by both `p` and `q`.
//!
//! Notation for the terms below, per sample `i`:
//!
//! * `wn_i`: normalized weight, a constant.
//! * `p~_i = log p(x, z_i)` with `z_i` stopped.
//! * `q~_i = log q(z_i | x)` with `z_i` stopped.
//! * `w^_i = log w_i` with every parameter stopped but `z_i` live, so only
//!   the reparameterization path carries gradient.
//!
//! All surrogates are maximized. For the RWS kinds that means the
//! inference-network gradient is the negation of the descent direction
//! returned by the direct RWS estimators.

use std::fmt;
use std::str::FromStr;

use super::{check_alpha, normalized_weights, EstimatorError, Result};
use crate::gaussian::NoiseBatch;
use crate::models::{check_dim, LatentModel};
use crate::tape::{TapeGraph, TapeScalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurrogateKind {
    /// `sum wn log w`
    Iwae,
    /// `sum wn p~ + wn^2 w^`
    DregIwae,
    /// `sum wn (p~ + q~)`
    Rws,
    /// `sum wn p~ + (wn - wn^2) w^`
    DregRws,
    /// `sum wn (p~ + w^)`
    Stl,
    /// `sum wn p~ + (alpha wn + (1 - 2 alpha) wn^2) w^`
    DregAlpha(f64),
}

impl SurrogateKind {
    pub const NAMES: [&'static str; 6] = ["iwae", "dreg-iwae", "rws", "dreg-rws", "stl", "dreg-alpha"];

    /// `alpha` is required by `dreg-alpha` and rejected elsewhere.
    pub fn from_name(name: &str, alpha: Option<f64>) -> Result<Self> {
        let kind = match (name, alpha) {
            ("dreg-alpha", Some(a)) => {
                check_alpha(a)?;
                return Ok(SurrogateKind::DregAlpha(a));
            }
            ("dreg-alpha", None) => return Err(EstimatorError::MissingAlpha("dreg-alpha")),
            ("iwae", _) => SurrogateKind::Iwae,
            ("dreg-iwae", _) => SurrogateKind::DregIwae,
            ("rws", _) => SurrogateKind::Rws,
            ("dreg-rws", _) => SurrogateKind::DregRws,
            ("stl", _) => SurrogateKind::Stl,
            _ => {
                return Err(EstimatorError::Unknown {
                    what: "surrogate",
                    name: name.to_string(),
                })
            }
        };
        match alpha {
            Some(_) => Err(EstimatorError::Unknown {
                what: "surrogate with alpha",
                name: name.to_string(),
            }),
            None => Ok(kind),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SurrogateKind::Iwae => "iwae",
            SurrogateKind::DregIwae => "dreg-iwae",
            SurrogateKind::Rws => "rws",
            SurrogateKind::DregRws => "dreg-rws",
            SurrogateKind::Stl => "stl",
            SurrogateKind::DregAlpha(_) => "dreg-alpha",
        }
    }

    /// `(coefficient on p~, on q~, on w^)` for one sample; `None` selects the
    /// plain `wn log w` form.
    fn coefficients(self, wn: f64, wn2: f64) -> Option<(f64, f64, f64)> {
        match self {
            SurrogateKind::Iwae => None,
            SurrogateKind::DregIwae => Some((wn, 0.0, wn2)),
            SurrogateKind::Rws => Some((wn, wn, 0.0)),
            SurrogateKind::DregRws => Some((wn, 0.0, wn - wn2)),
            SurrogateKind::Stl => Some((wn, 0.0, wn)),
            SurrogateKind::DregAlpha(a) => Some((wn, 0.0, a * wn + (1.0 - 2.0 * a) * wn2)),
        }
    }
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SurrogateKind::DregAlpha(a) => write!(f, "dreg-alpha({a})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Accepts the plain names and `dreg-alpha(<alpha>)`.
impl FromStr for SurrogateKind {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(inner) = s.strip_prefix("dreg-alpha(").and_then(|r| r.strip_suffix(')')) {
            let a = inner.trim().parse::<f64>().map_err(|_| EstimatorError::Unknown {
                what: "alpha",
                name: inner.to_string(),
            })?;
            return SurrogateKind::from_name("dreg-alpha", Some(a));
        }
        SurrogateKind::from_name(s, None)
    }
}

/// Records the surrogate for one `x` and `K` noise rows. The stopped
/// quantities are recomputed from stop-gradient copies of `params`, which
/// has the same values and blocks every derivative that the notation above
/// marks as stopped.
pub fn surrogate_loss<M: LatentModel + ?Sized>(
    kind: SurrogateKind,
    model: &M,
    g: &mut TapeGraph,
    params: &[TapeScalar],
    x: &[f64],
    eps: &NoiseBatch,
) -> Result<TapeScalar> {
    let anchor = params
        .iter()
        .map(|&p| g.stop_gradient(p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    build(kind, model, g, params, &anchor, x, eps)
}

/// The same surrogate with the stopped quantities computed from the fixed
/// values `anchor` instead. At `params == anchor` value and gradient agree
/// with [`surrogate_loss`]; away from it this is an ordinary differentiable
/// function of `params`, which is what finite differences need.
pub fn surrogate_loss_anchored<M: LatentModel + ?Sized>(
    kind: SurrogateKind,
    model: &M,
    g: &mut TapeGraph,
    params: &[TapeScalar],
    anchor: &[f64],
    x: &[f64],
    eps: &NoiseBatch,
) -> Result<TapeScalar> {
    let anchor = anchor
        .iter()
        .map(|&v| g.constant(v))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    build(kind, model, g, params, &anchor, x, eps)
}

fn build<M: LatentModel + ?Sized>(
    kind: SurrogateKind,
    model: &M,
    g: &mut TapeGraph,
    live: &[TapeScalar],
    anchor: &[TapeScalar],
    x: &[f64],
    eps: &NoiseBatch,
) -> Result<TapeScalar> {
    check_dim("params", model.num_params(), live.len())?;
    check_dim("anchor", live.len(), anchor.len())?;
    check_dim("eps", model.latent_dim(), eps.dim())?;
    if eps.k() == 0 {
        return Err(EstimatorError::TooFewSamples { need: 1, got: 0 });
    }
    let q_live = model.inference(g, live, x)?;
    let q_anchor = model.inference(g, anchor, x)?;

    let mut z_live = Vec::with_capacity(eps.k());
    let mut z_anchor = Vec::with_capacity(eps.k());
    let mut log_w_anchor = Vec::with_capacity(eps.k());
    for e in eps.rows() {
        let za = q_anchor.sample_reparam(g, e)?;
        let lp = model.log_joint(g, anchor, x, &za)?;
        let lq = q_anchor.log_prob(g, &za)?;
        log_w_anchor.push(lp.value() - lq.value());
        z_anchor.push(za);
        z_live.push(q_live.sample_reparam(g, e)?);
    }
    let (wn, wn2) = normalized_weights(&log_w_anchor)?;

    let mut terms = Vec::with_capacity(3 * eps.k());
    for i in 0..eps.k() {
        match kind.coefficients(wn[i], wn2[i]) {
            None => {
                let lp = model.log_joint(g, live, x, &z_live[i])?;
                let lq = q_live.log_prob(g, &z_live[i])?;
                let lw = g.sub(lp, lq)?;
                terms.push(g.scale(lw, wn[i])?);
            }
            Some((cp, cq, cw)) => {
                if cp != 0.0 {
                    let p_tilde = model.log_joint(g, live, x, &z_anchor[i])?;
                    terms.push(g.scale(p_tilde, cp)?);
                }
                if cq != 0.0 {
                    let q_tilde = q_live.log_prob(g, &z_anchor[i])?;
                    terms.push(g.scale(q_tilde, cq)?);
                }
                if cw != 0.0 {
                    let lp = model.log_joint(g, anchor, x, &z_live[i])?;
                    let lq = q_anchor.log_prob(g, &z_live[i])?;
                    let w_hat = g.sub(lp, lq)?;
                    terms.push(g.scale(w_hat, cw)?);
                }
            }
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(0.0)?);
    }
    Ok(g.sum(&terms)?)
}
