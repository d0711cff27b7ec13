//! Two-hidden-layer tanh variational autoencoder with a factorized
//! Bernoulli likelihood and a diagonal Gaussian inference network.

use super::params::contiguous;
use super::{check_dim, tape_sample_partials, LatentModel, ParamSlice, ParamVector, Result, Role, SamplePartials};
use crate::gaussian::{bernoulli_log_prob, bernoulli_log_prob_value, DiagGaussian, NoiseStream, LN_2PI};
use crate::tape::{TapeGraph, TapeScalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpVae {
    latent: usize,
    hidden: usize,
    obs: usize,
}

/// Row-major `out x in` weight block followed by its bias.
#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    inputs: usize,
    outputs: usize,
}

const DECODER: [&str; 3] = ["dec.l1", "dec.l2", "dec.out"];
const ENCODER: [&str; 3] = ["enc.l1", "enc.l2", "enc.out"];

impl MlpVae {
    pub fn new(latent: usize, hidden: usize, obs: usize) -> Self {
        MlpVae { latent, hidden, obs }
    }

    /// 10 latents, 20 hidden units, 64 pixels.
    pub fn desk() -> Self {
        MlpVae::new(10, 20, 64)
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn shapes(&self) -> [(&'static str, usize, usize, Role); 6] {
        let (l, h, o) = (self.latent, self.hidden, self.obs);
        [
            (DECODER[0], l, h, Role::Theta),
            (DECODER[1], h, h, Role::Theta),
            (DECODER[2], h, o, Role::Theta),
            (ENCODER[0], o, h, Role::Phi),
            (ENCODER[1], h, h, Role::Phi),
            (ENCODER[2], h, 2 * l, Role::Phi),
        ]
    }

    fn layers(&self) -> [Dense; 6] {
        let mut offset = 0;
        self.shapes().map(|(_, inputs, outputs, _)| {
            let d = Dense {
                w: offset,
                b: offset + inputs * outputs,
                inputs,
                outputs,
            };
            offset += (inputs + 1) * outputs;
            d
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        self.init_scaled(seed, 1.0)
    }

    /// Glorot-uniform weights multiplied by `gain`, zero biases.
    pub fn init_scaled(&self, seed: u64, gain: f64) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout()).expect("layout is contiguous");
        let stream = NoiseStream::new(seed, INIT_STREAM);
        let mut cursor = 0;
        let flat = p.flat_mut();
        for layer in self.layers() {
            let r = gain * (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            let n = layer.inputs * layer.outputs;
            let mut u = vec![0.0; n];
            stream.fill_uniform(cursor, &mut u);
            cursor += n as u64;
            for (w, u) in flat[layer.w..layer.w + n].iter_mut().zip(u) {
                *w = r * (2.0 * u - 1.0);
            }
        }
        p
    }

    fn dense_tape(
        g: &mut TapeGraph,
        params: &[TapeScalar],
        layer: Dense,
        input: &[TapeScalar],
        activate: bool,
    ) -> Result<Vec<TapeScalar>> {
        let mut out = Vec::with_capacity(layer.outputs);
        let mut terms = Vec::with_capacity(layer.inputs + 1);
        for o in 0..layer.outputs {
            terms.clear();
            let row = layer.w + o * layer.inputs;
            for (i, &h) in input.iter().enumerate() {
                terms.push(g.mul(params[row + i], h)?);
            }
            terms.push(params[layer.b + o]);
            let pre = g.sum(&terms)?;
            out.push(if activate { g.tanh(pre)? } else { pre });
        }
        Ok(out)
    }

    /// First encoder layer; binary inputs skip the multiply, which is exact.
    fn dense_data(g: &mut TapeGraph, params: &[TapeScalar], layer: Dense, x: &[f64]) -> Result<Vec<TapeScalar>> {
        let consts: Vec<Option<TapeScalar>> = x
            .iter()
            .map(|&v| {
                if v == 0.0 || v == 1.0 {
                    Ok(None)
                } else {
                    g.constant(v).map(Some)
                }
            })
            .collect::<std::result::Result<_, _>>()?;
        let mut out = Vec::with_capacity(layer.outputs);
        let mut terms = Vec::with_capacity(layer.inputs + 1);
        for o in 0..layer.outputs {
            terms.clear();
            let row = layer.w + o * layer.inputs;
            for (i, &v) in x.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                terms.push(match consts[i] {
                    Some(c) => g.mul(params[row + i], c)?,
                    None => params[row + i],
                });
            }
            terms.push(params[layer.b + o]);
            let pre = g.sum(&terms)?;
            out.push(g.tanh(pre)?);
        }
        Ok(out)
    }

    pub fn decoder_logits(&self, g: &mut TapeGraph, params: &[TapeScalar], z: &[TapeScalar]) -> Result<Vec<TapeScalar>> {
        let [l1, l2, l3, ..] = self.layers();
        let h1 = Self::dense_tape(g, params, l1, z, true)?;
        let h2 = Self::dense_tape(g, params, l2, &h1, true)?;
        Self::dense_tape(g, params, l3, &h2, false)
    }

    fn dense_value(params: &[f64], layer: Dense, input: &[f64], activate: bool, out: &mut Vec<f64>) {
        out.clear();
        for o in 0..layer.outputs {
            let row = &params[layer.w + o * layer.inputs..layer.w + (o + 1) * layer.inputs];
            let pre: f64 = row.iter().zip(input).map(|(w, h)| w * h).sum::<f64>() + params[layer.b + o];
            out.push(if activate { pre.tanh() } else { pre });
        }
    }

    /// Backpropagates `delta` (gradient at the layer output, after the
    /// activation when `activated` holds) through one dense layer into
    /// `grad`, returning the gradient at the layer input.
    fn dense_backward(
        params: &[f64],
        layer: Dense,
        input: &[f64],
        output: &[f64],
        activated: bool,
        delta: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let mut back = vec![0.0; layer.inputs];
        for o in 0..layer.outputs {
            let d = if activated { delta[o] * (1.0 - output[o] * output[o]) } else { delta[o] };
            if d == 0.0 {
                continue;
            }
            grad[layer.b + o] += d;
            let row = layer.w + o * layer.inputs;
            for (i, &h) in input.iter().enumerate() {
                grad[row + i] += d * h;
                back[i] += d * params[row + i];
            }
        }
        back
    }

    /// Encoder backward pass for a gradient `delta` on `(mean, log_scale)`.
    fn encoder_backward(&self, params: &[f64], x: &[f64], acts: &[Vec<f64>; 3], delta: &[f64], grad: &mut [f64]) {
        let [.., e1, e2, e3] = self.layers();
        let [h1, h2, out] = acts;
        let d2 = Self::dense_backward(params, e3, h2, out, false, delta, grad);
        let d1 = Self::dense_backward(params, e2, h1, h2, true, &d2, grad);
        Self::dense_backward(params, e1, x, h1, true, &d1, grad);
    }

    /// Decoder logits on plain values.
    pub fn decoder_logits_value(&self, params: &[f64], z: &[f64]) -> Vec<f64> {
        let [l1, l2, l3, ..] = self.layers();
        let (mut h1, mut h2, mut out) = (Vec::new(), Vec::new(), Vec::new());
        Self::dense_value(params, l1, z, true, &mut h1);
        Self::dense_value(params, l2, &h1, true, &mut h2);
        Self::dense_value(params, l3, &h2, false, &mut out);
        out
    }

    /// Inference mean and log-scale on plain values.
    pub fn inference_value(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let [.., e1, e2, e3] = self.layers();
        let (mut h1, mut h2, mut out) = (Vec::new(), Vec::new(), Vec::new());
        Self::dense_value(params, e1, x, true, &mut h1);
        Self::dense_value(params, e2, &h1, true, &mut h2);
        Self::dense_value(params, e3, &h2, false, &mut out);
        let log_scale = out.split_off(self.latent);
        (out, log_scale)
    }

    /// `log p(x, z) - log q(z | x)` for every row of `eps`, sharing one
    /// encoder pass.
    pub fn log_weights_value(&self, params: &[f64], x: &[f64], eps: &[&[f64]]) -> Vec<f64> {
        let (mean, log_scale) = self.inference_value(params, x);
        eps.iter()
            .map(|e| {
                let mut lq = 0.0;
                let mut prior = 0.0;
                let z: Vec<f64> = (0..self.latent)
                    .map(|j| {
                        let z = mean[j] + log_scale[j].exp() * e[j];
                        lq += -0.5 * LN_2PI - log_scale[j] - 0.5 * e[j] * e[j];
                        prior += -0.5 * LN_2PI - 0.5 * z * z;
                        z
                    })
                    .collect();
                let logits = self.decoder_logits_value(params, &z);
                prior + bernoulli_log_prob_value(&logits, x) - lq
            })
            .collect()
    }
}

pub(crate) const INIT_STREAM: u64 = 0x1417;

impl LatentModel for MlpVae {
    fn latent_dim(&self) -> usize {
        self.latent
    }

    fn obs_dim(&self) -> usize {
        self.obs
    }

    fn layout(&self) -> Vec<ParamSlice> {
        let mut parts = Vec::with_capacity(12);
        let names: Vec<(String, String)> = self
            .shapes()
            .iter()
            .map(|(n, ..)| (format!("{n}.w"), format!("{n}.b")))
            .collect();
        for ((_, inputs, outputs, role), (w, b)) in self.shapes().iter().zip(&names) {
            parts.push((w.as_str(), inputs * outputs, *role));
            parts.push((b.as_str(), *outputs, *role));
        }
        contiguous(&parts)
    }

    fn log_joint(
        &self,
        g: &mut TapeGraph,
        params: &[TapeScalar],
        x: &[f64],
        z: &[TapeScalar],
    ) -> Result<TapeScalar> {
        check_dim("params", self.num_params(), params.len())?;
        check_dim("x", self.obs, x.len())?;
        check_dim("z", self.latent, z.len())?;
        let logits = self.decoder_logits(g, params, z)?;
        let lik = bernoulli_log_prob(g, &logits, x)?;
        let mut terms = Vec::with_capacity(z.len() + 2);
        for &zj in z {
            let sq = g.square(zj)?;
            terms.push(g.scale(sq, -0.5)?);
        }
        terms.push(g.constant(-0.5 * LN_2PI * z.len() as f64)?);
        terms.push(lik);
        Ok(g.sum(&terms)?)
    }

    fn inference(&self, g: &mut TapeGraph, params: &[TapeScalar], x: &[f64]) -> Result<DiagGaussian> {
        check_dim("params", self.num_params(), params.len())?;
        check_dim("x", self.obs, x.len())?;
        let [.., e1, e2, e3] = self.layers();
        let h1 = Self::dense_data(g, params, e1, x)?;
        let h2 = Self::dense_tape(g, params, e2, &h1, true)?;
        let mut out = Self::dense_tape(g, params, e3, &h2, false)?;
        let log_scale = out.split_off(self.latent);
        Ok(DiagGaussian::new(out, log_scale)?)
    }

    /// Hand-derived backward passes; binary images only, anything else goes
    /// through the tape, which reports the error.
    fn sample_partials(&self, params: &[f64], x: &[f64], eps: &[f64]) -> Result<SamplePartials> {
        check_dim("params", self.num_params(), params.len())?;
        check_dim("x", self.obs, x.len())?;
        check_dim("eps", self.latent, eps.len())?;
        if x.iter().any(|&v| v != 0.0 && v != 1.0) {
            return tape_sample_partials(self, params, x, eps);
        }
        let [l1, l2, l3, e1, e2, e3] = self.layers();
        let d = self.latent;
        let (mut h1, mut h2, mut out) = (Vec::new(), Vec::new(), Vec::new());
        Self::dense_value(params, e1, x, true, &mut h1);
        Self::dense_value(params, e2, &h1, true, &mut h2);
        Self::dense_value(params, e3, &h2, false, &mut out);
        let (mean, log_scale) = out.split_at(d);
        let scale: Vec<f64> = log_scale.iter().map(|v| v.exp()).collect();
        let z: Vec<f64> = (0..d).map(|j| mean[j] + scale[j] * eps[j]).collect();
        let (mut g1, mut g2, mut logits) = (Vec::new(), Vec::new(), Vec::new());
        Self::dense_value(params, l1, &z, true, &mut g1);
        Self::dense_value(params, l2, &g1, true, &mut g2);
        Self::dense_value(params, l3, &g2, false, &mut logits);

        let lq: f64 = (0..d).map(|j| -0.5 * LN_2PI - log_scale[j] - 0.5 * eps[j] * eps[j]).sum();
        let prior: f64 = z.iter().map(|v| -0.5 * LN_2PI - 0.5 * v * v).sum();
        let log_w = prior + bernoulli_log_prob_value(&logits, x) - lq;

        let n = params.len();
        let mut model_grad = vec![0.0; n];
        let dl: Vec<f64> = logits.iter().zip(x).map(|(&l, &xj)| xj - crate::tape::sigmoid(l)).collect();
        let dg2 = Self::dense_backward(params, l3, &g2, &logits, false, &dl, &mut model_grad);
        let dg1 = Self::dense_backward(params, l2, &g1, &g2, true, &dg2, &mut model_grad);
        let dz_lik = Self::dense_backward(params, l1, &z, &g1, true, &dg1, &mut model_grad);

        // With z = mean + scale * eps: (z - mean) / scale^2 = eps / scale.
        let dlogw_dz: Vec<f64> = (0..d).map(|j| dz_lik[j] - z[j] + eps[j] / scale[j]).collect();
        let acts = [h1, h2, out.clone()];
        let mut score = vec![0.0; n];
        let mut delta = vec![0.0; 2 * d];
        for j in 0..d {
            delta[j] = eps[j] / scale[j];
            delta[d + j] = eps[j] * eps[j] - 1.0;
        }
        self.encoder_backward(params, x, &acts, &delta, &mut score);
        let mut path = vec![0.0; n];
        for j in 0..d {
            delta[j] = dlogw_dz[j];
            delta[d + j] = dlogw_dz[j] * scale[j] * eps[j];
        }
        self.encoder_backward(params, x, &acts, &delta, &mut path);
        Ok(SamplePartials {
            log_w,
            dlogw_dz,
            model_grad,
            score,
            path,
        })
    }

    fn log_weight_value(&self, params: &[f64], x: &[f64], eps: &[f64]) -> Result<f64> {
        check_dim("params", self.num_params(), params.len())?;
        check_dim("x", self.obs, x.len())?;
        check_dim("eps", self.latent, eps.len())?;
        Ok(self.log_weights_value(params, x, &[eps])[0])
    }
}
