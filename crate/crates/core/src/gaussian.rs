//! Reparameterized diagonal Gaussians, factorized Bernoulli likelihoods and
//! the seeded noise streams that drive every Monte Carlo draw.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::tape::{TapeError, TapeGraph, TapeScalar};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("observation entry {index} is {value}, expected 0 or 1")]
    NonBinary { index: usize, value: f64 },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

type Result<T> = std::result::Result<T, DistError>;

fn same_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DistError::Dimension { expected, got })
    }
}

/// Diagonal Gaussian whose mean and log-scale live on a tape.
///
/// Frozen scales are plain constants (or stopped nodes); trainable ones are
/// whatever expression the inference network produced.
#[derive(Debug, Clone)]
pub struct DiagGaussian {
    mean: Vec<TapeScalar>,
    log_scale: Vec<TapeScalar>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<TapeScalar>, log_scale: Vec<TapeScalar>) -> Result<Self> {
        same_dim(mean.len(), log_scale.len())?;
        Ok(DiagGaussian { mean, log_scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[TapeScalar] {
        &self.mean
    }

    pub fn log_scale(&self) -> &[TapeScalar] {
        &self.log_scale
    }

    /// The same distribution with every parameter behind a stop-gradient.
    pub fn stopped(&self, g: &mut TapeGraph) -> Result<Self> {
        let stop = |g: &mut TapeGraph, xs: &[TapeScalar]| -> Result<Vec<TapeScalar>> {
            Ok(xs
                .iter()
                .map(|&x| g.stop_gradient(x))
                .collect::<std::result::Result<_, _>>()?)
        };
        Ok(DiagGaussian {
            mean: stop(g, &self.mean)?,
            log_scale: stop(g, &self.log_scale)?,
        })
    }

    /// `z = mean + exp(log_scale) * eps`, recorded so gradients reach the
    /// distribution parameters.
    pub fn sample_reparam(&self, g: &mut TapeGraph, eps: &[f64]) -> Result<Vec<TapeScalar>> {
        same_dim(self.dim(), eps.len())?;
        let mut z = Vec::with_capacity(eps.len());
        for ((&m, &ls), &e) in self.mean.iter().zip(&self.log_scale).zip(eps) {
            let scale = g.exp(ls)?;
            let step = g.scale(scale, e)?;
            z.push(g.add(m, step)?);
        }
        Ok(z)
    }

    pub fn log_prob(&self, g: &mut TapeGraph, z: &[TapeScalar]) -> Result<TapeScalar> {
        same_dim(self.dim(), z.len())?;
        let mut terms = Vec::with_capacity(2 * z.len() + 1);
        for ((&zj, &m), &ls) in z.iter().zip(&self.mean).zip(&self.log_scale) {
            let diff = g.sub(zj, m)?;
            let scale = g.exp(ls)?;
            let standardized = g.div(diff, scale)?;
            let sq = g.square(standardized)?;
            terms.push(g.scale(sq, -0.5)?);
            terms.push(g.neg(ls)?);
        }
        terms.push(g.constant(-0.5 * LN_2PI * z.len() as f64)?);
        Ok(g.sum(&terms)?)
    }
}

/// Log-density of a diagonal Gaussian on plain values.
pub fn diag_normal_log_density(z: &[f64], mean: &[f64], log_scale: &[f64]) -> f64 {
    z.iter()
        .zip(mean)
        .zip(log_scale)
        .map(|((&zj, &m), &ls)| {
            let u = (zj - m) * (-ls).exp();
            -0.5 * LN_2PI - ls - 0.5 * u * u
        })
        .sum()
}

/// `sum_j x_j log sigmoid(l_j) + (1 - x_j) log(1 - sigmoid(l_j))` with `x`
/// binary.
///
/// Each term is recorded in whichever of the two algebraically equal forms
/// keeps `exp` from overflowing for the current logit.
pub fn bernoulli_log_prob(g: &mut TapeGraph, logits: &[TapeScalar], x: &[f64]) -> Result<TapeScalar> {
    same_dim(logits.len(), x.len())?;
    let mut terms = Vec::with_capacity(x.len());
    for (index, (&l, &xj)) in logits.iter().zip(x).enumerate() {
        // log p(x_j) = -softplus(s) with s = -l for x_j = 1 and s = l for x_j = 0
        let s = if xj == 1.0 {
            g.neg(l)?
        } else if xj == 0.0 {
            l
        } else {
            return Err(DistError::NonBinary { index, value: xj });
        };
        let softplus = if s.value() > 0.0 {
            // s + log(1 + exp(-s))
            let ns = g.neg(s)?;
            let e = g.exp(ns)?;
            let one_plus = g.shift(e, 1.0)?;
            let lg = g.log(one_plus)?;
            g.add(s, lg)?
        } else {
            let e = g.exp(s)?;
            let one_plus = g.shift(e, 1.0)?;
            g.log(one_plus)?
        };
        terms.push(softplus);
    }
    let total = g.sum(&terms)?;
    Ok(g.neg(total)?)
}

/// Plain-value version of [`bernoulli_log_prob`].
pub fn bernoulli_log_prob_value(logits: &[f64], x: &[f64]) -> f64 {
    logits
        .iter()
        .zip(x)
        .map(|(&l, &xj)| {
            let s = if xj == 1.0 { -l } else { l };
            -(s.max(0.0) + (-s.abs()).exp().ln_1p())
        })
        .sum()
}

/// Counter-based stream of standard normals and uniforms keyed by
/// `(seed, stream)`.
///
/// Entry `i` of the normal sequence is built from the four 32-bit words
/// starting at word `4 i` of the ChaCha8 keystream, so any entry can be
/// regenerated by seeking without replaying the ones before it. The uniform
/// sequence uses words `2 i` and `2 i + 1`; a stream should be used for one
/// of the two sequences only.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    stream: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        NoiseStream { seed, stream }
    }

    fn rng_at(&self, word: u128) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word);
        rng
    }

    /// Standard normal number `index` of this stream.
    pub fn normal(&self, index: u64) -> f64 {
        let mut rng = self.rng_at(4 * index as u128);
        box_muller(rng.next_u64(), rng.next_u64())
    }

    /// Standard normals `start..start + out.len()`.
    pub fn fill_normal(&self, start: u64, out: &mut [f64]) {
        let mut rng = self.rng_at(4 * start as u128);
        for v in out {
            *v = box_muller(rng.next_u64(), rng.next_u64());
        }
    }

    /// Uniform on `[0, 1)`, entry `index`.
    pub fn uniform(&self, index: u64) -> f64 {
        let mut rng = self.rng_at(2 * index as u128);
        unit_interval(rng.next_u64())
    }

    pub fn fill_uniform(&self, start: u64, out: &mut [f64]) {
        let mut rng = self.rng_at(2 * start as u128);
        for v in out {
            *v = unit_interval(rng.next_u64());
        }
    }
}

fn unit_interval(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> f64 {
    // (0, 1] so the logarithm is finite
    let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = unit_interval(b);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `K x d` block of standard normals with the lineage needed to regenerate
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    eps: Vec<f64>,
    k: usize,
    dim: usize,
    seed: u64,
    stream: u64,
    draw_index: u64,
}

impl NoiseBatch {
    /// Draw number `draw_index` of shape `k x dim` from `(seed, stream)`.
    /// Consecutive draws occupy consecutive, non-overlapping ranges of the
    /// stream.
    pub fn draw(seed: u64, stream: u64, draw_index: u64, k: usize, dim: usize) -> Self {
        let mut eps = vec![0.0; k * dim];
        let start = draw_index * (k * dim) as u64;
        NoiseStream::new(seed, stream).fill_normal(start, &mut eps);
        NoiseBatch {
            eps,
            k,
            dim,
            seed,
            stream,
            draw_index,
        }
    }

    /// Wraps explicit noise values (tests, FFI callers).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut eps = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            same_dim(dim, r.len())?;
            eps.extend_from_slice(r);
        }
        Ok(NoiseBatch {
            eps,
            k: rows.len(),
            dim,
            seed: 0,
            stream: 0,
            draw_index: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.eps[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.eps.chunks(self.dim.max(1)).take(self.k)
    }

    /// `(seed, stream, draw_index)`.
    pub fn lineage(&self) -> (u64, u64, u64) {
        (self.seed, self.stream, self.draw_index)
    }

    /// Keeps rows `keep` only (leave-one-out subsets).
    pub fn select(&self, keep: &[usize]) -> NoiseBatch {
        let mut eps = Vec::with_capacity(keep.len() * self.dim);
        for &i in keep {
            eps.extend_from_slice(self.row(i));
        }
        NoiseBatch {
            eps,
            k: keep.len(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_diff_check;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gaussian(g: &mut TapeGraph, mean: &[f64], log_scale: &[f64]) -> DiagGaussian {
        let m = g.leaves_from(mean).unwrap();
        let s = g.leaves_from(log_scale).unwrap();
        DiagGaussian::new(m, s).unwrap()
    }

    #[test]
    fn standard_normal_passthrough() {
        let mut g = TapeGraph::new();
        let q = gaussian(&mut g, &[0.0], &[0.0]);
        let z = q.sample_reparam(&mut g, &[1.5]).unwrap();
        assert_eq!(z[0].value(), 1.5);
    }

    #[test]
    fn scaled_shifted_sample_and_partials() {
        let mut g = TapeGraph::new();
        let q = gaussian(&mut g, &[2.0], &[3f64.ln()]);
        let z = q.sample_reparam(&mut g, &[-1.0]).unwrap();
        assert_abs_diff_eq!(z[0].value(), -1.0, epsilon = 1e-14);
        let grads = g.backward(z[0]).unwrap();
        assert_eq!(grads.wrt(&q.mean()[0]), 1.0);
        assert_abs_diff_eq!(grads.wrt(&q.log_scale()[0]), z[0].value() - 2.0, epsilon = 1e-14);

        let err = finite_diff_check(
            |g, p| {
                let q = DiagGaussian::new(vec![p[0]], vec![p[1]]).unwrap();
                Ok(q.sample_reparam(g, &[-1.0]).unwrap()[0])
            },
            &[2.0, 3f64.ln()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn dimension_mismatch() {
        let mut g = TapeGraph::new();
        let q = gaussian(&mut g, &[0.0, 1.0], &[0.0, 0.0]);
        assert!(matches!(
            q.sample_reparam(&mut g, &[1.0]),
            Err(DistError::Dimension { expected: 2, got: 1 })
        ));
        let z = g.leaves_from(&[1.0]).unwrap();
        assert!(q.log_prob(&mut g, &z).is_err());
        let m = g.leaves_from(&[0.0]).unwrap();
        assert!(DiagGaussian::new(m, vec![]).is_err());
    }

    #[test]
    fn standard_normal_log_prob_at_origin() {
        let mut g = TapeGraph::new();
        let q = gaussian(&mut g, &[0.0], &[0.0]);
        let z = g.leaves_from(&[0.0]).unwrap();
        let lp = q.log_prob(&mut g, &z).unwrap();
        assert_abs_diff_eq!(lp.value(), -0.918_938_533_204_672_7, epsilon = 1e-12);
    }

    #[test]
    fn log_prob_density_integrates_to_one() {
        let (mu, ls) = (0.7, -0.4f64);
        let sigma = ls.exp();
        let n = 20_000;
        let (lo, hi) = (mu - 8.0 * sigma, mu + 8.0 * sigma);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let z = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * diag_normal_log_density(&[z], &[mu], &[ls]).exp();
        }
        assert_abs_diff_eq!(total * h, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let err = finite_diff_check(
            |g, p| {
                let q = DiagGaussian::new(p[..2].to_vec(), p[2..4].to_vec()).unwrap();
                Ok(q.log_prob(g, &p[4..]).unwrap())
            },
            &[0.3, -1.0, 0.2, -0.5, 1.1, 0.4],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn bernoulli_cases() {
        let mut g = TapeGraph::new();
        let logits = g.leaves_from(&[0.0; 4]).unwrap();
        let lp = bernoulli_log_prob(&mut g, &logits, &[1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(lp.value(), 4.0 * 0.5f64.ln(), epsilon = 1e-12);

        let big = g.leaves_from(&[50.0]).unwrap();
        let lp = bernoulli_log_prob(&mut g, &big, &[1.0]).unwrap();
        assert!(lp.value() <= 0.0 && lp.value() > -1e-20);
        let lp = bernoulli_log_prob(&mut g, &big, &[0.0]).unwrap();
        assert_abs_diff_eq!(lp.value(), -50.0, epsilon = 1e-12);

        assert!(matches!(
            bernoulli_log_prob(&mut g, &big, &[0.5]),
            Err(DistError::NonBinary { index: 0, .. })
        ));
    }

    #[test]
    fn bernoulli_gradient_matches_finite_differences() {
        let x = [1.0, 0.0, 1.0, 0.0];
        let err = finite_diff_check(
            |g, p| Ok(bernoulli_log_prob(g, p, &x).unwrap()),
            &[2.0, -3.0, -0.5, 0.7],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn reparameterized_moments() {
        let (mu, ls) = (-1.3, 0.4f64);
        let n = 100_000;
        let stream = NoiseStream::new(11, 3);
        let mut eps = vec![0.0; n];
        stream.fill_normal(0, &mut eps);
        let mut g = TapeGraph::new();
        let q = gaussian(&mut g, &[mu], &[ls]);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for &e in &eps {
            let z = q.sample_reparam(&mut g, &[e]).unwrap()[0].value();
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let sigma2 = (2.0 * ls).exp();
        assert!((mean - mu).abs() < 5.0 * (sigma2 / n as f64).sqrt());
        // Var of the sample variance for a normal is 2 sigma^4 / (n - 1)
        assert!((var - sigma2).abs() < 5.0 * (2.0 * sigma2 * sigma2 / n as f64).sqrt());
    }

    /// `int q(z) f(z) d/dmu log q(z) dz` against `int p(eps) f'(mu + sigma eps) deps`.
    #[test]
    fn reinforce_equals_reparameterization_under_quadrature() {
        let (mu, sigma) = (0.4, 0.8);
        type Pair = (fn(f64) -> f64, fn(f64) -> f64);
        let cases: [Pair; 3] = [
            (|z| z, |_| 1.0),
            (|z| z * z, |z| 2.0 * z),
            (f64::sin, f64::cos),
        ];
        let n = 40_000;
        let (lo, hi) = (-12.0, 12.0);
        let h = (hi - lo) / n as f64;
        let phi = |e: f64| (-0.5 * e * e - 0.5 * LN_2PI).exp();
        for (f, df) in cases {
            let mut reinforce = 0.0;
            let mut reparam = 0.0;
            for i in 0..=n {
                let e = lo + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                let z = mu + sigma * e;
                // q(z) dz = phi(e) de, d/dmu log q = (z - mu) / sigma^2
                reinforce += w * phi(e) * f(z) * (z - mu) / (sigma * sigma);
                reparam += w * phi(e) * df(z);
            }
            assert_abs_diff_eq!(reinforce * h, reparam * h, epsilon = 1e-6);
        }
    }

    #[test]
    fn noise_entries_are_seekable() {
        let s = NoiseStream::new(42, 7);
        let mut bulk = vec![0.0; 64];
        s.fill_normal(10, &mut bulk);
        for (i, v) in bulk.iter().enumerate() {
            assert_eq!(v.to_bits(), s.normal(10 + i as u64).to_bits());
        }
        let mut u = vec![0.0; 16];
        s.fill_uniform(3, &mut u);
        assert_eq!(u[5].to_bits(), s.uniform(8).to_bits());
        assert_ne!(s.normal(0), NoiseStream::new(42, 8).normal(0));
    }

    #[test]
    fn noise_batch_regenerates_from_lineage() {
        let a = NoiseBatch::draw(5, 2, 9, 4, 3);
        let (seed, stream, idx) = a.lineage();
        let b = NoiseBatch::draw(seed, stream, idx, 4, 3);
        assert_eq!(a, b);
        assert_eq!(a.row(2)[1].to_bits(), NoiseStream::new(5, 2).normal(9 * 12 + 7).to_bits());
        let sub = a.select(&[0, 3]);
        assert_eq!(sub.k(), 2);
        assert_eq!(sub.row(1), a.row(3));
    }

    proptest! {
        #[test]
        fn log_prob_translation_invariant(z in -3.0f64..3.0, m in -3.0f64..3.0, c in -5.0f64..5.0, ls in -1.0f64..1.0) {
            let a = diag_normal_log_density(&[z], &[m], &[ls]);
            let b = diag_normal_log_density(&[z + c], &[m + c], &[ls]);
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn bernoulli_label_flip_symmetry(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..8),
            bits in proptest::collection::vec(0u8..2, 8),
        ) {
            let x: Vec<f64> = bits[..logits.len()].iter().map(|&b| b as f64).collect();
            let flipped_x: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
            let neg: Vec<f64> = logits.iter().map(|v| -v).collect();
            let mut g = TapeGraph::new();
            let l = g.leaves_from(&logits).unwrap();
            let nl = g.leaves_from(&neg).unwrap();
            let a = bernoulli_log_prob(&mut g, &l, &x).unwrap().value();
            let b = bernoulli_log_prob(&mut g, &nl, &flipped_x).unwrap().value();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((a - bernoulli_log_prob_value(&logits, &x)).abs() < 1e-10);
        }
    }
}
