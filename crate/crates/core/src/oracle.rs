//! Independent brute-force references: quadrature marginals for toy
//! latent-variable models, analytic linear flows, finite-difference
//! gradients, and n-gram text baselines.
//!
//! Nothing in this module calls the modules it checks; the dependency
//! direction is enforced by the module graph.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Compensated (Kahan) summation for long accumulations.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&[f64]) -> f64,
    theta: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = Vec::with_capacity(theta.len());
    let mut point = theta.to_vec();
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let up = f(&point);
        point[i] = theta[i] - h;
        let down = f(&point);
        point[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::non_finite(format!(
                "finite_diff_grad probe at coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Gauss–Hermite nodes and weights for `∫ e^{-x²} f(x) dx ≈ Σ wᵢ f(xᵢ)`.
///
/// Newton iteration on the orthonormal Hermite recurrence, which stays
/// bounded for large orders.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = std::f64::consts::PI.powf(-0.25);
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    (nodes, weights)
}

/// Emission model of the toy latent-variable world.
#[derive(Clone, Debug)]
pub enum ToyEmission {
    /// Per-position categorical with logits `W z + b` over a tiny vocabulary.
    Categorical { w: Tensor, b: Tensor },
    /// Gaussian observation `N(W z, noise_var · I)`.
    Gaussian { w: Tensor, noise_var: f64 },
}

/// Linear-Gaussian toy world small enough for tensor-product quadrature.
#[derive(Clone, Debug)]
pub struct ToyLinGaussModel {
    pub d: usize,
    pub emission: ToyEmission,
    /// Prior is `N(0, prior_scale² · I)`.
    pub prior_scale: f64,
}

/// Observation fed to the toy model.
#[derive(Clone, Debug)]
pub enum ToyObs {
    Tokens(Vec<usize>),
    Real(Vec<f64>),
}

impl ToyLinGaussModel {
    pub fn log_emission(&self, obs: &ToyObs, z: &[f64]) -> f64 {
        match (&self.emission, obs) {
            (ToyEmission::Categorical { w, b }, ToyObs::Tokens(ids)) => {
                let vocab = w.rows();
                let mut logits = vec![0.0; vocab];
                for (v, logit) in logits.iter_mut().enumerate() {
                    *logit = b.data()[v]
                        + (0..self.d).map(|k| w.get2(v, k) * z[k]).sum::<f64>();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
                ids.iter().map(|&t| logits[t] - lse).sum()
            }
            (ToyEmission::Gaussian { w, noise_var }, ToyObs::Real(x)) => {
                let mut total = 0.0;
                for (j, &xj) in x.iter().enumerate() {
                    let mean: f64 = (0..self.d).map(|k| w.get2(j, k) * z[k]).sum();
                    total += gauss_logpdf(xj, mean, *noise_var);
                }
                total
            }
            _ => f64::NEG_INFINITY,
        }
    }
}

pub fn gauss_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean) * (x - mean) / (2.0 * var)
}

/// Gauss–Hermite evaluation of `log ∫ p(x|z) N(z; 0, s²I) dz`.
///
/// Tensor-product rule, so only `d ≤ 2` is supported.
pub fn quadrature_marginal(model: &ToyLinGaussModel, obs: &ToyObs, nodes: usize) -> Result<f64> {
    if model.d > 2 {
        return Err(Error::invalid(format!(
            "quadrature_marginal supports d ≤ 2, got {}",
            model.d
        )));
    }
    let (xs, ws) = gauss_hermite(nodes);
    let s = model.prior_scale;
    let scale = std::f64::consts::SQRT_2 * s;
    // log Σ wᵢ... exp(log p(x|zᵢ)) − (d/2) log π, with zᵢ = √2 s xᵢ.
    let mut terms: Vec<f64> = Vec::new();
    match model.d {
        1 => {
            for (x, w) in xs.iter().zip(&ws) {
                let z = [scale * x];
                terms.push(w.ln() + model.log_emission(obs, &z));
            }
        }
        2 => {
            for (x1, w1) in xs.iter().zip(&ws) {
                for (x2, w2) in xs.iter().zip(&ws) {
                    let z = [scale * x1, scale * x2];
                    terms.push(w1.ln() + w2.ln() + model.log_emission(obs, &z));
                }
            }
        }
        _ => unreachable!(),
    }
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::non_finite("quadrature_marginal integrand"));
    }
    let lse = mx + kahan_sum(terms.iter().map(|t| (t - mx).exp())).ln();
    Ok(lse - model.d as f64 / 2.0 * std::f64::consts::PI.ln())
}

/// Closed forms for the isotropic linear field `v(z, t) = a·z`.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticLinearFlow {
    pub a: f64,
    pub d: usize,
}

impl AnalyticLinearFlow {
    pub fn new(a: f64, d: usize) -> Self {
        AnalyticLinearFlow { a, d }
    }

    /// Transport of a terminal point to time 0: `z0 = e^{-a} z1`.
    pub fn map_1_to_0(&self, z1: &[f64]) -> Vec<f64> {
        z1.iter().map(|v| v * (-self.a).exp()).collect()
    }

    /// Transport of a data point to time 1: `z1 = e^{a} z0`.
    pub fn map_0_to_1(&self, z0: &[f64]) -> Vec<f64> {
        z0.iter().map(|v| v * self.a.exp()).collect()
    }

    /// Accumulated divergence `∫₀¹ ∇·v dt = a · d`.
    pub fn logdet_0_to_1(&self) -> f64 {
        self.a * self.d as f64
    }

    /// Log density of the pushforward prior at `z0`:
    /// `log N(e^{a} z0; 0, I) + a·d`.
    pub fn log_prior_density(&self, z0: &[f64]) -> f64 {
        let z1 = self.map_0_to_1(z0);
        std_normal_logpdf(&z1) + self.logdet_0_to_1()
    }
}

pub fn std_normal_logpdf(z: &[f64]) -> f64 {
    let d = z.len() as f64;
    -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

/// Add-one smoothed character n-gram baseline (n ∈ {1, 2}).
#[derive(Clone, Debug)]
pub struct NgramBaseline {
    n: usize,
    alphabet: Vec<char>,
    index: HashMap<char, usize>,
    // Unigram counts, and bigram counts keyed by previous symbol.
    uni: Vec<u64>,
    bi: Vec<Vec<u64>>,
    total: u64,
}

impl NgramBaseline {
    pub fn fit(lines: &[&str], n: usize) -> Result<Self> {
        if !(n == 1 || n == 2) {
            return Err(Error::invalid(format!("ngram order {n} not in {{1, 2}}")));
        }
        let mut alphabet: Vec<char> = lines
            .iter()
            .flat_map(|l| l.chars())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if alphabet.is_empty() {
            alphabet.push('\u{0}');
        }
        let index: HashMap<char, usize> =
            alphabet.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let v = alphabet.len();
        let mut uni = vec![0u64; v];
        let mut bi = vec![vec![0u64; v]; v];
        let mut total = 0u64;
        for line in lines {
            let ids: Vec<usize> = line.chars().map(|c| index[&c]).collect();
            for (pos, &id) in ids.iter().enumerate() {
                uni[id] += 1;
                total += 1;
                if pos > 0 {
                    bi[ids[pos - 1]][id] += 1;
                }
            }
        }
        Ok(NgramBaseline {
            n,
            alphabet,
            index,
            uni,
            bi,
            total,
        })
    }

    pub fn vocab(&self) -> usize {
        self.alphabet.len()
    }

    fn prob(&self, prev: Option<usize>, next: usize) -> f64 {
        let v = self.alphabet.len() as f64;
        match (self.n, prev) {
            (2, Some(p)) => {
                let row_total: u64 = self.bi[p].iter().sum();
                (self.bi[p][next] as f64 + 1.0) / (row_total as f64 + v)
            }
            _ => (self.uni[next] as f64 + 1.0) / (self.total as f64 + v),
        }
    }

    /// Add-one smoothed log-likelihood of a line.
    pub fn log_likelihood(&self, line: &str) -> f64 {
        let ids: Vec<Option<usize>> = line.chars().map(|c| self.index.get(&c).copied()).collect();
        let mut total = 0.0;
        for (pos, id) in ids.iter().enumerate() {
            let next = match id {
                Some(i) => *i,
                // Out-of-alphabet symbols get the floor probability.
                None => {
                    total += (1.0 / (self.total as f64 + self.alphabet.len() as f64)).ln();
                    continue;
                }
            };
            let prev = if pos > 0 { ids[pos - 1] } else { None };
            total += self.prob(prev, next).ln();
        }
        total
    }

    pub fn argmax_next(&self, prev: Option<char>) -> char {
        let prev_id = prev.and_then(|c| self.index.get(&c).copied());
        let mut best = (0, f64::NEG_INFINITY);
        for next in 0..self.alphabet.len() {
            let p = self.prob(prev_id, next);
            if p > best.1 {
                best = (next, p);
            }
        }
        self.alphabet[best.0]
    }

    /// Teacher-forced next-symbol argmax accuracy over held-out lines.
    pub fn next_token_accuracy(&self, lines: &[&str]) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for line in lines {
            let chars: Vec<char> = line.chars().collect();
            for pos in 1..chars.len() {
                let pred = self.argmax_next(Some(chars[pos - 1]));
                hits += usize::from(pred == chars[pos]);
                total += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }

    /// Greedy continuation from a prompt, compared symbolwise to the truth.
    pub fn continuation_accuracy(&self, prompt: &str, truth: &str) -> f64 {
        if truth.is_empty() {
            return 0.0;
        }
        let mut prev = prompt.chars().last();
        let mut hits = 0usize;
        let mut count = 0usize;
        for want in truth.chars() {
            let pred = self.argmax_next(prev);
            hits += usize::from(pred == want);
            count += 1;
            // Teacher-forced context: the baseline sees the true symbol.
            prev = Some(want);
        }
        hits as f64 / count as f64
    }

    /// Relative frequency of the most common symbol; the accuracy floor a
    /// context-free predictor attains.
    pub fn unigram_top_frequency(&self) -> f64 {
        let top = self.uni.iter().copied().max().unwrap_or(0);
        if self.total == 0 {
            0.0
        } else {
            top as f64 / self.total as f64
        }
    }
}
