//! Importance weights, ELBO/IWAE estimation, the plug-in conditional
//! estimator, perplexity reporting, single-block conditional scores, and
//! the inference-gap diagnostic.

use crate::cnf::{self, OdeConfig, VectorField};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::flowprior::FlowPrior;
use crate::oracle::kahan_sum;
use crate::textvae::TextVae;
use crate::{derived_rng, Rng};
use serde::Serialize;

/// Log components of one importance weight.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct WeightSample {
    pub log_decoder: f64,
    pub log_prior: f64,
    pub log_posterior: f64,
}

impl WeightSample {
    pub fn log_w(&self) -> f64 {
        self.log_decoder + self.log_prior - self.log_posterior
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorMode {
    Elbo,
    Iwae,
}

impl std::str::FromStr for EstimatorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(EstimatorMode::Elbo),
            "iwae" => Ok(EstimatorMode::Iwae),
            other => Err(Error::invalid(format!("unknown estimator mode {other}"))),
        }
    }
}

/// Output of one unconditional estimation run.
#[derive(Clone, Debug, Serialize)]
pub struct ScoreReport {
    pub mode: EstimatorMode,
    pub k: usize,
    pub value: f64,
    pub samples: Vec<WeightSample>,
    pub token_count: usize,
}

/// Model interface for importance-weighted scoring.
pub trait ScoreModel {
    /// Draw `z0 ~ q(z0 | x)`.
    fn sample_posterior(&self, x: &[usize], rng: &mut Rng) -> Result<Tensor>;
    fn log_posterior(&self, x: &[usize], z0: &Tensor) -> Result<f64>;
    /// Teacher-forced `log p(x | z0)`.
    fn log_decoder(&self, x: &[usize], z0: &Tensor) -> Result<f64>;
    /// `log p_ψ(z0)` (CNF density for flow priors).
    fn log_prior(&self, z0: &Tensor, rng: &mut Rng) -> Result<f64>;
}

/// One importance weight at a given posterior sample.
pub fn importance_weight(
    model: &dyn ScoreModel,
    x: &[usize],
    z0: &Tensor,
    rng: &mut Rng,
) -> Result<WeightSample> {
    Ok(WeightSample {
        log_decoder: model.log_decoder(x, z0)?,
        log_prior: model.log_prior(z0, rng)?,
        log_posterior: model.log_posterior(x, z0)?,
    })
}

/// Overflow-safe `log((1/K) Σ exp(xᵢ))` by max-shift.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + (kahan_sum(xs.iter().map(|x| (x - mx).exp())) / xs.len() as f64).ln()
}

fn reduce(mode: EstimatorMode, samples: &[WeightSample]) -> f64 {
    let log_ws: Vec<f64> = samples.iter().map(|s| s.log_w()).collect();
    match mode {
        EstimatorMode::Elbo => kahan_sum(log_ws.iter().copied()) / log_ws.len() as f64,
        EstimatorMode::Iwae => log_mean_exp(&log_ws),
    }
}

/// Unconditional log-likelihood estimation: draw `K` posterior samples,
/// form importance weights, reduce by mode.
pub fn estimate_logp(
    model: &dyn ScoreModel,
    x: &[usize],
    k: usize,
    mode: EstimatorMode,
    seed: u64,
) -> Result<ScoreReport> {
    if k == 0 {
        return Err(Error::invalid("estimator wants K ≥ 1"));
    }
    let mut rng = derived_rng(seed, 0);
    let mut samples = Vec::with_capacity(k);
    for _ in 0..k {
        let z0 = model.sample_posterior(x, &mut rng)?;
        samples.push(importance_weight(model, x, &z0, &mut rng)?);
    }
    Ok(ScoreReport {
        mode,
        k,
        value: reduce(mode, &samples),
        samples,
        token_count: x.len(),
    })
}

/// Conditional estimate via the plug-in identity `joint − prefix`.
#[derive(Clone, Debug, Serialize)]
pub struct CondReport {
    pub joint: ScoreReport,
    /// Absent for an empty prefix (its estimate is defined as 0).
    pub prefix: Option<ScoreReport>,
    pub value: f64,
}

/// Conditional log-likelihood estimation: score the joint sequence and the
/// prefix with the same unconditional estimator on independent derived
/// RNG streams, then take the difference.
pub fn estimate_cond_logp(
    model: &dyn ScoreModel,
    x_pre: &[usize],
    x_res: &[usize],
    k: usize,
    mode: EstimatorMode,
    seed: u64,
) -> Result<CondReport> {
    if x_res.is_empty() {
        return Err(Error::invalid(
            "conditional estimate wants a non-empty response",
        ));
    }
    let joint_seq: Vec<usize> = x_pre.iter().chain(x_res.iter()).copied().collect();
    let joint = estimate_logp(model, &joint_seq, k, mode, seed)?;
    if x_pre.is_empty() {
        let value = joint.value;
        return Ok(CondReport {
            joint,
            prefix: None,
            value,
        });
    }
    let prefix = estimate_logp(model, x_pre, k, mode, seed.wrapping_add(1))?;
    let value = joint.value - prefix.value;
    Ok(CondReport {
        joint,
        prefix: Some(prefix),
        value,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PplReport {
    pub mode: EstimatorMode,
    pub k: usize,
    pub ppl: f64,
    pub total_nats: f64,
    pub token_count: usize,
    pub per_item: Vec<f64>,
}

/// Dataset perplexity `exp(-Σ estimates / Σ lengths)`.
pub fn ppl(
    model: &dyn ScoreModel,
    dataset: &[Vec<usize>],
    k: usize,
    mode: EstimatorMode,
    seed: u64,
) -> Result<PplReport> {
    let token_count: usize = dataset.iter().map(|x| x.len()).sum();
    if token_count == 0 {
        return Err(Error::invalid("ppl wants a non-empty dataset"));
    }
    let mut per_item = Vec::with_capacity(dataset.len());
    for (i, x) in dataset.iter().enumerate() {
        per_item.push(estimate_logp(model, x, k, mode, seed.wrapping_add(i as u64))?.value);
    }
    let total = kahan_sum(per_item.iter().copied());
    Ok(PplReport {
        mode,
        k,
        ppl: (-total / token_count as f64).exp(),
        total_nats: total,
        token_count,
        per_item,
    })
}

/// Components for scoring one new block conditioned on history.
pub trait CondBlockModel {
    fn sample_posterior(&self, rng: &mut Rng) -> Result<Tensor>;
    fn log_posterior(&self, z: &Tensor) -> Result<f64>;
    /// `log p_ψ(z | history)`.
    fn log_cond_prior(&self, z: &Tensor, rng: &mut Rng) -> Result<f64>;
    /// `log p(x_block | history, z)`.
    fn log_decoder(&self, z: &Tensor) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SingleBlockScore {
    /// Conditional ELBO of the block: exactly `recon - gap`.
    pub score: f64,
    /// Mean decoder term.
    pub recon: f64,
    /// Mean `log q - log p` term.
    pub gap: f64,
    pub k: usize,
}

/// Single-block response score averaged over `K` posterior samples,
/// reported through its `recon - gap` decomposition.
pub fn single_block_score(
    model: &dyn CondBlockModel,
    k: usize,
    rng: &mut Rng,
) -> Result<SingleBlockScore> {
    if k == 0 {
        return Err(Error::invalid("single_block_score wants K ≥ 1"));
    }
    let mut recon_terms = Vec::with_capacity(k);
    let mut gap_terms = Vec::with_capacity(k);
    for _ in 0..k {
        let z = model.sample_posterior(rng)?;
        recon_terms.push(model.log_decoder(&z)?);
        gap_terms.push(model.log_posterior(&z)? - model.log_cond_prior(&z, rng)?);
    }
    let recon = kahan_sum(recon_terms.iter().copied()) / k as f64;
    let gap = kahan_sum(gap_terms.iter().copied()) / k as f64;
    Ok(SingleBlockScore {
        score: recon - gap,
        recon,
        gap,
        k,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GapReport {
    pub iwae_large: f64,
    pub elbo_small: f64,
    /// `IWAE(K_large) − ELBO(K_small)`, a proxy for the inference gap.
    pub gap: f64,
}

/// Inference-gap proxy: a tight IWAE estimate minus the ELBO.
pub fn inference_gap_estimate(
    model: &dyn ScoreModel,
    x: &[usize],
    k_small: usize,
    k_large: usize,
    seed: u64,
) -> Result<GapReport> {
    if k_large < k_small {
        return Err(Error::invalid("inference gap wants K_large ≥ K_small"));
    }
    let iwae = estimate_logp(model, x, k_large, EstimatorMode::Iwae, seed)?;
    let elbo = estimate_logp(model, x, k_small, EstimatorMode::Elbo, seed.wrapping_add(7))?;
    Ok(GapReport {
        iwae_large: iwae.value,
        elbo_small: elbo.value,
        gap: iwae.value - elbo.value,
    })
}

/// The trained latent LM behind the [`ScoreModel`] interface: VAE posterior
/// and decoder plus the blockwise conditional CNF prior.
pub struct LatentLmScorer<'a> {
    pub vae: &'a TextVae,
    pub prior: &'a FlowPrior,
    pub ode: OdeConfig,
    /// Exact divergence up to this flattened block dimension, Hutchinson
    /// probes beyond it.
    pub exact_div_max_dim: usize,
    pub probes: usize,
}

impl<'a> LatentLmScorer<'a> {
    pub fn new(vae: &'a TextVae, prior: &'a FlowPrior) -> Self {
        LatentLmScorer {
            vae,
            prior,
            ode: OdeConfig::heun(64),
            exact_div_max_dim: 64,
            probes: 16,
        }
    }

    fn block_probes(&self, dim: usize) -> usize {
        if dim <= self.exact_div_max_dim {
            0
        } else {
            self.probes
        }
    }

    /// Blockwise conditional prior density of a full latent sequence:
    /// `Σ_b log p_ψ(z^(b) | z^(<b))`.
    pub fn blockwise_log_prior(&self, z0: &Tensor, rng: &mut Rng) -> Result<f64> {
        let rows = z0.rows();
        let d = self.prior.cfg.d_latent;
        let b_tok = self.prior.cfg.block_tokens;
        let mut total = 0.0;
        let mut start = 0usize;
        while start < rows {
            let nb = b_tok.min(rows - start);
            let block = Tensor::new(&[nb, d], z0.data()[start * d..(start + nb) * d].to_vec())?;
            let history = Tensor::new(&[start, d], z0.data()[..start * d].to_vec())?;
            let field = BlockField {
                prior: self.prior,
                history,
                block_start: start,
                rows: nb,
            };
            let flat = block.reshape(&[nb * d])?;
            let res =
                cnf::prior_logdensity(&flat, &field, self.ode, self.block_probes(nb * d), rng)?;
            total += res.log_prior;
            start += nb;
        }
        Ok(total)
    }
}

/// Flattened view of the conditional field on one block.
pub struct BlockField<'a> {
    pub prior: &'a FlowPrior,
    pub history: Tensor,
    pub block_start: usize,
    pub rows: usize,
}

impl VectorField for BlockField<'_> {
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let d = self.prior.cfg.d_latent;
        let state = z.reshape(&[self.rows, d])?;
        let v = self
            .prior
            .predict_velocity(&state, t, &self.history, self.block_start, true)?;
        v.reshape(&[self.rows * d])
    }

    fn dim(&self) -> usize {
        self.rows * self.prior.cfg.d_latent
    }
}

impl ScoreModel for LatentLmScorer<'_> {
    fn sample_posterior(&self, x: &[usize], rng: &mut Rng) -> Result<Tensor> {
        Ok(self.vae.encode(x)?.sample(rng))
    }

    fn log_posterior(&self, x: &[usize], z0: &Tensor) -> Result<f64> {
        Ok(self.vae.encode(x)?.log_density(z0))
    }

    fn log_decoder(&self, x: &[usize], z0: &Tensor) -> Result<f64> {
        self.vae.log_decoder(x, z0)
    }

    fn log_prior(&self, z0: &Tensor, rng: &mut Rng) -> Result<f64> {
        self.blockwise_log_prior(z0, rng)
    }
}

/// Single-block conditional scorer for the trained model. History latents
/// are the encoder mean of the history text; a posterior-sampled history
/// sits behind `sampled_history`.
pub struct LatentLmBlockScorer<'a> {
    pub scorer: &'a LatentLmScorer<'a>,
    pub history_x: Vec<usize>,
    pub block_x: Vec<usize>,
    pub history_z: Tensor,
}

impl<'a> LatentLmBlockScorer<'a> {
    pub fn new(
        scorer: &'a LatentLmScorer<'a>,
        history_x: &[usize],
        block_x: &[usize],
    ) -> Result<Self> {
        let history_z = scorer.vae.encode(history_x)?.mu;
        Ok(LatentLmBlockScorer {
            scorer,
            history_x: history_x.to_vec(),
            block_x: block_x.to_vec(),
            history_z,
        })
    }

    /// Alternative constructor drawing the history latents from the
    /// posterior instead of using its mean.
    pub fn sampled_history(
        scorer: &'a LatentLmScorer<'a>,
        history_x: &[usize],
        block_x: &[usize],
        rng: &mut Rng,
    ) -> Result<Self> {
        let history_z = scorer.vae.encode(history_x)?.sample(rng);
        Ok(LatentLmBlockScorer {
            scorer,
            history_x: history_x.to_vec(),
            block_x: block_x.to_vec(),
            history_z,
        })
    }

    fn full_x(&self) -> Vec<usize> {
        self.history_x
            .iter()
            .chain(self.block_x.iter())
            .copied()
            .collect()
    }

    fn block_rows(&self) -> usize {
        self.scorer.vae.cfg.latent_len(self.full_x().len()) - self.history_z.rows()
    }
}

impl CondBlockModel for LatentLmBlockScorer<'_> {
    fn sample_posterior(&self, rng: &mut Rng) -> Result<Tensor> {
        let post = self.scorer.vae.encode(&self.full_x())?;
        let z = post.sample(rng);
        let h = self.history_z.rows();
        let nb = self.block_rows();
        let d = self.scorer.vae.cfg.d_latent;
        Tensor::new(&[nb, d], z.data()[h * d..(h + nb) * d].to_vec())
    }

    fn log_posterior(&self, z: &Tensor) -> Result<f64> {
        let post = self.scorer.vae.encode(&self.full_x())?;
        let h = self.history_z.rows();
        let nb = self.block_rows();
        let d = self.scorer.vae.cfg.d_latent;
        let slice = crate::textvae::Posterior {
            mu: Tensor::new(&[nb, d], post.mu.data()[h * d..(h + nb) * d].to_vec())?,
            log_var: Tensor::new(&[nb, d], post.log_var.data()[h * d..(h + nb) * d].to_vec())?,
        };
        Ok(slice.log_density(z))
    }

    fn log_cond_prior(&self, z: &Tensor, rng: &mut Rng) -> Result<f64> {
        let nb = z.rows();
        let d = self.scorer.prior.cfg.d_latent;
        let start = self.history_z.rows();
        let field = BlockField {
            prior: self.scorer.prior,
            history: self.history_z.clone(),
            block_start: start,
            rows: nb,
        };
        let flat = z.reshape(&[nb * d])?;
        Ok(cnf::prior_logdensity(
            &flat,
            &field,
            self.scorer.ode,
            self.scorer.block_probes(nb * d),
            rng,
        )?
        .log_prior)
    }

    fn log_decoder(&self, z: &Tensor) -> Result<f64> {
        // Teacher-forced block log-likelihood under the full latent canvas.
        let full = self.full_x();
        let mut zfull = self.history_z.data().to_vec();
        zfull.extend_from_slice(z.data());
        let d = self.scorer.vae.cfg.d_latent;
        let zt = Tensor::new(&[zfull.len() / d, d], zfull)?;
        let logits = self.scorer.vae.decode_logits(&zt, &full)?;
        let logp = logits.log_softmax_rows();
        Ok((self.history_x.len()..full.len())
            .map(|i| logp.get2(i, full[i]))
            .sum())
    }
}
