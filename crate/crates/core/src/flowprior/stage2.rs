//! Conditional Flow Matching loss over latent blocks and the stage-2 joint
//! objective with reference-encoder regularization.

use crate::diffcore::{Bindings, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::flowprior::dit::{FlowPrior, StreamSpec};
use crate::schedule::Schedule;
use crate::textvae::TextVae;
use crate::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Stage2Weights {
    pub lambda_vae: f64,
    pub lambda_fm: f64,
    pub lambda_ref: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Stage2Weights {
            lambda_vae: 1.0,
            lambda_fm: 1.0,
            lambda_ref: 1.0,
        }
    }
}

impl Stage2Weights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_vae", self.lambda_vae),
            ("lambda_fm", self.lambda_fm),
            ("lambda_ref", self.lambda_ref),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

pub struct FmNodes {
    pub loss: NodeId,
}

/// Sampled layout of one FM pass over a latent sequence.
struct FmLayout {
    /// Per-row bridge value selector: 1.0 for supervised (unknown) rows.
    unknown_mask: Tensor,
    /// Per-row timestep, constant within each block.
    row_t: Vec<f64>,
    blocks: Vec<usize>,
    positions: Vec<usize>,
    num_blocks: usize,
    /// Known rows in the first generation block (training-time mirror of a
    /// mid-block prompt boundary).
    first_block_known: usize,
}

impl FlowPrior {
    fn sample_layout(
        &self,
        latent_len: usize,
        first_block_known: Option<usize>,
        schedule: &Schedule,
        rng: &mut Rng,
    ) -> FmLayout {
        let b_tok = self.cfg.block_tokens;
        let num_blocks = self.num_blocks(latent_len);
        let known = match first_block_known {
            Some(k) => k.min(b_tok.saturating_sub(1)).min(latent_len - 1),
            // Random-length alignment: the first block's known-region
            // length is sampled uniformly.
            None => rng.gen_range(0..b_tok.min(latent_len)),
        };
        let mut row_t = Vec::with_capacity(latent_len);
        let mut blocks = Vec::with_capacity(latent_len);
        let mut unknown = Vec::with_capacity(latent_len * self.cfg.d_latent);
        for b in 0..num_blocks {
            let t_b = schedule.sample_normalized(rng);
            let start = b * b_tok;
            let end = ((b + 1) * b_tok).min(latent_len);
            for row in start..end {
                row_t.push(t_b);
                blocks.push(b);
                let is_known = b == 0 && row < known;
                unknown.extend(std::iter::repeat(if is_known { 0.0 } else { 1.0 }).take(self.cfg.d_latent));
            }
        }
        FmLayout {
            unknown_mask: Tensor::new(&[latent_len, self.cfg.d_latent], unknown)
                .expect("mask shape"),
            row_t,
            blocks,
            positions: (0..latent_len).collect(),
            num_blocks,
            first_block_known: known,
        }
    }

    /// Conditional FM loss for one latent sequence already on the tape:
    /// mean over blocks of the squared error between the field and the
    /// bridge target on supervised rows.
    ///
    /// Gradients flow into `z0` through the current block's noisy state and
    /// target; the clean history stream is detached.
    pub fn fm_loss_graph(
        &self,
        g: &mut Graph,
        binds: &Bindings,
        z0: NodeId,
        schedule: &Schedule,
        first_block_known: Option<usize>,
        drop_history: bool,
        rng: &mut Rng,
    ) -> Result<FmNodes> {
        let latent_len = g.value(z0).rows();
        if latent_len == 0 {
            return Err(Error::invalid("empty latent sequence"));
        }
        let layout = self.sample_layout(latent_len, first_block_known, schedule, rng);
        let d = self.cfg.d_latent;

        // Bridge state and target, built row-wise on the tape.
        let z1 = g.leaf(Tensor::randn(&[latent_len, d], rng));
        let beta: Vec<f64> = layout
            .row_t
            .iter()
            .map(|&t| schedule.beta_path.beta(t))
            .collect();
        let beta_dot: Vec<f64> = layout
            .row_t
            .iter()
            .map(|&t| schedule.beta_path.beta_dot(t))
            .collect();
        let expand = |vals: &[f64]| -> Tensor {
            let data: Vec<f64> = vals
                .iter()
                .flat_map(|&v| std::iter::repeat(v).take(d))
                .collect();
            Tensor::new(&[latent_len, d], data).expect("coef shape")
        };
        let beta_m = g.leaf(expand(&beta));
        let one_minus_beta = g.leaf(expand(
            &beta.iter().map(|b| 1.0 - b).collect::<Vec<_>>(),
        ));
        let beta_dot_m = g.leaf(expand(&beta_dot));

        // z_t = (1-β) z0 + β z1 on supervised rows; known rows carry the
        // clean latent (as they do at inference under clean repainting).
        let a = g.mul(z0, one_minus_beta)?;
        let b = g.mul(z1, beta_m)?;
        let z_t = g.add(a, b)?;
        let unknown = g.leaf(layout.unknown_mask.clone());
        let known = {
            let neg = g.mul_scalar(unknown, -1.0);
            g.add_scalar(neg, 1.0)
        };
        let z0_detached = g.detach(z0);
        let zt_masked = g.mul(z_t, unknown)?;
        let clean_masked = g.mul(z0_detached, known)?;
        let noisy = g.add(zt_masked, clean_masked)?;

        // u_t = β̇ (z1 - z0).
        let diff = g.sub(z1, z0)?;
        let target = g.mul(diff, beta_dot_m)?;

        let clean_blocks: Vec<usize> = (0..latent_len).map(|r| self.block_of(r)).collect();
        let spec = StreamSpec {
            clean: z0_detached,
            clean_positions: &layout.positions,
            clean_blocks: &clean_blocks,
            noisy,
            noisy_positions: &layout.positions,
            noisy_blocks: &layout.blocks,
            noisy_t: &layout.row_t,
            drop_history,
        };
        let v = self.velocity_graph(g, binds, &spec)?;

        let err = g.sub(v, target)?;
        let err_masked = g.mul(err, unknown)?;
        let sq = g.mul(err_masked, err_masked)?;
        let total = g.sum_all(sq);
        let loss = g.mul_scalar(total, 1.0 / layout.num_blocks as f64);
        let _ = layout.first_block_known;
        Ok(FmNodes { loss })
    }

    /// Forward-only FM loss on a clean latent tensor.
    pub fn fm_loss(
        &self,
        z0: &Tensor,
        schedule: &Schedule,
        drop_history: bool,
        rng: &mut Rng,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let binds = Bindings::bind_frozen(&mut g, &self.params);
        let z0n = g.leaf(z0.clone());
        let nodes = self.fm_loss_graph(&mut g, &binds, z0n, schedule, Some(0), drop_history, rng)?;
        Ok(g.value(nodes.loss).item())
    }
}

pub struct Stage2Nodes {
    pub recon: NodeId,
    pub entropy_term: NodeId,
    pub mask: NodeId,
    pub fm: NodeId,
    pub ref_kl: NodeId,
    pub total: NodeId,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Stage2Parts {
    pub recon: f64,
    pub entropy_term: f64,
    pub mask: f64,
    pub fm: f64,
    pub ref_kl: f64,
    pub total: f64,
}

/// Joint stage-2 objective over a batch:
/// `λ_vae (recon + β·E[log q] + λ_mask·mask) + λ_fm·FM + λ_ref·KL(q‖q_ref)`.
///
/// `binds_vae` / `binds_prior` bind the live parameters; `binds_ref` binds
/// a frozen copy of the stage-1 encoder (identical parameter layout).
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss_graph(
    g: &mut Graph,
    vae: &TextVae,
    prior: &FlowPrior,
    binds_vae: &Bindings,
    binds_prior: &Bindings,
    binds_ref: &Bindings,
    weights: &Stage2Weights,
    schedule: &Schedule,
    batch: &[&[usize]],
    rng: &mut Rng,
) -> Result<Stage2Nodes> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }

    let mut recon_terms = Vec::new();
    let mut entropy_terms = Vec::new();
    let mut mask_terms = Vec::new();
    let mut fm_terms = Vec::new();
    let mut ref_terms = Vec::new();

    for ids in batch {
        let enc = vae.encode_graph(g, binds_vae, ids)?;

        // Reparameterized latent; feeds both the decoder and the prior.
        let eps = g.leaf(Tensor::randn(g.value(enc.mu).shape(), rng));
        let half_lv = g.mul_scalar(enc.log_var, 0.5);
        let std = g.exp(half_lv);
        let noise = g.mul(std, eps)?;
        let z0 = g.add(enc.mu, noise)?;

        let logits = vae.decode_graph(g, binds_vae, z0, ids)?;
        let active = vec![true; ids.len()];
        recon_terms.push(g.cross_entropy(logits, ids, &active)?);

        // β · E_q[log q] = -β · H(q), closed form for a diagonal Gaussian.
        let n_coords = g.value(enc.mu).len() as f64;
        let lv_sum = g.sum_all(enc.log_var);
        let neg_ent = {
            let half = g.mul_scalar(lv_sum, -0.5);
            g.add_scalar(
                half,
                -0.5 * n_coords * (1.0 + (2.0 * std::f64::consts::PI).ln()),
            )
        };
        entropy_terms.push(neg_ent);

        // BERT-style masking loss, as in stage 1.
        let flags: Vec<bool> = (0..ids.len())
            .map(|_| rng.gen::<f64>() < vae.cfg.mask_rate)
            .collect();
        if flags.iter().any(|&f| f) {
            let masked: Vec<usize> = ids
                .iter()
                .zip(&flags)
                .map(|(&id, &f)| if f { crate::textvae::MASK } else { id })
                .collect();
            let logits = vae.mask_logits_graph(g, binds_vae, &masked)?;
            mask_terms.push(g.cross_entropy(logits, ids, &flags)?);
        }

        // FM over blocks, with per-sequence history dropping for guidance.
        let drop = rng.gen::<f64>() < prior.cfg.cfg_drop;
        let fm = prior.fm_loss_graph(g, binds_prior, z0, schedule, None, drop, rng)?;
        fm_terms.push(fm.loss);

        // Reference-encoder KL on the same input; the reference pass binds
        // the frozen parameter copy (identical layout, so name lookups
        // resolve to the copied tensors).
        let ref_enc = vae.encode_graph(g, binds_ref, ids)?;
        let mu_diff = g.sub(enc.mu, ref_enc.mu)?;
        let d2 = g.mul(mu_diff, mu_diff)?;
        let var = g.exp(enc.log_var);
        let num = g.add(var, d2)?;
        let neg_ref_lv = g.mul_scalar(ref_enc.log_var, -1.0);
        let inv_ref_var = g.exp(neg_ref_lv);
        let frac = g.mul(num, inv_ref_var)?;
        let frac_sum = g.sum_all(frac);
        let ref_lv_sum = g.sum_all(ref_enc.log_var);
        let lv_sum2 = g.sum_all(enc.log_var);
        let a = g.sub(ref_lv_sum, lv_sum2)?;
        let b = g.add(a, frac_sum)?;
        let c = g.add_scalar(b, -n_coords);
        ref_terms.push(g.mul_scalar(c, 0.5));
    }

    let inv = 1.0 / batch.len() as f64;
    let mean_of = |g: &mut Graph, terms: &[NodeId]| -> Result<NodeId> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.mul_scalar(acc, inv))
    };
    let recon = mean_of(g, &recon_terms)?;
    let entropy_term = mean_of(g, &entropy_terms)?;
    let mask = if mask_terms.is_empty() {
        g.leaf(Tensor::scalar(0.0))
    } else {
        mean_of(g, &mask_terms)?
    };
    let fm = mean_of(g, &fm_terms)?;
    let ref_kl = mean_of(g, &ref_terms)?;

    let beta_ent = g.mul_scalar(entropy_term, vae.cfg.beta);
    let mask_w = g.mul_scalar(mask, vae.cfg.lambda_mask);
    let vae_part = {
        let a = g.add(recon, beta_ent)?;
        g.add(a, mask_w)?
    };
    let vae_w = g.mul_scalar(vae_part, weights.lambda_vae);
    let fm_w = g.mul_scalar(fm, weights.lambda_fm);
    let ref_w = g.mul_scalar(ref_kl, weights.lambda_ref);
    let t = g.add(vae_w, fm_w)?;
    let total = g.add(t, ref_w)?;

    Ok(Stage2Nodes {
        recon,
        entropy_term,
        mask,
        fm,
        ref_kl,
        total,
    })
}
