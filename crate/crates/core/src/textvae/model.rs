//! Stage-1 Text VAE: strictly causal encoder to per-position diagonal
//! Gaussian posteriors, strictly causal conditional decoder, the stage-1
//! loss, and the latent-smoothness diagnostics.

use crate::diffcore::{Bindings, Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, rope_for, BlockCtx};
use crate::schedule::Schedule;
use crate::textvae::tokenizer::{BOS, MASK};
use crate::{rng_from_seed, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum LogSnrMode {
    Learnable,
    /// Batchwise rescaling of `log_var` so the empirical posterior logSNR
    /// hits the target.
    Fixed(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VaeConfig {
    pub vocab_size: usize,
    pub d_latent: usize,
    /// Tokens compressed into one latent position.
    pub patch: usize,
    pub beta: f64,
    pub lambda_mask: f64,
    pub mask_rate: f64,
    pub logsnr_mode: LogSnrMode,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            vocab_size: 0,
            d_latent: 16,
            patch: 1,
            beta: 1e-3,
            lambda_mask: 0.1,
            mask_rate: 0.15,
            logsnr_mode: LogSnrMode::Learnable,
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            max_len: 512,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_latent == 0 || self.patch == 0 {
            return Err(Error::invalid("d_latent and patch must be ≥ 1"));
        }
        if self.beta < 0.0 || self.lambda_mask < 0.0 {
            return Err(Error::invalid("beta and lambda_mask must be ≥ 0"));
        }
        if let LogSnrMode::Fixed(v) = self.logsnr_mode {
            if !v.is_finite() {
                return Err(Error::invalid("fixed logSNR target must be finite"));
            }
        }
        Ok(())
    }

    /// Latent positions for a token sequence of length `l`.
    pub fn latent_len(&self, l: usize) -> usize {
        l.div_ceil(self.patch)
    }
}

/// Per-position diagonal Gaussian posterior parameters, `[L', d]` each.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl Posterior {
    /// `z = μ + exp(½ log σ²) ∘ ε`.
    pub fn sample(&self, rng: &mut Rng) -> Tensor {
        let eps = Tensor::randn(self.mu.shape(), rng);
        self.reparam(&eps)
    }

    pub fn reparam(&self, eps: &Tensor) -> Tensor {
        let std = self.log_var.map(|lv| (0.5 * lv).exp());
        self.mu
            .add(&std.mul(eps).expect("posterior shapes"))
            .expect("posterior shapes")
    }

    /// Diagonal-Gaussian log density at `z`.
    pub fn log_density(&self, z: &Tensor) -> f64 {
        let mut total = 0.0;
        for ((&m, &lv), &zi) in self
            .mu
            .data()
            .iter()
            .zip(self.log_var.data())
            .zip(z.data())
        {
            total += crate::oracle::gauss_logpdf(zi, m, lv.exp());
        }
        total
    }
}

/// Closed-form KL between diagonal Gaussians, summed over coordinates.
pub fn diag_gauss_kl(q: &Posterior, p: &Posterior) -> f64 {
    let mut total = 0.0;
    for i in 0..q.mu.len() {
        let (mq, lvq) = (q.mu.data()[i], q.log_var.data()[i]);
        let (mp, lvp) = (p.mu.data()[i], p.log_var.data()[i]);
        total += 0.5 * (lvp - lvq + (lvq.exp() + (mq - mp) * (mq - mp)) / lvp.exp() - 1.0);
    }
    total
}

pub struct EncodeNodes {
    pub mu: NodeId,
    pub log_var: NodeId,
    pub hidden: NodeId,
}

pub struct Stage1Nodes {
    pub recon: NodeId,
    pub kl: NodeId,
    pub mask: NodeId,
    pub total: NodeId,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Stage1Parts {
    pub recon: f64,
    pub kl: f64,
    pub mask: f64,
    pub total: f64,
}

pub struct TextVae {
    pub cfg: VaeConfig,
    pub params: ParamSet,
}

impl TextVae {
    pub fn init(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamSet::new();
        let (v, dm, d) = (cfg.vocab_size, cfg.d_model, cfg.d_latent);
        params.add_linear("enc.emb", v, dm, &mut rng);
        for l in 0..cfg.enc_layers {
            crate::nn::register_block(&mut params, &format!("enc.l{l}"), dm, &mut rng);
        }
        params.add("enc.ln_g", Tensor::full(&[dm], 1.0));
        params.add_zeros("enc.ln_b", &[dm]);
        params.add_linear("enc.mu_w", dm, d, &mut rng);
        params.add_zeros("enc.mu_b", &[d]);
        params.add_linear("enc.lv_w", dm, d, &mut rng);
        params.add_zeros("enc.lv_b", &[d]);
        params.add_linear("enc.mask_w", dm, v, &mut rng);
        params.add_zeros("enc.mask_b", &[v]);

        params.add_linear("dec.emb", v, dm, &mut rng);
        params.add_linear("dec.zin_w", d, dm, &mut rng);
        params.add_zeros("dec.zin_b", &[dm]);
        params.add_zeros("dec.padflag", &[dm]);
        for l in 0..cfg.dec_layers {
            crate::nn::register_block(&mut params, &format!("dec.l{l}"), dm, &mut rng);
        }
        params.add("dec.ln_g", Tensor::full(&[dm], 1.0));
        params.add_zeros("dec.ln_b", &[dm]);
        params.add_linear("dec.out_w", dm, v, &mut rng);
        params.add_zeros("dec.out_b", &[v]);
        Ok(TextVae { cfg, params })
    }

    fn check_len(&self, l: usize) -> Result<()> {
        if l == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        if l > self.cfg.max_len {
            return Err(Error::invalid(format!(
                "sequence length {l} over maximum {}",
                self.cfg.max_len
            )));
        }
        Ok(())
    }

    /// Causal encoder trunk over a token stream; `[L, d_model]` states.
    fn encoder_states(
        &self,
        g: &mut Graph,
        binds: &Bindings,
        ids: &[usize],
    ) -> Result<NodeId> {
        self.check_len(ids.len())?;
        let cfg = &self.cfg;
        let mut ctx = BlockCtx::new(g, binds, &self.params);
        let emb = ctx.p("enc.emb");
        let mut h = ctx.graph.embedding(emb, ids)?;
        let mask = causal_mask(ids.len());
        let (cos, sin) = rope_for(ids.len(), cfg.d_model, cfg.heads);
        for l in 0..cfg.enc_layers {
            h = ctx.transformer_block(
                h,
                &format!("enc.l{l}"),
                cfg.heads,
                &mask,
                Some((&cos, &sin)),
                None,
            )?;
        }
        let n = ctx.graph.layer_norm(h, 1e-5)?;
        let gn = ctx.p("enc.ln_g");
        let bn = ctx.p("enc.ln_b");
        let scaled = ctx.graph.mul_row(n, gn)?;
        ctx.graph.add_row(scaled, bn)
    }

    /// Patch pooling indices: the last token position of each patch, so the
    /// pooled state has seen the whole patch and nothing after it.
    fn pool_indices(&self, l: usize) -> Vec<usize> {
        (0..self.cfg.latent_len(l))
            .map(|k| ((k + 1) * self.cfg.patch - 1).min(l - 1))
            .collect()
    }

    /// Token position → latent row covering it.
    fn latent_index(&self, l: usize) -> Vec<usize> {
        (0..l).map(|i| i / self.cfg.patch).collect()
    }

    /// Mask-prediction head over encoder states of a (masked) input stream.
    pub fn mask_logits_graph(
        &self,
        g: &mut Graph,
        binds: &Bindings,
        masked_ids: &[usize],
    ) -> Result<NodeId> {
        let states = self.encoder_states(g, binds, masked_ids)?;
        let mut ctx = BlockCtx::new(g, binds, &self.params);
        ctx.linear_bias(states, "enc.mask_w", "enc.mask_b")
    }

    /// Per-position posterior heads on the tape. `log_var` is clamped to
    /// `[-30, 10]`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        binds: &Bindings,
        ids: &[usize],
    ) -> Result<EncodeNodes> {
        let states = self.encoder_states(g, binds, ids)?;
        let pooled = g.gather_rows(states, &self.pool_indices(ids.len()))?;
        let mut ctx = BlockCtx::new(g, binds, &self.params);
        let mu = ctx.linear_bias(pooled, "enc.mu_w", "enc.mu_b")?;
        let lv_raw = ctx.linear_bias(pooled, "enc.lv_w", "enc.lv_b")?;
        let log_var = g.clamp(lv_raw, LOGVAR_MIN, LOGVAR_MAX);
        Ok(EncodeNodes {
            mu,
            log_var,
            hidden: states,
        })
    }

    /// Teacher-forced decoder logits `[L, vocab]`. Position `i` sees
    /// teacher tokens `< i` and the latents covering positions `≤ i`.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        binds: &Bindings,
        z: NodeId,
        teacher: &[usize],
    ) -> Result<NodeId> {
        self.check_len(teacher.len())?;
        let cfg = &self.cfg;
        let l = teacher.len();
        let lp = cfg.latent_len(l);
        if g.value(z).rows() != lp {
            return Err(Error::ShapeMismatch {
                op: "decode_graph",
                left: g.value(z).shape().to_vec(),
                right: vec![lp, cfg.d_latent],
            });
        }
        let mut input = Vec::with_capacity(l);
        input.push(BOS);
        input.extend_from_slice(&teacher[..l - 1]);

        let mut ctx = BlockCtx::new(g, binds, &self.params);
        let emb = ctx.p("dec.emb");
        let tok = ctx.graph.embedding(emb, &input)?;
        let zin = ctx.linear_bias(z, "dec.zin_w", "dec.zin_b")?;
        let spread = ctx.graph.gather_rows(zin, &self.latent_index(l))?;
        let mut h = ctx.graph.add(tok, spread)?;

        // Make the trailing partial patch observable to the decoder.
        if l % cfg.patch != 0 {
            let first_partial = (lp - 1) * cfg.patch;
            let flag_rows: Vec<f64> = (0..l)
                .flat_map(|i| {
                    let on = if i >= first_partial { 1.0 } else { 0.0 };
                    std::iter::repeat(on).take(cfg.d_model)
                })
                .collect();
            let flags = ctx.graph.leaf(Tensor::new(&[l, cfg.d_model], flag_rows)?);
            let pf = ctx.p("dec.padflag");
            let pf_row = {
                let ones = ctx.graph.leaf(Tensor::full(&[l, cfg.d_model], 1.0));
                ctx.graph.mul_row(ones, pf)?
            };
            let contribution = ctx.graph.mul(flags, pf_row)?;
            h = ctx.graph.add(h, contribution)?;
        }

        let mask = causal_mask(l);
        let (cos, sin) = rope_for(l, cfg.d_model, cfg.heads);
        for layer in 0..cfg.dec_layers {
            h = ctx.transformer_block(
                h,
                &format!("dec.l{layer}"),
                cfg.heads,
                &mask,
                Some((&cos, &sin)),
                None,
            )?;
        }
        let n = ctx.graph.layer_norm(h, 1e-5)?;
        let gn = ctx.p("dec.ln_g");
        let bn = ctx.p("dec.ln_b");
        let scaled = ctx.graph.mul_row(n, gn)?;
        let h = ctx.graph.add_row(scaled, bn)?;
        ctx.linear_bias(h, "dec.out_w", "dec.out_b")
    }

    /// Stage-1 loss over a batch, all terms per-sequence sums averaged over
    /// the batch: `total = recon + β·kl + λ_mask·mask`.
    pub fn stage1_loss_graph(
        &self,
        g: &mut Graph,
        binds: &Bindings,
        batch: &[&[usize]],
        rng: &mut Rng,
    ) -> Result<Stage1Nodes> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut encoded = Vec::with_capacity(batch.len());
        for ids in batch {
            encoded.push(self.encode_graph(g, binds, ids)?);
        }

        // Batchwise enforcement of a fixed posterior logSNR: shift every
        // log_var by the detached correction ln c.
        let log_vars: Vec<NodeId> = if let LogSnrMode::Fixed(target) = self.cfg.logsnr_mode {
            let mut mu2_sum = 0.0;
            let mut var_sum = 0.0;
            let mut count = 0.0;
            for e in &encoded {
                mu2_sum += g.value(e.mu).data().iter().map(|m| m * m).sum::<f64>();
                var_sum += g.value(e.log_var).data().iter().map(|lv| lv.exp()).sum::<f64>();
                count += g.value(e.mu).len() as f64;
            }
            let ln_c = (mu2_sum / count).ln() - (var_sum / count).ln() - target;
            encoded
                .iter()
                .map(|e| {
                    let shifted = g.add_scalar(e.log_var, ln_c);
                    g.clamp(shifted, LOGVAR_MIN, LOGVAR_MAX)
                })
                .collect()
        } else {
            encoded.iter().map(|e| e.log_var).collect()
        };

        let mut recon_terms = Vec::new();
        let mut kl_terms = Vec::new();
        let mut mask_terms = Vec::new();
        for ((ids, enc), &lv) in batch.iter().zip(&encoded).zip(&log_vars) {
            // Reparameterized sample.
            let eps = g.leaf(Tensor::randn(g.value(enc.mu).shape(), rng));
            let half_lv = g.mul_scalar(lv, 0.5);
            let std = g.exp(half_lv);
            let noise = g.mul(std, eps)?;
            let z = g.add(enc.mu, noise)?;

            let logits = self.decode_graph(g, binds, z, ids)?;
            let active = vec![true; ids.len()];
            recon_terms.push(g.cross_entropy(logits, ids, &active)?);

            // KL(q ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − log σ²).
            let mu2 = g.mul(enc.mu, enc.mu)?;
            let var = g.exp(lv);
            let sum_mu2 = g.sum_all(mu2);
            let sum_var = g.sum_all(var);
            let sum_lv = g.sum_all(lv);
            let n_coords = g.value(enc.mu).len() as f64;
            let a = g.add(sum_mu2, sum_var)?;
            let b = g.add_scalar(a, -n_coords);
            let c = g.sub(b, sum_lv)?;
            kl_terms.push(g.mul_scalar(c, 0.5));

            // BERT-style loss: re-encode with masked input, predict the
            // original symbols at masked positions from encoder states.
            let flags: Vec<bool> = (0..ids.len())
                .map(|_| rng.gen::<f64>() < self.cfg.mask_rate)
                .collect();
            if flags.iter().any(|&f| f) {
                let masked: Vec<usize> = ids
                    .iter()
                    .zip(&flags)
                    .map(|(&id, &f)| if f { MASK } else { id })
                    .collect();
                let logits = self.mask_logits_graph(g, binds, &masked)?;
                mask_terms.push(g.cross_entropy(logits, ids, &flags)?);
            }
        }

        let inv = 1.0 / batch.len() as f64;
        let recon_sum = sum_nodes(g, &recon_terms)?;
        let recon = g.mul_scalar(recon_sum, inv);
        let kl_sum = sum_nodes(g, &kl_terms)?;
        let kl = g.mul_scalar(kl_sum, inv);
        let mask = if mask_terms.is_empty() {
            g.leaf(Tensor::scalar(0.0))
        } else {
            let s = sum_nodes(g, &mask_terms)?;
            g.mul_scalar(s, inv)
        };

        let kl_w = g.mul_scalar(kl, self.cfg.beta);
        let mask_w = g.mul_scalar(mask, self.cfg.lambda_mask);
        let t = g.add(recon, kl_w)?;
        let total = g.add(t, mask_w)?;
        Ok(Stage1Nodes {
            recon,
            kl,
            mask,
            total,
        })
    }

    /// Stage-1 loss values on a batch (forward only).
    pub fn stage1_loss(&self, batch: &[&[usize]], rng: &mut Rng) -> Result<Stage1Parts> {
        let mut g = Graph::new();
        let binds = Bindings::bind_frozen(&mut g, &self.params);
        let nodes = self.stage1_loss_graph(&mut g, &binds, batch, rng)?;
        Ok(Stage1Parts {
            recon: g.value(nodes.recon).item(),
            kl: g.value(nodes.kl).item(),
            mask: g.value(nodes.mask).item(),
            total: g.value(nodes.total).item(),
        })
    }

    /// Frozen-parameter encoder pass.
    pub fn encode(&self, ids: &[usize]) -> Result<Posterior> {
        let mut g = Graph::new();
        let binds = Bindings::bind_frozen(&mut g, &self.params);
        let enc = self.encode_graph(&mut g, &binds, ids)?;
        Ok(Posterior {
            mu: g.value(enc.mu).clone(),
            log_var: g.value(enc.log_var).clone(),
        })
    }

    /// Frozen-parameter decoder logits.
    pub fn decode_logits(&self, z: &Tensor, teacher: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let binds = Bindings::bind_frozen(&mut g, &self.params);
        let zn = g.leaf(z.clone());
        let logits = self.decode_graph(&mut g, &binds, zn, teacher)?;
        Ok(g.value(logits).clone())
    }

    /// Teacher-forced log-likelihood `log p(x | z)` in nats.
    pub fn log_decoder(&self, ids: &[usize], z: &Tensor) -> Result<f64> {
        let logits = self.decode_logits(z, ids)?;
        let logp = logits.log_softmax_rows();
        Ok(ids
            .iter()
            .enumerate()
            .map(|(i, &t)| logp.get2(i, t))
            .sum())
    }

    /// Teacher-forced argmax reconstruction accuracy from a latent.
    pub fn recon_accuracy(&self, ids: &[usize], z: &Tensor) -> Result<f64> {
        let logits = self.decode_logits(z, ids)?;
        let mut hits = 0usize;
        for (i, &t) in ids.iter().enumerate() {
            let row = logits.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .unwrap();
            hits += usize::from(argmax == t);
        }
        Ok(hits as f64 / ids.len() as f64)
    }

    /// Encode, perturb the latent with the forward process at normalized
    /// time `s = t/T`, decode, and report exact-match token accuracy.
    pub fn recon_under_noise(
        &self,
        ids: &[usize],
        s: f64,
        schedule: &Schedule,
        rng: &mut Rng,
    ) -> Result<f64> {
        let post = self.encode(ids)?;
        let z = if s <= 0.0 {
            post.mu.clone()
        } else {
            schedule.forward_noise(&post.mu, s, rng)
        };
        self.recon_accuracy(ids, &z)
    }

    /// Empirical posterior logSNR over a dataset:
    /// `log(mean μ² / mean σ²)` over all coordinates.
    pub fn measure_vae_logsnr(&self, dataset: &[Vec<usize>]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let mut mu2 = 0.0;
        let mut var = 0.0;
        let mut count = 0.0;
        for ids in dataset {
            let post = self.encode(ids)?;
            mu2 += post.mu.data().iter().map(|m| m * m).sum::<f64>();
            var += post.log_var.data().iter().map(|lv| lv.exp()).sum::<f64>();
            count += post.mu.len() as f64;
        }
        measure_logsnr_from_moments(mu2 / count, var / count)
    }
}

/// `log(mean μ² / mean σ²)`; fails on an all-deterministic posterior.
pub fn measure_logsnr_from_moments(mean_mu2: f64, mean_var: f64) -> Result<f64> {
    if mean_var <= 0.0 {
        return Err(Error::invalid(
            "posterior variance is zero everywhere; logSNR undefined",
        ));
    }
    Ok((mean_mu2 / mean_var).ln())
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}
