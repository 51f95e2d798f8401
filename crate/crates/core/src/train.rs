//! Two-stage training loops: stage 1 fits the text VAE, stage 2 jointly
//! fits the VAE and the block-causal prior with reference regularization.

use crate::diffcore::{AdamW, Bindings, Graph, ParamSet};
use crate::error::{Error, Result};
use crate::flowprior::{stage2_loss_graph, FlowPrior, Stage2Weights};
use crate::schedule::Schedule;
use crate::textvae::{TextVae, Tokenizer, END};
use crate::{derived_rng, Rng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_init: 1e-6,
            lr_peak: 3e-3,
            lr_final: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 8,
            weight_decay: 0.01,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
        }
    }
}

impl OptimConfig {
    /// Linear warmup to the peak, then cosine decay to the final rate.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = (step + 1) as f64 / self.warmup_steps.max(1) as f64;
            self.lr_init + (self.lr_peak - self.lr_init) * f
        } else {
            let span = (self.total_steps.saturating_sub(self.warmup_steps)).max(1) as f64;
            let f = ((step - self.warmup_steps) as f64 / span).min(1.0);
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * f).cos());
            self.lr_final + (self.lr_peak - self.lr_final) * cos
        }
    }

    fn optimizer(&self, params: &ParamSet) -> AdamW {
        let mut opt = AdamW::new(params);
        opt.beta1 = self.beta1;
        opt.beta2 = self.beta2;
        opt.weight_decay = self.weight_decay;
        opt.clip = self.clip;
        opt
    }
}

/// Tokenize corpus lines, append the end symbol, and drop over-long or
/// empty items.
pub fn prepare_dataset(tokenizer: &Tokenizer, text: &str, max_len: usize) -> Vec<Vec<usize>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .filter_map(|line| {
            let (mut ids, _unk) = tokenizer.encode(line);
            ids.push(END);
            (ids.len() <= max_len).then_some(ids)
        })
        .collect()
}

/// Deterministic epoch-shuffled batch stream.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = derived_rng(seed, 101);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Batches {
            order,
            cursor: 0,
            rng,
        }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Stage1Record {
    pub step: usize,
    pub lr: f64,
    pub recon: f64,
    pub kl: f64,
    pub mask: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Stage-1 VAE training. Deterministic for a fixed seed and single-worker
/// batch order. The callback sees every step's loss components.
pub fn train_stage1(
    vae: &mut TextVae,
    data: &[Vec<usize>],
    optim: &OptimConfig,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(&Stage1Record),
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("empty training dataset"));
    }
    let mut opt = optim.optimizer(&vae.params);
    let mut batches = Batches::new(data.len(), seed);
    let mut loss_rng = derived_rng(seed, 202);

    for step in 0..steps {
        let idx = batches.next(optim.batch_size);
        let batch: Vec<&[usize]> = idx.iter().map(|&i| data[i].as_slice()).collect();

        let mut g = Graph::new();
        let binds = Bindings::bind_all(&mut g, &vae.params);
        let nodes = vae.stage1_loss_graph(&mut g, &binds, &batch, &mut loss_rng)?;
        let record = Stage1Record {
            step,
            lr: optim.lr_at(step),
            recon: g.value(nodes.recon).item(),
            kl: g.value(nodes.kl).item(),
            mask: g.value(nodes.mask).item(),
            total: g.value(nodes.total).item(),
            grad_norm: 0.0,
        };
        binds.backward_into(&mut g, nodes.total, &mut vae.params)?;
        let grad_norm = vae.params.grad_norm();
        opt.step(&mut vae.params, record.lr)?;
        on_step(&Stage1Record { grad_norm, ..record });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Stage2Record {
    pub step: usize,
    pub lr: f64,
    pub recon: f64,
    pub entropy_term: f64,
    pub mask: f64,
    pub fm: f64,
    pub ref_kl: f64,
    pub total: f64,
}

/// Joint stage-2 training; the reference encoder is a frozen copy of the
/// VAE parameters taken at entry.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    vae: &mut TextVae,
    prior: &mut FlowPrior,
    weights: &Stage2Weights,
    schedule: &Schedule,
    data: &[Vec<usize>],
    optim: &OptimConfig,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(&Stage2Record),
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("empty training dataset"));
    }
    let ref_params = vae.params.clone();
    let mut opt_vae = optim.optimizer(&vae.params);
    let mut opt_prior = optim.optimizer(&prior.params);
    let mut batches = Batches::new(data.len(), seed.wrapping_add(1));
    let mut loss_rng = derived_rng(seed, 303);

    for step in 0..steps {
        let idx = batches.next(optim.batch_size);
        let batch: Vec<&[usize]> = idx.iter().map(|&i| data[i].as_slice()).collect();

        let mut g = Graph::new();
        let binds_vae = Bindings::bind_all(&mut g, &vae.params);
        let binds_prior = Bindings::bind_all(&mut g, &prior.params);
        let binds_ref = Bindings::bind_frozen(&mut g, &ref_params);
        let nodes = stage2_loss_graph(
            &mut g,
            vae,
            prior,
            &binds_vae,
            &binds_prior,
            &binds_ref,
            weights,
            schedule,
            &batch,
            &mut loss_rng,
        )?;
        let record = Stage2Record {
            step,
            lr: optim.lr_at(step),
            recon: g.value(nodes.recon).item(),
            entropy_term: g.value(nodes.entropy_term).item(),
            mask: g.value(nodes.mask).item(),
            fm: g.value(nodes.fm).item(),
            ref_kl: g.value(nodes.ref_kl).item(),
            total: g.value(nodes.total).item(),
        };
        g.backward(nodes.total)?;
        binds_vae.collect(&g, &mut vae.params);
        binds_prior.collect(&g, &mut prior.params);
        opt_vae.step(&mut vae.params, record.lr)?;
        opt_prior.step(&mut prior.params, record.lr)?;
        on_step(&record);
    }
    Ok(())
}
