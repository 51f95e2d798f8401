//! End-to-end generation: prefix encoding, blockwise latent transport with
//! classifier-free guidance, first-block conditioning strategies, and
//! conditional text decoding.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::flowprior::FlowPrior;
use crate::schedule::Schedule;
use crate::textvae::{TextVae, Tokenizer, END, PAD};
use crate::{rng_from_seed, Rng};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FirstBlockStrategy {
    /// Known positions reset to their clean latents at every step.
    CleanRepaint,
    /// Timestep-matched noisy guidance on the known region for the first
    /// `m` fraction of steps, each such step repeated `t_rep` times.
    PartialRepaint { t_rep: usize, m: f64 },
    /// Pad latents inserted before the prompt so it ends on a block
    /// boundary; no per-step correction.
    LeftPad,
    /// Pad latents appended after the prompt up to the block boundary; no
    /// per-step correction.
    RightPad,
}

impl FirstBlockStrategy {
    pub fn validate(&self) -> Result<()> {
        if let FirstBlockStrategy::PartialRepaint { t_rep, m } = self {
            if *t_rep < 1 {
                return Err(Error::invalid("partial repaint wants t_rep ≥ 1"));
            }
            if !(0.0..=1.0).contains(m) {
                return Err(Error::invalid(format!(
                    "partial repaint wants m in [0, 1], got {m}"
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            FirstBlockStrategy::CleanRepaint => "clean_repaint",
            FirstBlockStrategy::PartialRepaint { .. } => "partial_repaint",
            FirstBlockStrategy::LeftPad => "left_pad",
            FirstBlockStrategy::RightPad => "right_pad",
        }
    }
}

impl std::str::FromStr for FirstBlockStrategy {
    type Err = Error;

    /// `clean_repaint`, `partial_repaint:T:M`, `left_pad`, `right_pad`.
    fn from_str(s: &str) -> Result<Self> {
        let strat = match s {
            "clean_repaint" => FirstBlockStrategy::CleanRepaint,
            "left_pad" => FirstBlockStrategy::LeftPad,
            "right_pad" => FirstBlockStrategy::RightPad,
            other => {
                let mut parts = other.split(':');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some("partial_repaint"), t, m) => {
                        let t_rep = t.unwrap_or("1").parse().map_err(|_| {
                            Error::invalid(format!("bad t_rep in strategy {other}"))
                        })?;
                        let m = m.unwrap_or("1.0").parse().map_err(|_| {
                            Error::invalid(format!("bad m in strategy {other}"))
                        })?;
                        FirstBlockStrategy::PartialRepaint { t_rep, m }
                    }
                    _ => return Err(Error::invalid(format!("unknown strategy {other}"))),
                }
            }
        };
        strat.validate()?;
        Ok(strat)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Denoising steps per block.
    pub steps: usize,
    pub cfg_scale: f64,
    pub strategy: FirstBlockStrategy,
    pub max_blocks: usize,
    pub seed: u64,
    /// Softmax temperature for decoding; `None` is greedy argmax.
    pub temperature: Option<f64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            steps: 16,
            cfg_scale: 7.0,
            strategy: FirstBlockStrategy::CleanRepaint,
            max_blocks: 4,
            seed: 0,
            temperature: None,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("generation wants steps ≥ 1"));
        }
        self.strategy.validate()
    }
}

/// Classifier-free guidance combination `v = v_u + s (v_c - v_u)`.
/// The endpoints are exact: `s = 1` returns `v_cond`, `s = 0` `v_uncond`.
pub fn cfg_combine(v_cond: &Tensor, v_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            left: v_cond.shape().to_vec(),
            right: v_uncond.shape().to_vec(),
        });
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    let diff = v_cond.sub(v_uncond)?;
    v_uncond.add(&diff.scale(scale))
}

/// Prefix latents: encoder mean by default, posterior sample behind a flag.
pub fn encode_prefix(
    vae: &TextVae,
    x_pre: &[usize],
    sampled: Option<&mut Rng>,
) -> Result<Tensor> {
    if x_pre.is_empty() {
        return Err(Error::invalid("empty prefix"));
    }
    let post = vae.encode(x_pre)?;
    Ok(match sampled {
        Some(rng) => post.sample(rng),
        None => post.mu,
    })
}

/// Known region inside the first generation block.
#[derive(Clone, Debug)]
pub struct KnownRegion {
    /// Clean latents for the known rows, `[len, d]`.
    pub latents: Tensor,
    pub len: usize,
}

/// Apply a first-block conditioning adjustment to the block state before a
/// solver step at flow time `t`.
pub fn first_block_condition(
    state: &mut Tensor,
    known: &KnownRegion,
    strategy: &FirstBlockStrategy,
    step_index: usize,
    total_steps: usize,
    t: f64,
    schedule: &Schedule,
    rng: &mut Rng,
) -> Result<()> {
    strategy.validate()?;
    if known.len == 0 {
        return Ok(());
    }
    let d = state.cols();
    match strategy {
        FirstBlockStrategy::CleanRepaint => {
            for row in 0..known.len {
                for j in 0..d {
                    state.set2(row, j, known.latents.get2(row, j));
                }
            }
        }
        FirstBlockStrategy::PartialRepaint { m, .. } => {
            let guided = guided_steps(*m, total_steps);
            if step_index < guided {
                let (alpha, sigma) = schedule.coeffs(t);
                let eps = Tensor::randn(&[known.len, d], rng);
                for row in 0..known.len {
                    for j in 0..d {
                        let noisy =
                            alpha * known.latents.get2(row, j) + sigma * eps.get2(row, j);
                        state.set2(row, j, noisy);
                    }
                }
            }
        }
        // Padding strategies relocate the known region up front and apply
        // no per-step correction.
        FirstBlockStrategy::LeftPad | FirstBlockStrategy::RightPad => {}
    }
    Ok(())
}

/// Number of leading steps that receive guidance: the first `m` fraction,
/// rounded up.
pub fn guided_steps(m: f64, total_steps: usize) -> usize {
    ((m * total_steps as f64).ceil() as usize).min(total_steps)
}

/// One generated block plus its per-step states (for repaint audits).
pub struct BlockResult {
    pub latents: Tensor,
    pub step_states: Vec<Tensor>,
}

/// Transport a noise seed to a clean block under the CFG-combined field,
/// honoring the first-block conditioning strategy when a known region is
/// present.
pub fn generate_block(
    prior: &FlowPrior,
    history: &Tensor,
    block_start: usize,
    rows: usize,
    known: Option<&KnownRegion>,
    config: &GenerationConfig,
    schedule: &Schedule,
    rng: &mut Rng,
) -> Result<BlockResult> {
    config.validate()?;
    let d = prior.cfg.d_latent;
    let mut state = Tensor::randn(&[rows, d], rng);
    let steps = config.steps;
    let h = 1.0 / steps as f64;
    let mut step_states = Vec::with_capacity(steps);

    let eval = |state: &Tensor, t: f64| -> Result<Tensor> {
        let v_cond = prior.predict_velocity(state, t, history, block_start, true)?;
        if config.cfg_scale == 1.0 || history.rows() == 0 {
            return Ok(v_cond);
        }
        let v_uncond = prior.predict_velocity(state, t, history, block_start, false)?;
        cfg_combine(&v_cond, &v_uncond, config.cfg_scale)
    };

    for step in 0..steps {
        let t_hi = 1.0 - h * step as f64;
        let t_lo = t_hi - h;
        let t_mid = 0.5 * (t_hi + t_lo);

        let repeats = match (&config.strategy, known) {
            (FirstBlockStrategy::PartialRepaint { t_rep, m }, Some(k))
                if k.len > 0 && step < guided_steps(*m, steps) =>
            {
                *t_rep
            }
            _ => 1,
        };

        let mut stepped = state.clone();
        for _rep in 0..repeats {
            let mut work = state.clone();
            if let Some(k) = known {
                first_block_condition(
                    &mut work,
                    k,
                    &config.strategy,
                    step,
                    steps,
                    t_mid,
                    schedule,
                    rng,
                )?;
            }
            // Heun step from t_hi down to t_lo.
            let k1 = eval(&work, t_hi)?;
            let pred = work.add(&k1.scale(t_lo - t_hi))?;
            let k2 = eval(&pred, t_lo)?;
            stepped = work.add(&k1.add(&k2)?.scale(0.5 * (t_lo - t_hi)))?;
            if !stepped.is_finite() {
                return Err(Error::NonFinite {
                    what: "block state".into(),
                    step: Some(step),
                });
            }
        }
        state = stepped;

        // Clean repainting pins the known region after the step too, so
        // every intermediate state carries the clean latents exactly.
        if let (FirstBlockStrategy::CleanRepaint, Some(k)) = (&config.strategy, known) {
            first_block_condition(
                &mut state,
                k,
                &FirstBlockStrategy::CleanRepaint,
                step,
                steps,
                t_lo,
                schedule,
                rng,
            )?;
        }
        step_states.push(state.clone());
    }

    Ok(BlockResult {
        latents: state,
        step_states,
    })
}

/// Latent canvas layout derived from a prompt under a strategy.
#[derive(Clone, Debug)]
pub struct PromptLayout {
    /// Full history blocks (complete blocks only), `[h, d]`.
    pub history: Tensor,
    /// Known region carried into the first generation block.
    pub known: Option<KnownRegion>,
    /// Token stream matching the latent canvas so far (pads included).
    pub tokens: Vec<usize>,
    /// Rows occupied by pad latents.
    pub pad_rows: usize,
}

/// Lay out prompt latents for generation. Repaint strategies leave the
/// prompt tail inside the first generation block as a known region;
/// padding strategies move the boundary to a block edge with zero latents.
pub fn layout_prompt(
    vae: &TextVae,
    prior: &FlowPrior,
    prompt_ids: &[usize],
    strategy: &FirstBlockStrategy,
) -> Result<PromptLayout> {
    let z_pre = encode_prefix(vae, prompt_ids, None)?;
    let d = vae.cfg.d_latent;
    let b = prior.cfg.block_tokens;
    let lp = z_pre.rows();
    let rem = lp % b;
    let patch = vae.cfg.patch;

    match strategy {
        FirstBlockStrategy::CleanRepaint | FirstBlockStrategy::PartialRepaint { .. } => {
            let full = lp - rem;
            let history = Tensor::new(&[full, d], z_pre.data()[..full * d].to_vec())?;
            let known = if rem > 0 {
                Some(KnownRegion {
                    latents: Tensor::new(&[rem, d], z_pre.data()[full * d..].to_vec())?,
                    len: rem,
                })
            } else {
                None
            };
            Ok(PromptLayout {
                history,
                known,
                tokens: prompt_ids.to_vec(),
                pad_rows: 0,
            })
        }
        FirstBlockStrategy::LeftPad => {
            let pad = (b - rem) % b;
            let mut data = vec![0.0; pad * d];
            data.extend_from_slice(z_pre.data());
            let history = Tensor::new(&[pad + lp, d], data)?;
            let mut tokens = vec![PAD; pad * patch];
            tokens.extend_from_slice(prompt_ids);
            Ok(PromptLayout {
                history,
                known: None,
                tokens,
                pad_rows: pad,
            })
        }
        FirstBlockStrategy::RightPad => {
            let pad = (b - rem) % b;
            let mut data = z_pre.data().to_vec();
            data.extend(std::iter::repeat(0.0).take(pad * d));
            let history = Tensor::new(&[lp + pad, d], data)?;
            let mut tokens = prompt_ids.to_vec();
            tokens.extend(std::iter::repeat(PAD).take(pad * patch));
            Ok(PromptLayout {
                history,
                known: None,
                tokens,
                pad_rows: pad,
            })
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockTrace {
    pub block_index: usize,
    pub latents: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GenOutput {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub blocks: Vec<BlockTrace>,
}

/// Full pipeline: encode the prompt, generate latent blocks until the end
/// symbol or `max_blocks`, decode greedily (or by temperature sampling).
pub fn generate_text(
    vae: &TextVae,
    prior: &FlowPrior,
    tokenizer: &Tokenizer,
    prompt: &str,
    config: &GenerationConfig,
    schedule: &Schedule,
) -> Result<GenOutput> {
    config.validate()?;
    let (prompt_ids, _unk) = tokenizer.encode(prompt);
    if prompt_ids.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    let mut rng = rng_from_seed(config.seed);
    let layout = layout_prompt(vae, prior, &prompt_ids, &config.strategy)?;
    let d = vae.cfg.d_latent;
    let b = prior.cfg.block_tokens;
    let patch = vae.cfg.patch;

    // Latent canvas (history plus the known tail) and the synchronized
    // token stream.
    let mut canvas = layout.history.data().to_vec();
    if let Some(k) = &layout.known {
        canvas.extend_from_slice(k.latents.data());
    }
    let mut tokens = layout.tokens.clone();
    let prompt_token_len = tokens.len();
    let mut blocks = Vec::new();
    let mut known = layout.known.clone();
    let mut ended = false;

    for block_idx in 0..config.max_blocks {
        if ended {
            break;
        }
        // The known rows sit inside the block, so the solver state covers
        // them; strip them from the history side.
        let block_start = canvas.len() / d - known.as_ref().map_or(0, |k| k.len);
        let hist_rows = block_start;
        let history = Tensor::new(&[hist_rows, d], canvas[..hist_rows * d].to_vec())?;
        let result = generate_block(
            prior,
            &history,
            hist_rows,
            b,
            known.as_ref(),
            config,
            schedule,
            &mut rng,
        )?;

        // Replace any known rows already on the canvas with the block's
        // final state, then append the new rows.
        canvas.truncate(hist_rows * d);
        canvas.extend_from_slice(result.latents.data());
        blocks.push(BlockTrace {
            block_index: block_idx,
            latents: result.latents.data().to_vec(),
        });
        known = None;

        // Decode the token positions covered by the canvas so far.
        let canvas_rows = canvas.len() / d;
        let total_tokens = canvas_rows * patch;
        while tokens.len() < total_tokens {
            let i = tokens.len();
            let mut teacher = tokens.clone();
            teacher.push(0); // placeholder; never enters the decoder input
            let zi = Tensor::new(
                &[(i + 1).div_ceil(patch), d],
                canvas[..(i + 1).div_ceil(patch) * d].to_vec(),
            )?;
            let logits = vae.decode_logits(&zi, &teacher)?;
            let row = logits.row(i);
            let next = match config.temperature {
                None => argmax(row),
                Some(temp) => sample_temperature(row, temp, &mut rng),
            };
            tokens.push(next);
            if next == END {
                ended = true;
                break;
            }
        }
    }

    let response: Vec<usize> = tokens[prompt_token_len..]
        .iter()
        .copied()
        .take_while(|&t| t != END)
        .collect();
    Ok(GenOutput {
        text: tokenizer.decode(&response),
        token_ids: response,
        blocks,
    })
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn sample_temperature(row: &[f64], temp: f64, rng: &mut Rng) -> usize {
    use rand::Rng as _;
    let scaled: Vec<f64> = row.iter().map(|l| l / temp.max(1e-6)).collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = scaled.iter().map(|l| (l - mx).exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}
