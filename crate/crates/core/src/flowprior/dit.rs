//! Block-causal velocity-field network over latent sequences.
//!
//! One forward pass carries two streams: a clean stream of history latents
//! (keys only, stop-gradient) and a noisy stream holding every block's
//! noised latents. Visibility is bidirectional within a block and strictly
//! causal across blocks; timestep conditioning enters through adaptive
//! scale/shift on the normalization layers.

use crate::diffcore::{Bindings, Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::nn::{mask_bias, sinusoidal_features, BlockCtx, Modulation};
use crate::rng_from_seed;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorConfig {
    pub d_latent: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Latents per block.
    pub block_tokens: usize,
    /// Probability of dropping history conditioning per sequence during
    /// training (the unconditional branch for guidance).
    pub cfg_drop: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            d_latent: 16,
            d_model: 128,
            layers: 4,
            heads: 4,
            block_tokens: 16,
            cfg_drop: 0.1,
        }
    }
}

/// Which role a block plays when scoring/generating block `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockVisibility {
    /// Clean values, visible, stop-gradient.
    History,
    /// The noisy block being predicted.
    Current,
    /// Invisible.
    Hidden,
}

/// Visibility rules for generating block `b` (1-based) of `num_blocks`.
#[derive(Clone, Debug)]
pub struct VisibleSet {
    pub roles: Vec<BlockVisibility>,
}

impl VisibleSet {
    pub fn role(&self, block: usize) -> BlockVisibility {
        self.roles[block]
    }

    /// Block-causal attention rule: key block visible from query block.
    pub fn attends(query_block: usize, key_block: usize) -> bool {
        key_block <= query_block
    }

    pub fn stop_gradient(&self, block: usize) -> bool {
        self.roles[block] == BlockVisibility::History
    }
}

/// History blocks `< b` are clean with stop-gradient, block `b` is the
/// noisy current block, blocks `> b` are hidden. `b` is 1-based.
pub fn build_visible_set(num_blocks: usize, b: usize) -> Result<VisibleSet> {
    if b == 0 || b > num_blocks {
        return Err(Error::invalid(format!(
            "block index {b} out of range 1..={num_blocks}"
        )));
    }
    let roles = (1..=num_blocks)
        .map(|k| {
            if k < b {
                BlockVisibility::History
            } else if k == b {
                BlockVisibility::Current
            } else {
                BlockVisibility::Hidden
            }
        })
        .collect();
    Ok(VisibleSet { roles })
}

fn rope_tables_at(positions: &[usize], dim: usize) -> (Tensor, Tensor) {
    let half = dim / 2;
    let n = positions.len();
    let mut cos = vec![0.0; n * half];
    let mut sin = vec![0.0; n * half];
    for (row, &pos) in positions.iter().enumerate() {
        for j in 0..half {
            let freq = 10_000f64.powf(-2.0 * j as f64 / dim as f64);
            let angle = pos as f64 * freq;
            cos[row * half + j] = angle.cos();
            sin[row * half + j] = angle.sin();
        }
    }
    (
        Tensor::new(&[n, half], cos).expect("rope shape"),
        Tensor::new(&[n, half], sin).expect("rope shape"),
    )
}

/// Inputs to one velocity pass, after stream assembly.
pub struct StreamSpec<'a> {
    /// Clean-stream latents `[Lc, d]` (may be empty).
    pub clean: NodeId,
    pub clean_positions: &'a [usize],
    pub clean_blocks: &'a [usize],
    /// Noisy-stream latents `[Ln, d]`.
    pub noisy: NodeId,
    pub noisy_positions: &'a [usize],
    pub noisy_blocks: &'a [usize],
    /// Per noisy row timestep (identical within a block).
    pub noisy_t: &'a [f64],
    /// Unconditional pass: hide the clean stream entirely.
    pub drop_history: bool,
}

pub struct FlowPrior {
    pub cfg: PriorConfig,
    pub params: ParamSet,
}

impl FlowPrior {
    pub fn init(cfg: PriorConfig, seed: u64) -> Result<Self> {
        if cfg.d_model % cfg.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by heads {}",
                cfg.d_model, cfg.heads
            )));
        }
        let mut rng = rng_from_seed(seed);
        let mut params = ParamSet::new();
        let (d, dm) = (cfg.d_latent, cfg.d_model);
        params.add_linear("dit.in_w", d, dm, &mut rng);
        params.add_zeros("dit.in_b", &[dm]);
        params.add_zeros("dit.clean_emb", &[dm]);
        params.add_zeros("dit.noisy_emb", &[dm]);
        params.add_linear("dit.t_w1", dm, dm, &mut rng);
        params.add_zeros("dit.t_b1", &[dm]);
        params.add_linear("dit.t_w2", dm, dm, &mut rng);
        params.add_zeros("dit.t_b2", &[dm]);
        for l in 0..cfg.layers {
            crate::nn::register_block(&mut params, &format!("dit.l{l}"), dm, &mut rng);
            params.add_linear(&format!("dit.l{l}.ada_w"), dm, 4 * dm, &mut rng);
            params.add_zeros(&format!("dit.l{l}.ada_b"), &[4 * dm]);
        }
        // Zero-initialized output projection: the initial field is zero.
        params.add_zeros("dit.out_w", &[dm, d]);
        params.add_zeros("dit.out_b", &[d]);
        Ok(FlowPrior { cfg, params })
    }

    pub fn num_blocks(&self, latent_len: usize) -> usize {
        latent_len.div_ceil(self.cfg.block_tokens)
    }

    pub fn block_of(&self, row: usize) -> usize {
        row / self.cfg.block_tokens
    }

    /// Velocity field values for the noisy stream, `[Ln, d]`.
    pub fn velocity_graph(
        &self,
        g: &mut Graph,
        binds: &Bindings,
        spec: &StreamSpec,
    ) -> Result<NodeId> {
        let cfg = &self.cfg;
        let lc = g.value(spec.clean).rows();
        let ln = g.value(spec.noisy).rows();
        if g.value(spec.noisy).cols() != cfg.d_latent {
            return Err(Error::ShapeMismatch {
                op: "velocity_graph",
                left: g.value(spec.noisy).shape().to_vec(),
                right: vec![ln, cfg.d_latent],
            });
        }
        if spec.noisy_t.len() != ln || spec.noisy_blocks.len() != ln {
            return Err(Error::invalid(
                "noisy stream metadata length mismatch".to_string(),
            ));
        }
        let has_clean = lc > 0 && !spec.drop_history;

        let mut ctx = BlockCtx::new(g, binds, &self.params);

        // Stream assembly: clean rows first, then noisy rows.
        let x = if has_clean {
            ctx.graph.concat_rows(spec.clean, spec.noisy)?
        } else {
            spec.noisy
        };
        let h = ctx.linear_bias(x, "dit.in_w", "dit.in_b")?;
        let n_rows = if has_clean { lc + ln } else { ln };

        // Stream-type embedding.
        let stream_flags: Vec<f64> = (0..n_rows)
            .flat_map(|r| {
                let is_clean = has_clean && r < lc;
                std::iter::repeat(if is_clean { 1.0 } else { 0.0 }).take(cfg.d_model)
            })
            .collect();
        let flags = ctx
            .graph
            .leaf(Tensor::new(&[n_rows, cfg.d_model], stream_flags)?);
        let inv_flags = {
            let neg = ctx.graph.mul_scalar(flags, -1.0);
            ctx.graph.add_scalar(neg, 1.0)
        };
        let ones = ctx.graph.leaf(Tensor::full(&[n_rows, cfg.d_model], 1.0));
        let clean_emb = ctx.p("dit.clean_emb");
        let noisy_emb = ctx.p("dit.noisy_emb");
        let ce = ctx.graph.mul_row(ones, clean_emb)?;
        let ne = ctx.graph.mul_row(ones, noisy_emb)?;
        let ce_masked = ctx.graph.mul(ce, flags)?;
        let ne_masked = ctx.graph.mul(ne, inv_flags)?;
        let h = ctx.graph.add(h, ce_masked)?;
        let mut h = ctx.graph.add(h, ne_masked)?;

        // Per-row timestep embedding (clean rows sit at t = 0). Time is
        // scaled up so the sinusoid bank resolves the unit interval.
        let mut ts: Vec<f64> = Vec::with_capacity(n_rows);
        if has_clean {
            ts.extend(std::iter::repeat(0.0).take(lc));
        }
        ts.extend(spec.noisy_t.iter().map(|t| t * 100.0));
        let t_feat = ctx.graph.leaf(sinusoidal_features(&ts, cfg.d_model));
        let t_h = ctx.linear_bias(t_feat, "dit.t_w1", "dit.t_b1")?;
        let t_gate = ctx.graph.sigmoid(t_h);
        let t_silu = ctx.graph.mul(t_h, t_gate)?;
        let temb = ctx.linear_bias(t_silu, "dit.t_w2", "dit.t_b2")?;

        // Positions and visibility.
        let mut positions: Vec<usize> = Vec::with_capacity(n_rows);
        let mut blocks: Vec<usize> = Vec::with_capacity(n_rows);
        let mut is_noisy: Vec<bool> = Vec::with_capacity(n_rows);
        if has_clean {
            positions.extend_from_slice(spec.clean_positions);
            blocks.extend_from_slice(spec.clean_blocks);
            is_noisy.extend(std::iter::repeat(false).take(lc));
        }
        positions.extend_from_slice(spec.noisy_positions);
        blocks.extend_from_slice(spec.noisy_blocks);
        is_noisy.extend(std::iter::repeat(true).take(ln));

        let allow = |q: usize, k: usize| -> bool {
            match (is_noisy[q], is_noisy[k]) {
                // Noisy queries: bidirectional within the block, clean
                // history from strictly earlier blocks.
                (true, true) => blocks[k] == blocks[q],
                (true, false) => blocks[k] < blocks[q],
                // Clean rows are keys; as queries they look causally at
                // the clean stream only (their outputs are discarded).
                (false, false) => positions[k] <= positions[q],
                (false, true) => false,
            }
        };
        let mask = mask_bias(&allow, n_rows);
        let (cos, sin) = rope_tables_at(&positions, cfg.d_model / cfg.heads);

        for l in 0..cfg.layers {
            let m = ctx.linear_bias(temb, &format!("dit.l{l}.ada_w"), &format!("dit.l{l}.ada_b"))?;
            let modulation = Modulation {
                scale1: ctx.graph.slice_cols(m, 0, cfg.d_model)?,
                shift1: ctx.graph.slice_cols(m, cfg.d_model, cfg.d_model)?,
                scale2: ctx.graph.slice_cols(m, 2 * cfg.d_model, cfg.d_model)?,
                shift2: ctx.graph.slice_cols(m, 3 * cfg.d_model, cfg.d_model)?,
            };
            h = ctx.transformer_block(
                h,
                &format!("dit.l{l}"),
                cfg.heads,
                &mask,
                Some((&cos, &sin)),
                Some(modulation),
            )?;
        }

        // Plain output head: the residual stream's magnitude reaches the
        // field directly instead of being renormalized away.
        let out = ctx.linear_bias(h, "dit.out_w", "dit.out_b")?;
        if has_clean {
            g.slice_rows(out, lc, ln)
        } else {
            Ok(out)
        }
    }

    /// Frozen-parameter field evaluation for one block at inference time.
    ///
    /// `history` holds the clean latents of all complete blocks before the
    /// current one; `block_start` is the absolute row of the block's first
    /// position. The unconditional pass (`conditional = false`) hides the
    /// history entirely.
    pub fn predict_velocity(
        &self,
        block_state: &Tensor,
        t: f64,
        history: &Tensor,
        block_start: usize,
        conditional: bool,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let binds = Bindings::bind_frozen(&mut g, &self.params);
        let clean = g.leaf(history.clone());
        let noisy = g.leaf(block_state.clone());
        let lc = history.rows();
        let nb = block_state.rows();
        let current_block = self.block_of(block_start);
        let clean_positions: Vec<usize> = (0..lc).collect();
        let clean_blocks: Vec<usize> = (0..lc).map(|r| self.block_of(r)).collect();
        let noisy_positions: Vec<usize> = (block_start..block_start + nb).collect();
        let noisy_blocks = vec![current_block; nb];
        let noisy_t = vec![t; nb];
        let spec = StreamSpec {
            clean,
            clean_positions: &clean_positions,
            clean_blocks: &clean_blocks,
            noisy,
            noisy_positions: &noisy_positions,
            noisy_blocks: &noisy_blocks,
            noisy_t: &noisy_t,
            drop_history: !conditional,
        };
        let out = self.velocity_graph(&mut g, &binds, &spec)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn tiny_prior() -> FlowPrior {
        FlowPrior::init(
            PriorConfig {
                d_latent: 3,
                d_model: 16,
                layers: 2,
                heads: 2,
                block_tokens: 2,
                cfg_drop: 0.1,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn visible_set_matches_definition() {
        // b = 1 of 1: only the current block, nothing hidden or historical.
        let v = build_visible_set(1, 1).unwrap();
        assert_eq!(v.roles, vec![BlockVisibility::Current]);

        // B = 3, b = 2: (2→1) and (2→2) allowed, (2→3) and (1→2) not.
        let v = build_visible_set(3, 2).unwrap();
        assert_eq!(v.role(0), BlockVisibility::History);
        assert_eq!(v.role(1), BlockVisibility::Current);
        assert_eq!(v.role(2), BlockVisibility::Hidden);
        assert!(VisibleSet::attends(1, 0));
        assert!(VisibleSet::attends(1, 1));
        assert!(!VisibleSet::attends(1, 2));
        assert!(!VisibleSet::attends(0, 1));
        assert!(v.stop_gradient(0));
        assert!(!v.stop_gradient(1));

        assert!(build_visible_set(3, 0).is_err());
        assert!(build_visible_set(3, 4).is_err());
    }

    #[test]
    fn zero_initialized_projection_gives_zero_field() {
        let prior = tiny_prior();
        let mut rng = rng_from_seed(1);
        let state = Tensor::randn(&[2, 3], &mut rng);
        let history = Tensor::randn(&[2, 3], &mut rng);
        let v = prior.predict_velocity(&state, 0.7, &history, 2, true).unwrap();
        assert_eq!(v.shape(), &[2, 3]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_shape_for_any_valid_block() {
        let mut prior = tiny_prior();
        // Break the zero init so outputs are non-trivial.
        let mut rng = rng_from_seed(2);
        let idx = prior.params.lookup("dit.out_w").unwrap();
        prior.params.get_mut(idx).value = Tensor::randn(&[16, 3], &mut rng).scale(0.1);

        for nb in [1usize, 2] {
            let state = Tensor::randn(&[nb, 3], &mut rng);
            let v = prior
                .predict_velocity(&state, 0.3, &Tensor::zeros(&[0, 3]), 0, true)
                .unwrap();
            assert_eq!(v.shape(), &[nb, 3]);
        }
    }

    #[test]
    fn invisible_blocks_do_not_change_output() {
        let mut prior = tiny_prior();
        let mut rng = rng_from_seed(3);
        let idx = prior.params.lookup("dit.out_w").unwrap();
        prior.params.get_mut(idx).value = Tensor::randn(&[16, 3], &mut rng).scale(0.1);

        let state = Tensor::randn(&[2, 3], &mut rng);
        let history = Tensor::randn(&[4, 3], &mut rng);
        let base = prior.predict_velocity(&state, 0.5, &history, 4, true).unwrap();

        // The unconditional pass ignores history values entirely.
        let mut other = history.clone();
        other.set2(0, 0, 99.0);
        let uncond_a = prior.predict_velocity(&state, 0.5, &history, 4, false).unwrap();
        let uncond_b = prior.predict_velocity(&state, 0.5, &other, 4, false).unwrap();
        for (x, y) in uncond_a.data().iter().zip(uncond_b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // The conditional pass does see history.
        let cond_b = prior.predict_velocity(&state, 0.5, &other, 4, true).unwrap();
        assert_ne!(base.data(), cond_b.data());
    }

    #[test]
    fn field_is_deterministic() {
        let prior = tiny_prior();
        let mut rng = rng_from_seed(4);
        let state = Tensor::randn(&[2, 3], &mut rng);
        let history = Tensor::randn(&[2, 3], &mut rng);
        let a = prior.predict_velocity(&state, 0.2, &history, 2, true).unwrap();
        let b = prior.predict_velocity(&state, 0.2, &history, 2, true).unwrap();
        assert_eq!(a, b);
    }
}
