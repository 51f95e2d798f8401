//! Shared fixtures for the criterion benchmarks.

use latentlm::diffcore::Tensor;
use latentlm::flowprior::{FlowPrior, PriorConfig};
use latentlm::rng_from_seed;
use latentlm::textvae::{TextVae, VaeConfig};

pub fn bench_vae() -> TextVae {
    TextVae::init(
        VaeConfig {
            vocab_size: 32,
            d_latent: 16,
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            max_len: 128,
            ..VaeConfig::default()
        },
        7,
    )
    .expect("vae init")
}

pub fn bench_prior() -> FlowPrior {
    let mut prior = FlowPrior::init(
        PriorConfig {
            d_latent: 16,
            d_model: 64,
            layers: 2,
            heads: 4,
            block_tokens: 8,
            cfg_drop: 0.1,
        },
        8,
    )
    .expect("prior init");
    // Non-zero output head so the field does real work.
    let idx = prior.params.lookup("dit.out_w").unwrap();
    let mut rng = rng_from_seed(9);
    prior.params.get_mut(idx).value = Tensor::randn(&[64, 16], &mut rng).scale(0.05);
    prior
}

pub fn bench_tokens(len: usize) -> Vec<usize> {
    (0..len).map(|i| 5 + (i % 27)).collect()
}
