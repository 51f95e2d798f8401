//! Run configuration: one human-readable TOML document with flat sections.
//! Loading validates referenced paths; the fully resolved form (every
//! default made explicit) is echoed into the output directory.

use anyhow::{bail, Context, Result};
use latentlm::flowprior::{PriorConfig, Stage2Weights};
use latentlm::inference::GenerationConfig;
use latentlm::schedule::Schedule;
use latentlm::textvae::VaeConfig;
use latentlm::train::OptimConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Paths {
    pub corpus: PathBuf,
    /// Derived from the corpus and written next to the checkpoints when
    /// absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default = "default_stage1_ckpt")]
    pub stage1_checkpoint: String,
    #[serde(default = "default_stage2_vae_ckpt")]
    pub stage2_vae_checkpoint: String,
    #[serde(default = "default_stage2_prior_ckpt")]
    pub stage2_prior_checkpoint: String,
}

fn default_stage1_ckpt() -> String {
    "stage1.ckpt".into()
}
fn default_stage2_vae_ckpt() -> String {
    "stage2_vae.ckpt".into()
}
fn default_stage2_prior_ckpt() -> String {
    "stage2_prior.ckpt".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    10
}

/// `[vae]` section: the model dimensions without the derived vocabulary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VaeSection {
    pub d_latent: usize,
    pub patch: usize,
    pub beta: f64,
    pub lambda_mask: f64,
    pub mask_rate: f64,
    #[serde(default = "default_logsnr_mode")]
    pub logsnr_mode: latentlm::textvae::LogSnrMode,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

fn default_logsnr_mode() -> latentlm::textvae::LogSnrMode {
    latentlm::textvae::LogSnrMode::Learnable
}

impl VaeSection {
    pub fn to_config(&self, vocab_size: usize) -> VaeConfig {
        VaeConfig {
            vocab_size,
            d_latent: self.d_latent,
            patch: self.patch,
            beta: self.beta,
            lambda_mask: self.lambda_mask,
            mask_rate: self.mask_rate,
            logsnr_mode: self.logsnr_mode,
            d_model: self.d_model,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub paths: Paths,
    pub run: RunSection,
    pub vae: VaeSection,
    pub prior: PriorConfig,
    pub schedule: Schedule,
    pub stage2: Stage2Weights,
    pub optim: OptimConfig,
    pub generation: GenerationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&raw).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !self.paths.corpus.exists() {
            bail!("corpus path {} does not exist", self.paths.corpus.display());
        }
        if let Some(vocab) = &self.paths.vocab {
            if !vocab.exists() {
                bail!("vocab path {} does not exist", vocab.display());
            }
        }
        if self.prior.d_latent != self.vae.d_latent {
            bail!(
                "prior.d_latent {} must match vae.d_latent {}",
                self.prior.d_latent,
                self.vae.d_latent
            );
        }
        Ok(())
    }

    pub fn ckpt_path(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    /// Echo the fully resolved configuration into the output directory so a
    /// run is reproducible from that file alone.
    pub fn echo_resolved(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.paths.out_dir)?;
        let path = self.paths.out_dir.join("config.resolved.toml");
        let body = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(&path, body)?;
        Ok(path)
    }
}
