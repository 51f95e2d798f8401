use crate::config::RunConfig;
use anyhow::{bail, Context, Result};
use latentlm::calib::{
    mi_calibration_objective, mismatch_demo as run_demo, scan_optimal_shift, Gaussian,
    GaussianMixture, MixtureDemo, SharedFactorWorld,
};
use latentlm::flowprior::FlowPrior;
use latentlm::inference::{generate_text, GenerationConfig};
use latentlm::likelihood::{estimate_logp, EstimatorMode, LatentLmScorer};
use latentlm::schedule::{logitnormal_pdf, Schedule};
use latentlm::textvae::{synth, TextVae, Tokenizer};
use latentlm::train::{prepare_dataset, train_stage1, train_stage2};
use latentlm::calib::nalgebra::DVector;
use latentlm::{diffcore::checkpoint, rng_from_seed};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub fn train(config_path: &Path, stage: u8, from_scratch: bool, steps: Option<usize>) -> Result<ExitCode> {
    let cfg = RunConfig::load(config_path)?;
    let resolved = cfg.echo_resolved()?;
    println!("resolved config: {}", resolved.display());

    let corpus = std::fs::read_to_string(&cfg.paths.corpus)?;
    let tokenizer = load_or_build_tokenizer(&cfg, &corpus)?;
    let vocab_path = cfg.paths.out_dir.join("vocab.txt");
    std::fs::write(&vocab_path, tokenizer.to_vocab_file())?;
    let (train_lines, _held) = synth::split_corpus(&corpus, 8);
    let data = prepare_dataset(
        &tokenizer,
        &train_lines.join("\n"),
        cfg.vae.max_len,
    );
    println!("dataset: {} items, vocab {}", data.len(), tokenizer.vocab_size());

    match stage {
        1 => {
            let mut vae = TextVae::init(cfg.vae.to_config(tokenizer.vocab_size()), cfg.run.seed)?;
            let n = steps.unwrap_or(cfg.run.stage1_steps);
            let csv_path = cfg.paths.out_dir.join("stage1_metrics.csv");
            let mut csv = std::fs::File::create(&csv_path)?;
            writeln!(csv, "step,lr,recon,kl,mask,total,grad_norm")?;
            let log_every = cfg.run.log_every.max(1);
            train_stage1(&mut vae, &data, &cfg.optim, n, cfg.run.seed, |r| {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    r.step, r.lr, r.recon, r.kl, r.mask, r.total, r.grad_norm
                );
                if r.step % log_every == 0 {
                    println!(
                        "step {:>6}  total {:.4}  recon {:.4}  kl {:.4}  mask {:.4}",
                        r.step, r.total, r.recon, r.kl, r.mask
                    );
                }
            })?;
            let ckpt = cfg.ckpt_path(&cfg.paths.stage1_checkpoint);
            checkpoint::save(&vae.params, &ckpt)?;
            println!("stage-1 checkpoint: {}", ckpt.display());
        }
        2 => {
            let vae_cfg = cfg.vae.to_config(tokenizer.vocab_size());
            let mut vae = if from_scratch {
                TextVae::init(vae_cfg, cfg.run.seed)?
            } else {
                let ckpt = cfg.ckpt_path(&cfg.paths.stage1_checkpoint);
                if !ckpt.exists() {
                    bail!(
                        "stage-2 training wants the stage-1 checkpoint at {} \
                         (run `latentlm train --stage 1` first, or pass --from-scratch)",
                        ckpt.display()
                    );
                }
                TextVae {
                    cfg: vae_cfg,
                    params: checkpoint::load(&ckpt)?,
                }
            };
            let mut prior = FlowPrior::init(cfg.prior.clone(), cfg.run.seed.wrapping_add(1))?;
            let n = steps.unwrap_or(cfg.run.stage2_steps);
            let csv_path = cfg.paths.out_dir.join("stage2_metrics.csv");
            let mut csv = std::fs::File::create(&csv_path)?;
            writeln!(csv, "step,lr,recon,entropy,mask,fm,ref_kl,total")?;
            let log_every = cfg.run.log_every.max(1);
            train_stage2(
                &mut vae,
                &mut prior,
                &cfg.stage2,
                &cfg.schedule,
                &data,
                &cfg.optim,
                n,
                cfg.run.seed,
                |r| {
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{},{},{},{}",
                        r.step, r.lr, r.recon, r.entropy_term, r.mask, r.fm, r.ref_kl, r.total
                    );
                    if r.step % log_every == 0 {
                        println!(
                            "step {:>6}  total {:.4}  fm {:.4}  ref-kl {:.4}",
                            r.step, r.total, r.fm, r.ref_kl
                        );
                    }
                },
            )?;
            checkpoint::save(&vae.params, &cfg.ckpt_path(&cfg.paths.stage2_vae_checkpoint))?;
            checkpoint::save(
                &prior.params,
                &cfg.ckpt_path(&cfg.paths.stage2_prior_checkpoint),
            )?;
            println!("stage-2 checkpoints in {}", cfg.paths.out_dir.display());
        }
        other => bail!("unknown stage {other}; expected 1 or 2"),
    }
    Ok(ExitCode::SUCCESS)
}

fn load_or_build_tokenizer(cfg: &RunConfig, corpus: &str) -> Result<Tokenizer> {
    match &cfg.paths.vocab {
        Some(path) => {
            let contents = std::fs::read_to_string(path)?;
            Ok(Tokenizer::from_vocab_file(&contents)?)
        }
        None => Ok(Tokenizer::from_corpus(corpus)),
    }
}

fn load_models(cfg: &RunConfig) -> Result<(TextVae, FlowPrior, Tokenizer)> {
    let corpus = std::fs::read_to_string(&cfg.paths.corpus)?;
    let tokenizer = load_or_build_tokenizer(cfg, &corpus)?;
    let vae_ckpt = cfg.ckpt_path(&cfg.paths.stage2_vae_checkpoint);
    let prior_ckpt = cfg.ckpt_path(&cfg.paths.stage2_prior_checkpoint);
    for p in [&vae_ckpt, &prior_ckpt] {
        if !p.exists() {
            bail!(
                "missing checkpoint {} (run `latentlm train --stage 2` first)",
                p.display()
            );
        }
    }
    let vae = TextVae {
        cfg: cfg.vae.to_config(tokenizer.vocab_size()),
        params: checkpoint::load(&vae_ckpt)?,
    };
    let prior = FlowPrior {
        cfg: cfg.prior.clone(),
        params: checkpoint::load(&prior_ckpt)?,
    };
    Ok((vae, prior, tokenizer))
}

pub struct SampleArgs {
    pub prompt: Option<String>,
    pub prompt_file: Option<PathBuf>,
    pub steps: Option<usize>,
    pub cfg: Option<f64>,
    pub strategy: Option<String>,
    pub seed: Option<u64>,
    pub max_blocks: Option<usize>,
    pub trace: bool,
}

pub fn sample(config_path: &Path, args: SampleArgs) -> Result<ExitCode> {
    let cfg = RunConfig::load(config_path)?;
    cfg.echo_resolved()?;
    let (vae, prior, tokenizer) = load_models(&cfg)?;

    let prompts: Vec<String> = match (&args.prompt, &args.prompt_file) {
        (Some(p), None) => vec![p.clone()],
        (None, Some(f)) => std::fs::read_to_string(f)?
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        _ => bail!("pass exactly one of --prompt or --prompt-file"),
    };

    let mut gen = GenerationConfig {
        steps: args.steps.unwrap_or(cfg.generation.steps),
        cfg_scale: args.cfg.unwrap_or(cfg.generation.cfg_scale),
        max_blocks: args.max_blocks.unwrap_or(cfg.generation.max_blocks),
        seed: args.seed.unwrap_or(cfg.generation.seed),
        ..cfg.generation.clone()
    };
    if let Some(s) = &args.strategy {
        gen.strategy = s.parse()?;
    }

    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let mut text_out = String::new();
    let mut traces = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let out = generate_text(&vae, &prior, &tokenizer, prompt, &gen, &cfg.schedule)?;
        println!("[{i}] {prompt} => {}", out.text);
        let _ = writeln!(text_out, "{}", out.text);
        if args.trace {
            traces.push(out);
        }
    }
    std::fs::write(cfg.paths.out_dir.join("samples.txt"), &text_out)?;
    if args.trace {
        let json = serde_json::to_string_pretty(&traces)?;
        std::fs::write(cfg.paths.out_dir.join("sample_trace.json"), json)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn score(config_path: &Path, k: usize, items: usize) -> Result<ExitCode> {
    let cfg = RunConfig::load(config_path)?;
    cfg.echo_resolved()?;
    let (vae, prior, tokenizer) = load_models(&cfg)?;
    let corpus = std::fs::read_to_string(&cfg.paths.corpus)?;
    let (_train, held) = synth::split_corpus(&corpus, 8);
    let dataset: Vec<Vec<usize>> = prepare_dataset(&tokenizer, &held.join("\n"), cfg.vae.max_len)
        .into_iter()
        .take(items)
        .collect();
    if dataset.is_empty() {
        bail!("no held-out items to score");
    }

    let scorer = LatentLmScorer::new(&vae, &prior);
    let mut records = Vec::new();
    let mut total_iwae = 0.0;
    let mut total_elbo = 0.0;
    let mut tokens = 0usize;
    for (i, x) in dataset.iter().enumerate() {
        let seed = cfg.run.seed.wrapping_add(i as u64);
        // Shared samples: the two modes reduce the same weights.
        let elbo = estimate_logp(&scorer, x, k, EstimatorMode::Elbo, seed)?;
        let iwae = estimate_logp(&scorer, x, k, EstimatorMode::Iwae, seed)?;
        let mean = |f: fn(&latentlm::likelihood::WeightSample) -> f64| {
            elbo.samples.iter().map(f).sum::<f64>() / elbo.samples.len() as f64
        };
        total_elbo += elbo.value;
        total_iwae += iwae.value;
        tokens += x.len();
        records.push(serde_json::json!({
            "item": i,
            "tokens": x.len(),
            "elbo": elbo.value,
            "iwae": iwae.value,
            "components": {
                "log_decoder": mean(|s| s.log_decoder),
                "log_prior": mean(|s| s.log_prior),
                "log_posterior": mean(|s| s.log_posterior),
            },
            "ppl_elbo": (-elbo.value / x.len() as f64).exp(),
            "ppl_iwae": (-iwae.value / x.len() as f64).exp(),
        }));
    }
    let summary = serde_json::json!({
        "k": k,
        "items": dataset.len(),
        "tokens": tokens,
        "ppl_elbo": (-total_elbo / tokens as f64).exp(),
        "ppl_iwae": (-total_iwae / tokens as f64).exp(),
    });

    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let json = serde_json::json!({ "summary": summary, "items": records });
    std::fs::write(
        cfg.paths.out_dir.join("score.json"),
        serde_json::to_string_pretty(&json)?,
    )?;
    let mut csv = String::from("item,tokens,elbo,iwae,ppl_elbo,ppl_iwae\n");
    for r in &records {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r["item"], r["tokens"], r["elbo"], r["iwae"], r["ppl_elbo"], r["ppl_iwae"]
        );
    }
    std::fs::write(cfg.paths.out_dir.join("score_summary.csv"), csv)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
pub fn calibrate_shift(
    dims: &str,
    delta_min: f64,
    delta_max: f64,
    grid: usize,
    target_mi: f64,
    lambda_star: f64,
    out_dir: &Path,
) -> Result<ExitCode> {
    let dims: Vec<usize> = dims
        .split(',')
        .map(|d| d.trim().parse().context("parsing --dims"))
        .collect::<Result<_>>()?;
    if grid < 2 {
        bail!("--grid wants at least 2 points");
    }
    let deltas: Vec<f64> = (0..grid)
        .map(|i| delta_min + (delta_max - delta_min) * i as f64 / (grid - 1) as f64)
        .collect();

    // Shared-factor worlds with identical-row observation maps.
    let worlds: Vec<(usize, SharedFactorWorld)> = dims
        .iter()
        .map(|&d| (d, SharedFactorWorld::identical_rows(d, 1, 1.0, 1.0, 0.25)))
        .collect();
    let objective = mi_calibration_objective(worlds, lambda_star, target_mi);
    let scan = scan_optimal_shift(&objective, &dims, &deltas)?;

    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("d,delta,objective\n");
    for (d, row) in &scan.table {
        for (delta, j) in row {
            let _ = writeln!(csv, "{d},{delta},{j}");
        }
    }
    std::fs::write(out_dir.join("shift_scan.csv"), csv)?;
    let json = serde_json::to_string_pretty(&scan)?;
    std::fs::write(out_dir.join("shift_scan.json"), json)?;

    for p in &scan.points {
        println!("d = {:>4}  δ* = {:+.3}", p.dim, p.delta_star);
    }
    if let Some(fit) = &scan.log_fit {
        println!(
            "log-law fit: δ*(d) = {:.4} ln d + {:.4}  (R² = {:.4})",
            fit.a, fit.b, fit.r_squared
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn mismatch_demo(samples: usize, seed: u64, out_dir: &Path) -> Result<ExitCode> {
    let mode = |x: f64| Gaussian::isotropic(DVector::from_column_slice(&[x, 0.0]), 0.25);
    let demo = MixtureDemo {
        prior: GaussianMixture::new(vec![0.5, 0.5], vec![mode(0.0)?, mode(6.0)?])?,
        posterior: Gaussian::isotropic(DVector::from_column_slice(&[0.0, 0.0]), 1e-5)?,
        m_star: 0,
        good_radius: 2.0,
        decoder_bound: -1.0,
        tube_mass: 0.99,
    };
    let mut rng = rng_from_seed(seed);
    let report = run_demo(&demo, samples, &mut rng)?;

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("mismatch_demo.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "coverage {:.3}  Δ {:.2} nats  score {:.2} ≤ bound {:.2}  KL {:.2}",
        report.coverage,
        report.delta,
        report.measured.score,
        report.score_bound,
        report.kl_to_mode.total
    );
    Ok(ExitCode::SUCCESS)
}

pub fn schedule_plot(mu: f64, sigma: f64, t_max: f64, points: usize, out: &Path) -> Result<ExitCode> {
    let sched = Schedule::new(mu, sigma, t_max)?;
    let mut csv = String::from("t,pdf,lambda,alpha,sigma\n");
    for i in 0..points {
        let s = (i as f64 + 0.5) / points as f64;
        let t = s * t_max;
        let pdf = if sigma > 0.0 {
            logitnormal_pdf(s, mu, sigma)? / t_max
        } else {
            f64::NAN
        };
        let lambda = sched.logsnr(s);
        let (alpha, sig) = sched.coeffs(s);
        let _ = writeln!(csv, "{t},{pdf},{lambda},{alpha},{sig}");
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, csv)?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn vae_diagnose(config_path: &Path, stage: u8, items: usize) -> Result<ExitCode> {
    let cfg = RunConfig::load(config_path)?;
    cfg.echo_resolved()?;
    let corpus = std::fs::read_to_string(&cfg.paths.corpus)?;
    let tokenizer = load_or_build_tokenizer(&cfg, &corpus)?;
    let ckpt_name = match stage {
        1 => &cfg.paths.stage1_checkpoint,
        2 => &cfg.paths.stage2_vae_checkpoint,
        other => bail!("unknown stage {other}"),
    };
    let ckpt = cfg.ckpt_path(ckpt_name);
    if !ckpt.exists() {
        bail!("missing checkpoint {}", ckpt.display());
    }
    let vae = TextVae {
        cfg: cfg.vae.to_config(tokenizer.vocab_size()),
        params: checkpoint::load(&ckpt)?,
    };

    let (_train, held) = synth::split_corpus(&corpus, 8);
    let dataset: Vec<Vec<usize>> = prepare_dataset(&tokenizer, &held.join("\n"), cfg.vae.max_len)
        .into_iter()
        .take(items)
        .collect();
    if dataset.is_empty() {
        bail!("no held-out items to diagnose");
    }

    let logsnr = vae.measure_vae_logsnr(&dataset)?;
    let mut rng = rng_from_seed(cfg.run.seed);
    let mut curve = Vec::new();
    for s in [0.0, 0.25, 0.5, 1.0] {
        let mut acc = 0.0;
        for ids in &dataset {
            acc += vae.recon_under_noise(ids, s, &cfg.schedule, &mut rng)?;
        }
        curve.push((s, acc / dataset.len() as f64));
    }

    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let mut csv = String::from("s,accuracy\n");
    for (s, a) in &curve {
        let _ = writeln!(csv, "{s},{a}");
    }
    std::fs::write(cfg.paths.out_dir.join("vae_noise_curve.csv"), csv)?;
    let json = serde_json::json!({
        "vae_logsnr": logsnr,
        "noise_curve": curve,
        "items": dataset.len(),
    });
    std::fs::write(
        cfg.paths.out_dir.join("vae_diagnose.json"),
        serde_json::to_string_pretty(&json)?,
    )?;
    println!("posterior logSNR: {logsnr:.4}");
    for (s, a) in &curve {
        println!("  noise s = {s:.2}: accuracy {a:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn verify() -> Result<ExitCode> {
    let results = latentlm::verify::run_all();
    let mut all_ok = true;
    for r in &results {
        println!(
            "[{}] {:<36} {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        all_ok &= r.pass;
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
