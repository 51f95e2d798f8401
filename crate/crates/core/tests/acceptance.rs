//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers. Exact mathematical reproductions and oracle
//! equivalence, plus structural reproductions of the training-scale
//! phenomena on a synthetic corpus.

use latentlm::calib::{
    mean_displacement_bound, mi_calibration_objective, mismatch_demo, nalgebra::DVector,
    scan_optimal_shift, separable_objective, Gaussian, GaussianMixture, MixtureDemo,
    SharedFactorWorld,
};
use latentlm::cnf::{self, divergence, DivergenceAt, LinearField, OdeConfig};
use latentlm::diffcore::{Bindings, Graph, ParamSet, Tensor};
use latentlm::flowprior::{FlowPrior, PriorConfig, Stage2Weights};
use latentlm::inference::{
    generate_block, generate_text, FirstBlockStrategy, GenerationConfig, KnownRegion,
};
use latentlm::likelihood::{estimate_cond_logp, estimate_logp, EstimatorMode, ScoreModel};
use latentlm::oracle::{
    gauss_logpdf, quadrature_marginal, AnalyticLinearFlow, NgramBaseline, ToyEmission,
    ToyLinGaussModel, ToyObs,
};
use latentlm::schedule::{
    induced_lambda_density, logitnormal_pdf, logsnr_to_coeffs, ulambda_from_alpha_sigma,
    ut_from_alpha_sigma, LogSnrCurve, Schedule,
};
use latentlm::textvae::{synth, TextVae, Tokenizer, VaeConfig};
use latentlm::train::{prepare_dataset, train_stage1, train_stage2, OptimConfig};
use latentlm::{rng_from_seed, Rng};
use std::sync::OnceLock;

// ---------------------------------------------------------------------
// Criterion 1: CNF density exactness on isotropic linear fields.
// ---------------------------------------------------------------------
#[test]
fn criterion_1_cnf_density_exactness() {
    let mut rng = rng_from_seed(101);
    let mut worst = 0.0f64;
    for &a in &[-1.0, 0.0, 0.5] {
        for &d in &[1usize, 2, 8] {
            let oracle = AnalyticLinearFlow::new(a, d);
            let mut m = Tensor::zeros(&[d, d]);
            for i in 0..d {
                m.set2(i, i, a);
            }
            let field = LinearField::new(m);
            for _ in 0..32 {
                let z0 = Tensor::randn(&[d], &mut rng).scale(0.5);
                let res = cnf::prior_logdensity(&z0, &field, OdeConfig::heun(64), 0, &mut rng)
                    .unwrap();
                assert_eq!(res.probe_count, 0, "exact divergence required");
                let err = (res.log_prior - oracle.log_prior_density(z0.data())).abs();
                worst = worst.max(err);
                assert!(err < 1e-4, "a={a} d={d}: density off by {err:.2e} nats");
            }
        }
    }
    println!("[PASS] criterion 1: CNF density exactness — worst deviation {worst:.2e} nats over 288 probe points");
}

// ---------------------------------------------------------------------
// Criterion 2: Hutchinson correctness on random linear fields (d = 16).
// ---------------------------------------------------------------------
#[test]
fn criterion_2_hutchinson_correctness() {
    let mut rng = rng_from_seed(202);
    // Random fields with a dominant diagonal so the 1% relative target is
    // well defined.
    let g = Tensor::randn(&[16, 16], &mut rng).scale(0.05);
    let mut a = g.clone();
    for i in 0..16 {
        a.set2(i, i, a.get2(i, i) + 3.0);
    }
    let field = LinearField::new(a.clone());
    let tr = field.trace();
    let mut worst_rel = 0.0f64;
    for _ in 0..16 {
        let z = Tensor::randn(&[16], &mut rng);
        let est = cnf::divergence_estimate(&field, &z, 0.0, 10_000, &mut rng).unwrap();
        let rel = (est - tr).abs() / tr.abs();
        worst_rel = worst_rel.max(rel);
        assert!(rel < 0.01, "probe estimate off by {:.3}%", 100.0 * rel);
    }

    // The probe stays fixed within one ODE solve: for a linear field the
    // integrand εᵀAε is constant, so a single-probe solve accumulates
    // exactly that quadratic form for the one ε drawn up front.
    let z0 = Tensor::randn(&[16], &mut rng);
    let mut solve_rng = rng_from_seed(777);
    let res = cnf::prior_logdensity(&z0, &field, OdeConfig::heun(32), 1, &mut solve_rng).unwrap();
    let mut replay = rng_from_seed(777);
    let eps = cnf::draw_probes(cnf::ProbeKind::Gaussian, 1, 16, &mut replay).remove(0);
    let col = eps.reshape(&[16, 1]).unwrap();
    let quad = eps.dot(&a.matmul(&col).unwrap().reshape(&[16]).unwrap()).unwrap();
    assert!(
        (res.logdet - quad).abs() < 1e-6,
        "probe redrawn inside the solve: ℓ₁ {} vs εᵀAε {quad}",
        res.logdet
    );
    println!(
        "[PASS] criterion 2: Hutchinson — worst relative error {:.3}% over 16 points, probe fixed within solve",
        100.0 * worst_rel
    );
}

// ---------------------------------------------------------------------
// Criterion 3: estimator fidelity on the d = 1 linear-Gaussian toy.
// ---------------------------------------------------------------------
struct ToyScorer {
    toy: ToyLinGaussModel,
    a: f64,
    q_var: f64,
}

impl ToyScorer {
    fn new(a: f64) -> Self {
        let w = Tensor::new(&[5, 1], vec![0.8, 0.4, 0.0, -0.4, -0.8]).unwrap();
        ToyScorer {
            toy: ToyLinGaussModel {
                d: 1,
                emission: ToyEmission::Categorical {
                    w,
                    b: Tensor::zeros(&[5]),
                },
                prior_scale: (-a).exp(),
            },
            a,
            q_var: 0.8,
        }
    }

    fn q_mu(&self, x: &[usize]) -> f64 {
        0.3 * x.iter().map(|&t| 2.0 - t as f64).sum::<f64>() / x.len() as f64
    }
}

impl ScoreModel for ToyScorer {
    fn sample_posterior(&self, x: &[usize], rng: &mut Rng) -> latentlm::Result<Tensor> {
        let eps = Tensor::randn(&[1], rng);
        Ok(Tensor::from_vec(vec![
            self.q_mu(x) + self.q_var.sqrt() * eps.data()[0],
        ]))
    }
    fn log_posterior(&self, x: &[usize], z0: &Tensor) -> latentlm::Result<f64> {
        Ok(gauss_logpdf(z0.data()[0], self.q_mu(x), self.q_var))
    }
    fn log_decoder(&self, x: &[usize], z0: &Tensor) -> latentlm::Result<f64> {
        Ok(self.toy.log_emission(&ToyObs::Tokens(x.to_vec()), z0.data()))
    }
    fn log_prior(&self, z0: &Tensor, rng: &mut Rng) -> latentlm::Result<f64> {
        let a = self.a;
        let field = cnf::FnField {
            f: move |z: &Tensor, _t: f64| z.scale(a),
            dim: 1,
        };
        Ok(cnf::prior_logdensity(z0, &field, OdeConfig::heun(64), 0, rng)?.log_prior)
    }
}

#[test]
fn criterion_3_estimator_fidelity() {
    let model = ToyScorer::new(0.3);
    let x = [0usize, 4, 2, 2];
    let exact = quadrature_marginal(&model.toy, &ToyObs::Tokens(x.to_vec()), 128).unwrap();

    let iwae = estimate_logp(&model, &x, 1024, EstimatorMode::Iwae, 31).unwrap();
    let iwae_err = (iwae.value - exact).abs();
    assert!(iwae_err < 0.05, "IWAE(1024) off the marginal by {iwae_err:.3} nats");

    // ELBO ≤ IWAE on shared samples, always.
    for seed in 0..16 {
        let e = estimate_logp(&model, &x, 64, EstimatorMode::Elbo, seed).unwrap();
        let i = estimate_logp(&model, &x, 64, EstimatorMode::Iwae, seed).unwrap();
        assert!(i.value >= e.value - 1e-12, "seed {seed}");
    }

    // Conditional plug-in estimator against the exact conditional.
    let pre = [0usize, 4];
    let res = [2usize, 2];
    let exact_cond = exact - quadrature_marginal(&model.toy, &ToyObs::Tokens(pre.to_vec()), 128).unwrap();
    let cond = estimate_cond_logp(&model, &pre, &res, 1024, EstimatorMode::Iwae, 32).unwrap();
    let cond_err = (cond.value - exact_cond).abs();
    assert!(cond_err < 0.1, "conditional off by {cond_err:.3} nats");

    println!(
        "[PASS] criterion 3: estimators — IWAE err {iwae_err:.3} nats, conditional err {cond_err:.3} nats, ELBO ≤ IWAE on 16 shared-sample seeds"
    );
}

// ---------------------------------------------------------------------
// Criterion 4: Flow Matching optimum on the two-point dataset.
// ---------------------------------------------------------------------

/// Closed-form conditional mean velocity for z0 ∈ {−1, +1} (equal mass),
/// z1 ~ N(0, 1), linear bridge: E[u | z_t = z] = Σ_m w_m (z − μ_m)/t with
/// w_m ∝ exp(−(z − (1−t) μ_m)² / (2t²)).
fn two_point_conditional_mean(z: f64, t: f64) -> f64 {
    let mus = [-1.0, 1.0];
    let mut ws = [0.0; 2];
    for (i, mu) in mus.iter().enumerate() {
        let resid = z - (1.0 - t) * mu;
        ws[i] = (-resid * resid / (2.0 * t * t)).exp();
    }
    let total = ws[0] + ws[1];
    mus.iter()
        .zip(&ws)
        .map(|(mu, w)| (w / total) * (z - mu) / t)
        .sum()
}

#[test]
fn criterion_4_flow_matching_optimum() {
    let prior = train_two_point_field();
    let probe_z = [-1.5, -0.5, 0.5, 1.5];
    let probe_t = [0.3, 0.5, 0.7, 0.9];
    let mut worst = 0.0f64;
    for &z in &probe_z {
        for &t in &probe_t {
            let state = Tensor::new(&[1, 1], vec![z]).unwrap();
            let v = prior
                .predict_velocity(&state, t, &Tensor::zeros(&[0, 1]), 0, true)
                .unwrap();
            let want = two_point_conditional_mean(z, t);
            let err = (v.data()[0] - want).abs();
            worst = worst.max(err);
        }
    }
    assert!(
        worst < 1e-2,
        "trained field misses the conditional mean by {worst:.4}"
    );
    println!(
        "[PASS] criterion 4: FM optimum — worst deviation {worst:.2e} at 16 probe points"
    );
}

fn train_two_point_field() -> FlowPrior {
    let mut prior = FlowPrior::init(
        PriorConfig {
            d_latent: 1,
            d_model: 32,
            layers: 2,
            heads: 2,
            block_tokens: 1,
            cfg_drop: 0.0,
        },
        404,
    )
    .unwrap();
    let sched = Schedule::new(0.0, 1.0, 1.0).unwrap();
    let optim = OptimConfig {
        lr_peak: 3e-3,
        lr_final: 1e-4,
        warmup_steps: 100,
        total_steps: 6000,
        ..OptimConfig::default()
    };
    let mut opt = {
        let mut o = latentlm::diffcore::AdamW::new(&prior.params);
        o.weight_decay = 0.0;
        o
    };
    let mut rng = rng_from_seed(405);
    use rand::Rng as _;
    let batch = 32;
    for step in 0..6000 {
        let mut g = Graph::new();
        let binds = Bindings::bind_all(&mut g, &prior.params);
        let mut terms = Vec::with_capacity(batch);
        for _ in 0..batch {
            let z0v = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let z0 = g.leaf(Tensor::new(&[1, 1], vec![z0v]).unwrap());
            let nodes = prior
                .fm_loss_graph(&mut g, &binds, z0, &sched, Some(0), false, &mut rng)
                .unwrap();
            terms.push(nodes.loss);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t).unwrap();
        }
        let loss = g.mul_scalar(acc, 1.0 / batch as f64);
        binds.backward_into(&mut g, loss, &mut prior.params).unwrap();
        opt.step(&mut prior.params, optim.lr_at(step)).unwrap();
    }
    prior
}

// ---------------------------------------------------------------------
// Criterion 5: schedule machinery.
// ---------------------------------------------------------------------
#[test]
fn criterion_5_schedule_machinery() {
    let mut rng = rng_from_seed(505);
    use rand::Rng as _;

    // α² + σ² = 1 to machine eps on 1e5 draws.
    let mut worst_sum = 0.0f64;
    for _ in 0..100_000 {
        let lam: f64 = rng.gen_range(-25.0..25.0);
        let (a, s) = logsnr_to_coeffs(lam);
        worst_sum = worst_sum.max((a * a + s * s - 1.0).abs());
    }
    assert!(worst_sum <= 4.0 * f64::EPSILON, "α²+σ² off by {worst_sum:.2e}");

    // Histogram of 1e6 sampler draws against the closed-form pdf.
    let (mu, sigma) = (0.5, 1.0);
    let sched = Schedule::new(mu, sigma, 1.0).unwrap();
    let bins = 100;
    let n = 1_000_000usize;
    let mut hist = vec![0f64; bins];
    for _ in 0..n {
        let s = sched.sample_normalized(&mut rng);
        hist[((s * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    let mut l1 = 0.0;
    for (b, h) in hist.iter().enumerate() {
        let mid = (b as f64 + 0.5) / bins as f64;
        let want = logitnormal_pdf(mid, mu, sigma).unwrap() / bins as f64;
        l1 += (h / n as f64 - want).abs();
    }
    assert!(l1 < 0.02, "sampler histogram L1 {l1:.4}");

    // Induced-λ density is constant iff the curve is affine.
    let affine_pts = induced_lambda_density(&LogSnrCurve::affine(-4.0, 2.0), 1024).unwrap();
    let variance = |pts: &[latentlm::schedule::LambdaDensityPoint]| {
        let mean = pts.iter().map(|p| p.density).sum::<f64>() / pts.len() as f64;
        pts.iter()
            .map(|p| (p.density - mean) * (p.density - mean))
            .sum::<f64>()
            / pts.len() as f64
    };
    let affine_var = variance(&affine_pts);
    assert!(affine_var < 1e-8, "affine density variance {affine_var:.2e}");
    let logit_pts = induced_lambda_density(&LogSnrCurve::logit(), 1024).unwrap();
    let logit_var = variance(&logit_pts);
    assert!(logit_var > 1e-3, "logit density variance {logit_var:.2e}");

    // u_t = λ̇ · u_λ under both parameterizations, to 1e-12.
    let curve = LogSnrCurve::logit();
    let mut worst_vel = 0.0f64;
    for _ in 0..64 {
        let t: f64 = rng.gen_range(0.05..0.95);
        let (lam, lam_dot) = (curve.eval(t), curve.deriv(t));
        let z = Tensor::randn(&[6], &mut rng);
        let eps = Tensor::randn(&[6], &mut rng);
        let ut = ut_from_alpha_sigma(&z, &eps, lam, lam_dot).unwrap();
        let ul = ulambda_from_alpha_sigma(&z, &eps, lam).unwrap();
        for (x, y) in ut.data().iter().zip(ul.scale(lam_dot).data()) {
            worst_vel = worst_vel.max((x - y).abs());
        }
    }
    assert!(worst_vel < 1e-12, "u_t identity off by {worst_vel:.2e}");

    println!(
        "[PASS] criterion 5: schedule — α²+σ² dev {worst_sum:.1e}, histogram L1 {l1:.4}, affine var {affine_var:.1e}, logit var {logit_var:.1e}, velocity identity dev {worst_vel:.1e}"
    );
}

// ---------------------------------------------------------------------
// Criterion 6: shift invariance and drift.
// ---------------------------------------------------------------------
#[test]
fn criterion_6_shift_invariance_and_drift() {
    // Separable family: identical argmax across d, exactly on the grid.
    let objective = separable_objective(
        |delta| -(delta - 0.7) * (delta - 0.7),
        |d| d as f64,
        |d| (d * d) as f64,
    );
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1 - 0.3).collect();
    let scan = scan_optimal_shift(&objective, &[4, 16, 64, 256], &grid).unwrap();
    for p in &scan.points {
        assert_eq!(p.delta_star, 0.7, "d = {}", p.dim);
    }

    // Shared-factor MI calibration: log-law fit with R² > 0.9.
    let dims = [4usize, 16, 64, 256];
    let worlds: Vec<(usize, SharedFactorWorld)> = dims
        .iter()
        .map(|&d| (d, SharedFactorWorld::identical_rows(d, 1, 1.0, 1.0, 0.25)))
        .collect();
    let objective = mi_calibration_objective(worlds, -2.0, 1.0);
    let deltas: Vec<f64> = (0..=400).map(|i| -12.0 + i as f64 * 0.05).collect();
    let scan = scan_optimal_shift(&objective, &dims, &deltas).unwrap();
    let fit = scan.log_fit.unwrap();
    assert!(fit.r_squared > 0.9, "R² {}", fit.r_squared);

    println!(
        "[PASS] criterion 6: shift — separable argmax 0.7 across dims, shared-factor log law R² {:.4} (a {:.3}, b {:.3})",
        fit.r_squared, fit.a, fit.b
    );
}

// ---------------------------------------------------------------------
// Criterion 7: likelihood–generation mismatch.
// ---------------------------------------------------------------------
#[test]
fn criterion_7_likelihood_generation_mismatch() {
    let mode =
        |x: f64| Gaussian::isotropic(DVector::from_column_slice(&[x, 0.0]), 0.25).unwrap();
    let demo = MixtureDemo {
        prior: GaussianMixture::new(vec![0.5, 0.5], vec![mode(0.0), mode(6.0)]).unwrap(),
        posterior: Gaussian::isotropic(DVector::from_column_slice(&[0.0, 0.0]), 1e-5).unwrap(),
        m_star: 0,
        good_radius: 2.0,
        decoder_bound: -1.0,
        tube_mass: 0.99,
    };
    let mut rng = rng_from_seed(707);
    let report = mismatch_demo(&demo, 4000, &mut rng).unwrap();
    assert!(report.coverage >= 0.9, "coverage {}", report.coverage);
    assert!(report.delta > 5.0, "Δ {}", report.delta);
    assert!(
        report.measured.score <= report.score_bound + 0.05,
        "score {} above bound {}",
        report.measured.score,
        report.score_bound
    );

    // Matched-mean covariance mismatch: the closed form of the Gaussian KL
    // (Σ_p = 4Σ_q, d = 2) is ½(2·¼ − 2 + ln 16) = 0.6363 nats. (The spec's
    // worked value 0.8863 mis-evaluates the trace term; the formula itself
    // is what is checked here, against an independent hand computation.)
    let mean = DVector::from_column_slice(&[0.7, -0.2]);
    let q = Gaussian::isotropic(mean.clone(), 1.0).unwrap();
    let p = Gaussian::isotropic(mean, 4.0).unwrap();
    let kl = q.kl_to(&p);
    let by_hand = 0.5 * (2.0 * 0.25 - 2.0 + (16.0f64).ln());
    assert!((kl.total - by_hand).abs() < 1e-12);
    assert!((kl.total - 0.6363).abs() < 1e-4, "KL {}", kl.total);
    assert!(kl.mean_term.abs() < 1e-12);

    println!(
        "[PASS] criterion 7: mismatch — coverage {:.3}, Δ {:.2} nats, score {:.2} ≤ bound {:.2}, matched-mean KL {:.4}",
        report.coverage, report.delta, report.measured.score, report.score_bound, kl.total
    );
}

// ---------------------------------------------------------------------
// Criteria 8 and 9 share one trained toy pipeline.
// ---------------------------------------------------------------------
struct ToyPipeline {
    vae: TextVae,
    prior: FlowPrior,
    tokenizer: Tokenizer,
    schedule: Schedule,
    held_out: Vec<String>,
    bigram: NgramBaseline,
}

static PIPELINE: OnceLock<ToyPipeline> = OnceLock::new();

fn pipeline() -> &'static ToyPipeline {
    PIPELINE.get_or_init(|| {
        let corpus = synth::alternation_corpus(360, 24, 808);
        assert!(corpus.len() <= 1_000_000);
        let tokenizer = Tokenizer::from_corpus(&corpus);
        let (train_lines, held_lines) = synth::split_corpus(&corpus, 6);
        let data = prepare_dataset(&tokenizer, &train_lines.join("\n"), 32);
        let schedule = Schedule::new(1.0, 1.0, 1.0).unwrap();

        let mut vae = TextVae::init(
            VaeConfig {
                vocab_size: tokenizer.vocab_size(),
                d_latent: 6,
                d_model: 32,
                enc_layers: 1,
                dec_layers: 1,
                heads: 2,
                max_len: 32,
                beta: 1e-3,
                lambda_mask: 0.1,
                ..VaeConfig::default()
            },
            809,
        )
        .unwrap();
        let optim = OptimConfig {
            lr_peak: 3e-3,
            lr_final: 3e-4,
            warmup_steps: 50,
            total_steps: 900,
            batch_size: 8,
            ..OptimConfig::default()
        };
        train_stage1(&mut vae, &data, &optim, 900, 810, |_| {}).unwrap();

        let mut prior = FlowPrior::init(
            PriorConfig {
                d_latent: 6,
                d_model: 32,
                layers: 2,
                heads: 2,
                block_tokens: 5,
                cfg_drop: 0.1,
            },
            811,
        )
        .unwrap();
        let optim2 = OptimConfig {
            lr_peak: 1e-3,
            lr_final: 1e-4,
            warmup_steps: 50,
            total_steps: 500,
            batch_size: 4,
            ..OptimConfig::default()
        };
        train_stage2(
            &mut vae,
            &mut prior,
            &Stage2Weights::default(),
            &schedule,
            &data,
            &optim2,
            500,
            812,
            |_| {},
        )
        .unwrap();

        let bigram = NgramBaseline::fit(&train_lines, 2).unwrap();
        ToyPipeline {
            vae,
            prior,
            tokenizer,
            schedule,
            held_out: held_lines.iter().map(|s| s.to_string()).collect(),
            bigram,
        }
    })
}

fn model_continuation_accuracy(
    p: &ToyPipeline,
    prompt: &str,
    truth: &str,
    strategy: FirstBlockStrategy,
    seed: u64,
) -> f64 {
    let config = GenerationConfig {
        steps: 8,
        cfg_scale: 2.0,
        strategy,
        max_blocks: 6,
        seed,
        temperature: None,
    };
    let out = generate_text(
        &p.vae,
        &p.prior,
        &p.tokenizer,
        prompt,
        &config,
        &p.schedule,
    )
    .unwrap();
    let got: Vec<char> = out.text.chars().collect();
    let want: Vec<char> = truth.chars().collect();
    if want.is_empty() {
        return 0.0;
    }
    let hits = want
        .iter()
        .enumerate()
        .filter(|(i, w)| got.get(*i) == Some(w))
        .count();
    hits as f64 / want.len() as f64
}

#[test]
fn criterion_8_end_to_end_toy_pipeline() {
    let p = pipeline();
    let held_ids: Vec<Vec<usize>> = p
        .held_out
        .iter()
        .map(|l| p.tokenizer.encode(l).0)
        .collect();

    // Teacher-forced reconstruction accuracy at t = 0 over held-out lines.
    let mut rng = rng_from_seed(813);
    let mut acc0 = 0.0;
    for ids in &held_ids {
        let post = p.vae.encode(ids).unwrap();
        acc0 += p.vae.recon_accuracy(ids, &post.mu).unwrap();
    }
    acc0 /= held_ids.len() as f64;
    assert!(acc0 > 0.95, "clean reconstruction accuracy {acc0:.4}");

    // Non-increasing accuracy across noise levels {0, T/4, T/2, T} with
    // 0.02 slack per step.
    let mut curve = Vec::new();
    for s in [0.0, 0.25, 0.5, 1.0] {
        let mut acc = 0.0;
        for ids in &held_ids {
            acc += p.vae.recon_under_noise(ids, s, &p.schedule, &mut rng).unwrap();
        }
        curve.push(acc / held_ids.len() as f64);
    }
    for w in curve.windows(2) {
        assert!(
            w[1] <= w[0] + 0.02,
            "noise-robustness curve not non-increasing: {curve:?}"
        );
    }

    // Generation beats the bigram baseline on held-out prompts, paired
    // mean over 32 seeds.
    let prompts: Vec<(&str, &str)> = p
        .held_out
        .iter()
        .take(4)
        .map(|l| (&l[..6], &l[6..16]))
        .collect();
    let bigram_acc: f64 = prompts
        .iter()
        .map(|(pre, truth)| p.bigram.continuation_accuracy(pre, truth))
        .sum::<f64>()
        / prompts.len() as f64;
    let mut diffs = Vec::with_capacity(32);
    for seed in 0..32u64 {
        let model_acc: f64 = prompts
            .iter()
            .map(|(pre, truth)| {
                model_continuation_accuracy(
                    p,
                    pre,
                    truth,
                    FirstBlockStrategy::CleanRepaint,
                    900 + seed,
                )
            })
            .sum::<f64>()
            / prompts.len() as f64;
        diffs.push(model_acc - bigram_acc);
    }
    let mean_diff = diffs.iter().sum::<f64>() / diffs.len() as f64;
    assert!(
        mean_diff > 0.0,
        "model does not beat the bigram baseline: paired mean {mean_diff:.4} (bigram {bigram_acc:.4})"
    );

    println!(
        "[PASS] criterion 8: toy pipeline — recon@0 {acc0:.4}, noise curve {curve:?}, model beats bigram by {mean_diff:.4} (bigram {bigram_acc:.4}) over 32 seeds"
    );
}

// ---------------------------------------------------------------------
// Criterion 9: first-block conditioning-strategy harness.
// ---------------------------------------------------------------------
#[test]
fn criterion_9_conditioning_strategy_harness() {
    let p = pipeline();

    // Hard gate: clean repainting preserves known latents bit-exactly at
    // every intermediate step on a real mixed block.
    let (ids, _) = p.tokenizer.encode(&p.held_out[0][..7]);
    let post = p.vae.encode(&ids).unwrap();
    let b = p.prior.cfg.block_tokens;
    let rem = post.mu.rows() % b;
    assert!(rem > 0, "test wants a mid-block prompt");
    let full = post.mu.rows() - rem;
    let d = p.vae.cfg.d_latent;
    let known = KnownRegion {
        latents: Tensor::new(&[rem, d], post.mu.data()[full * d..].to_vec()).unwrap(),
        len: rem,
    };
    let history = Tensor::new(&[full, d], post.mu.data()[..full * d].to_vec()).unwrap();
    let config = GenerationConfig {
        steps: 8,
        cfg_scale: 2.0,
        strategy: FirstBlockStrategy::CleanRepaint,
        seed: 901,
        ..Default::default()
    };
    let mut rng = rng_from_seed(902);
    let result = generate_block(
        &p.prior,
        &history,
        full,
        b,
        Some(&known),
        &config,
        &p.schedule,
        &mut rng,
    )
    .unwrap();
    for (step, state) in result.step_states.iter().enumerate() {
        for row in 0..rem {
            for j in 0..d {
                assert_eq!(
                    state.get2(row, j).to_bits(),
                    known.latents.get2(row, j).to_bits(),
                    "clean repaint drifted at step {step}"
                );
            }
        }
    }

    // Comparison table over all four strategies (reported; the ordering is
    // a directional expectation at toy scale, not a hard gate).
    let strategies = [
        FirstBlockStrategy::CleanRepaint,
        FirstBlockStrategy::PartialRepaint { t_rep: 1, m: 1.0 },
        FirstBlockStrategy::LeftPad,
        FirstBlockStrategy::RightPad,
    ];
    let prompts: Vec<(&str, &str)> = p
        .held_out
        .iter()
        .take(3)
        .map(|l| (&l[..7], &l[7..15]))
        .collect();
    println!("strategy,continuation_accuracy");
    let mut table = Vec::new();
    for strat in strategies {
        let mut acc = 0.0;
        let mut count = 0;
        for seed in 0..8u64 {
            for (pre, truth) in &prompts {
                acc += model_continuation_accuracy(p, pre, truth, strat, 950 + seed);
                count += 1;
            }
        }
        let acc = acc / count as f64;
        println!("{},{acc:.4}", strat.name());
        table.push((strat.name(), acc));
    }
    let clean = table[0].1;
    let partial = table[1].1;
    println!(
        "clean {} partial {}: clean > partial ordering {}",
        clean,
        partial,
        if clean > partial {
            "holds"
        } else {
            "does not hold at this scale (reported, not gated)"
        }
    );

    println!("[PASS] criterion 9: conditioning harness — clean repaint bit-exact, four-strategy table emitted");
}

// ---------------------------------------------------------------------
// Criterion 10: determinism and gradients.
// ---------------------------------------------------------------------
#[test]
fn criterion_10_determinism_and_gradients() {
    // Full-pipeline byte-reproducibility: two identical miniature runs
    // produce bit-identical parameters and identical generated text.
    let run = || {
        let corpus = synth::alternation_corpus(48, 12, 1001);
        let tokenizer = Tokenizer::from_corpus(&corpus);
        let data = prepare_dataset(&tokenizer, &corpus, 32);
        let mut vae = TextVae::init(
            VaeConfig {
                vocab_size: tokenizer.vocab_size(),
                d_latent: 4,
                d_model: 16,
                enc_layers: 1,
                dec_layers: 1,
                heads: 2,
                max_len: 32,
                ..VaeConfig::default()
            },
            1002,
        )
        .unwrap();
        let optim = OptimConfig {
            warmup_steps: 5,
            total_steps: 40,
            batch_size: 4,
            ..OptimConfig::default()
        };
        train_stage1(&mut vae, &data, &optim, 40, 1003, |_| {}).unwrap();
        let mut prior = FlowPrior::init(
            PriorConfig {
                d_latent: 4,
                d_model: 16,
                layers: 1,
                heads: 2,
                block_tokens: 4,
                cfg_drop: 0.1,
            },
            1004,
        )
        .unwrap();
        train_stage2(
            &mut vae,
            &mut prior,
            &Stage2Weights::default(),
            &Schedule::new(0.0, 1.0, 1.0).unwrap(),
            &data,
            &optim,
            10,
            1005,
            |_| {},
        )
        .unwrap();
        let text = generate_text(
            &vae,
            &prior,
            &tokenizer,
            "abab",
            &GenerationConfig {
                steps: 4,
                cfg_scale: 2.0,
                max_blocks: 2,
                seed: 1006,
                ..Default::default()
            },
            &Schedule::new(0.0, 1.0, 1.0).unwrap(),
        )
        .unwrap()
        .text;
        let bits: Vec<u64> = vae
            .params
            .iter()
            .chain(prior.params.iter())
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect();
        (bits, text)
    };
    let (bits_a, text_a) = run();
    let (bits_b, text_b) = run();
    assert_eq!(bits_a, bits_b, "training is not byte-reproducible");
    assert_eq!(text_a, text_b, "generation is not byte-reproducible");

    // Analytic gradients match central finite differences at relative 1e-4
    // across randomized composite graphs.
    let mut worst = 0.0f64;
    for seed in 0..12 {
        let mut rng = rng_from_seed(2000 + seed);
        let theta = Tensor::rand_uniform(&[6], -2.0, 2.0, &mut rng).into_data();
        let build = |g: &mut Graph, x: latentlm::NodeId| {
            let t = g.tanh(x);
            let e = g.exp(x);
            let m = g.mul(t, e).unwrap();
            let n = g.layer_norm(m, 1e-5).unwrap();
            let nt = g.transpose(n).unwrap();
            let pr = g.matmul(n, nt).unwrap();
            let sm = g.softmax_rows(pr).unwrap();
            g.sum_all(sm)
        };
        let mut g = Graph::new();
        let x = g.var(Tensor::new(&[2, 3], theta.clone()).unwrap());
        let loss = build(&mut g, x);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).into_data();
        let mut f = |t: &[f64]| {
            let mut g = Graph::new();
            let x = g.var(Tensor::new(&[2, 3], t.to_vec()).unwrap());
            let loss = build(&mut g, x);
            g.value(loss).item()
        };
        let numeric = latentlm::oracle::finite_diff_grad(&mut f, &theta, 1e-5).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = 1.0_f64.max(a.abs()).max(n.abs());
            let rel = (a - n).abs() / denom;
            worst = worst.max(rel);
            assert!(rel < 1e-4, "gradient deviation {rel:.2e}");
        }
    }

    println!(
        "[PASS] criterion 10: determinism — bit-identical retrain and regeneration; gradients within {worst:.2e} of finite differences"
    );
}

// Keep the unused ParamSet import honest if the helper shape changes.
#[allow(dead_code)]
fn _assert_types(_p: &ParamSet) {}
