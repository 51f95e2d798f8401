//! Oracle cross-check battery behind the `verify` subcommand: every
//! subsystem checked against its independent reference, fast enough to run
//! on a fresh build.

use crate::calib::{scan_optimal_shift, separable_objective, Gaussian, GaussianMixture};
use crate::cnf::{self, divergence, DivergenceAt, LinearField, OdeConfig};
use crate::diffcore::{AdamW, Graph, ParamSet, Tensor};
use crate::likelihood::{estimate_logp, EstimatorMode, ScoreModel};
use crate::oracle::{
    finite_diff_grad, gauss_hermite, gauss_logpdf, kahan_sum, quadrature_marginal,
    AnalyticLinearFlow, ToyEmission, ToyLinGaussModel, ToyObs,
};
use crate::schedule::{logitnormal_pdf, logsnr_to_coeffs, Schedule};
use crate::{rng_from_seed, Rng};
use nalgebra::DVector;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> CheckResult {
    CheckResult { name, pass, detail }
}

/// Run every oracle cross-check. All checks are deterministic.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        autodiff_vs_finite_differences(),
        adamw_quadratic_bowl(),
        checkpoint_round_trip(),
        quadrature_conjugate_and_convergence(),
        cnf_matches_analytic_pushforward(),
        hutchinson_matches_trace(),
        schedule_identities(),
        sampler_median(),
        toy_iwae_vs_quadrature(),
        shift_scan_invariance(),
        displacement_bound_randomized(),
    ]
}

pub fn all_pass(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.pass)
}

fn autodiff_vs_finite_differences() -> CheckResult {
    let mut rng = rng_from_seed(1);
    let mut worst = 0.0f64;
    for _ in 0..8 {
        let theta = Tensor::rand_uniform(&[6], -2.0, 2.0, &mut rng).into_data();
        let build = |g: &mut Graph, x| {
            let t = g.tanh(x);
            let e = g.exp(x);
            let m = g.mul(t, e).unwrap();
            let n = g.layer_norm(m, 1e-5).unwrap();
            let sm = g.softmax_rows(n).unwrap();
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
        let numeric = finite_diff_grad(&mut f, &theta, 1e-5).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / 1.0_f64.max(a.abs()));
        }
    }
    check(
        "autodiff-finite-difference",
        worst < 1e-4,
        format!("worst relative gradient deviation {worst:.2e}"),
    )
}

fn adamw_quadratic_bowl() -> CheckResult {
    let mut params = ParamSet::new();
    params.add("w", Tensor::scalar(2.5));
    let mut opt = AdamW::new(&params);
    opt.weight_decay = 0.0;
    for step in 0..100 {
        let w = params.get(0).value.item();
        params.get_mut(0).grad = Some(Tensor::scalar(2.0 * (w - 3.0)));
        let lr = 0.1 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / 100.0).cos());
        opt.step(&mut params, lr.max(1e-5)).unwrap();
    }
    let err = (params.get(0).value.item() - 3.0).abs();
    check(
        "adamw-closed-form-minimum",
        err < 1e-3,
        format!("|w - w*| = {err:.2e} after 100 steps"),
    )
}

fn checkpoint_round_trip() -> CheckResult {
    let mut rng = rng_from_seed(2);
    let mut params = ParamSet::new();
    params.add("a", Tensor::randn(&[4, 5], &mut rng));
    params.add("b", Tensor::randn(&[7], &mut rng));
    let path = std::env::temp_dir().join(format!("verify-ckpt-{}.bin", std::process::id()));
    let result = (|| -> crate::Result<bool> {
        crate::diffcore::checkpoint::save(&params, &path)?;
        let loaded = crate::diffcore::checkpoint::load(&path)?;
        let bit_exact = params.iter().zip(loaded.iter()).all(|(x, y)| {
            x.name == y.name
                && x.value
                    .data()
                    .iter()
                    .zip(y.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        });
        Ok(bit_exact)
    })();
    let _ = std::fs::remove_file(&path);
    match result {
        Ok(bit_exact) => check(
            "checkpoint-bit-exact-round-trip",
            bit_exact,
            "payload round trip compared bitwise".into(),
        ),
        Err(e) => check("checkpoint-bit-exact-round-trip", false, e.to_string()),
    }
}

fn quadrature_conjugate_and_convergence() -> CheckResult {
    let (w, s2) = (0.8, 0.5);
    let model = ToyLinGaussModel {
        d: 1,
        emission: ToyEmission::Gaussian {
            w: Tensor::new(&[1, 1], vec![w]).unwrap(),
            noise_var: s2,
        },
        prior_scale: 1.0,
    };
    let x = 0.9;
    let got = quadrature_marginal(&model, &ToyObs::Real(vec![x]), 64).unwrap();
    let want = gauss_logpdf(x, 0.0, w * w + s2);
    let conjugate_err = (got - want).abs();

    let cat = ToyLinGaussModel {
        d: 2,
        emission: ToyEmission::Categorical {
            w: Tensor::new(&[3, 2], vec![0.4, -0.1, 0.0, 0.3, -0.2, 0.1]).unwrap(),
            b: Tensor::zeros(&[3]),
        },
        prior_scale: 1.0,
    };
    let obs = ToyObs::Tokens(vec![0, 2, 1]);
    let a = quadrature_marginal(&cat, &obs, 64).unwrap();
    let b = quadrature_marginal(&cat, &obs, 128).unwrap();
    let drift = (a - b).abs();

    let (_, weights) = gauss_hermite(64);
    let norm = (kahan_sum(weights.iter().copied()) - std::f64::consts::PI.sqrt()).abs();

    check(
        "gauss-hermite-quadrature",
        conjugate_err < 1e-10 && drift < 1e-8 && norm < 1e-10,
        format!("conjugate err {conjugate_err:.1e}, node-doubling drift {drift:.1e}"),
    )
}

fn cnf_matches_analytic_pushforward() -> CheckResult {
    let mut rng = rng_from_seed(3);
    let mut worst = 0.0f64;
    for &a in &[-1.0, 0.0, 0.5] {
        for &d in &[1usize, 2, 8] {
            let oracle = AnalyticLinearFlow::new(a, d);
            let mut m = Tensor::zeros(&[d, d]);
            for i in 0..d {
                m.set2(i, i, a);
            }
            let field = LinearField::new(m);
            for _ in 0..2 {
                let z0 = Tensor::randn(&[d], &mut rng).scale(0.5);
                let res =
                    cnf::prior_logdensity(&z0, &field, OdeConfig::heun(64), 0, &mut rng).unwrap();
                worst = worst.max((res.log_prior - oracle.log_prior_density(z0.data())).abs());
            }
        }
    }
    check(
        "cnf-analytic-pushforward",
        worst < 1e-4,
        format!("worst density deviation {worst:.2e} nats"),
    )
}

fn hutchinson_matches_trace() -> CheckResult {
    let mut rng = rng_from_seed(4);
    let g = Tensor::randn(&[8, 8], &mut rng).scale(0.1);
    let mut a = g.clone();
    for i in 0..8 {
        a.set2(i, i, a.get2(i, i) + 2.0);
    }
    let field = LinearField::new(a);
    let tr = field.trace();
    let z = Tensor::randn(&[8], &mut rng);
    let est = cnf::divergence_estimate(&field, &z, 0.0, 4000, &mut rng).unwrap();
    let rel = (est - tr).abs() / tr.abs();
    let exact = divergence(&field, &z, 0.0, &DivergenceAt::Exact).unwrap();
    let exact_err = (exact - tr).abs();
    check(
        "hutchinson-trace",
        rel < 0.02 && exact_err < 1e-6,
        format!("probe relative error {rel:.3}, exact deviation {exact_err:.1e}"),
    )
}

fn schedule_identities() -> CheckResult {
    let mut rng = rng_from_seed(5);
    use rand::Rng as _;
    let mut worst_sum = 0.0f64;
    for _ in 0..10_000 {
        let lam: f64 = rng.gen_range(-20.0..20.0);
        let (a, s) = logsnr_to_coeffs(lam);
        worst_sum = worst_sum.max((a * a + s * s - 1.0).abs());
    }
    let pdf = logitnormal_pdf(0.5, 0.0, 1.0).unwrap();
    let pdf_err = (pdf - 4.0 / (2.0 * std::f64::consts::PI).sqrt()).abs();

    let curve = crate::schedule::LogSnrCurve::logit();
    let mut worst_vel = 0.0f64;
    for _ in 0..16 {
        let t: f64 = rng.gen_range(0.1..0.9);
        let lam = curve.eval(t);
        let lam_dot = curve.deriv(t);
        let z = Tensor::randn(&[4], &mut rng);
        let eps = Tensor::randn(&[4], &mut rng);
        let ut = crate::schedule::ut_from_alpha_sigma(&z, &eps, lam, lam_dot).unwrap();
        let ul = crate::schedule::ulambda_from_alpha_sigma(&z, &eps, lam).unwrap();
        for (x, y) in ut.data().iter().zip(ul.scale(lam_dot).data()) {
            worst_vel = worst_vel.max((x - y).abs());
        }
    }
    check(
        "schedule-identities",
        worst_sum <= 4.0 * f64::EPSILON && pdf_err < 1e-12 && worst_vel < 1e-12,
        format!("α²+σ² dev {worst_sum:.1e}, u_t identity dev {worst_vel:.1e}"),
    )
}

fn sampler_median() -> CheckResult {
    let sched = Schedule::new(0.0, 1.0, 1.0).unwrap();
    let mut rng = rng_from_seed(6);
    let n = 100_000;
    let below = (0..n)
        .filter(|_| sched.sample_normalized(&mut rng) < 0.5)
        .count();
    let frac = below as f64 / n as f64;
    check(
        "logit-normal-sampler-median",
        (frac - 0.5).abs() < 0.01,
        format!("median fraction {frac:.4}"),
    )
}

/// Minimal toy scorer reused by the verify battery.
struct VerifyToy {
    toy: ToyLinGaussModel,
    a: f64,
}

impl VerifyToy {
    fn new(a: f64) -> Self {
        let w = Tensor::new(&[5, 1], vec![0.8, 0.4, 0.0, -0.4, -0.8]).unwrap();
        VerifyToy {
            toy: ToyLinGaussModel {
                d: 1,
                emission: ToyEmission::Categorical {
                    w,
                    b: Tensor::zeros(&[5]),
                },
                prior_scale: (-a).exp(),
            },
            a,
        }
    }

    fn q_mu(&self, x: &[usize]) -> f64 {
        0.3 * x.iter().map(|&t| 2.0 - t as f64).sum::<f64>() / x.len() as f64
    }
}

impl ScoreModel for VerifyToy {
    fn sample_posterior(&self, x: &[usize], rng: &mut Rng) -> crate::Result<Tensor> {
        let eps = Tensor::randn(&[1], rng);
        Ok(Tensor::from_vec(vec![
            self.q_mu(x) + 0.8f64.sqrt() * eps.data()[0],
        ]))
    }
    fn log_posterior(&self, x: &[usize], z0: &Tensor) -> crate::Result<f64> {
        Ok(gauss_logpdf(z0.data()[0], self.q_mu(x), 0.8))
    }
    fn log_decoder(&self, x: &[usize], z0: &Tensor) -> crate::Result<f64> {
        Ok(self.toy.log_emission(&ToyObs::Tokens(x.to_vec()), z0.data()))
    }
    fn log_prior(&self, z0: &Tensor, rng: &mut Rng) -> crate::Result<f64> {
        let a = self.a;
        let field = cnf::FnField {
            f: move |z: &Tensor, _t: f64| z.scale(a),
            dim: 1,
        };
        Ok(cnf::prior_logdensity(z0, &field, OdeConfig::heun(64), 0, rng)?.log_prior)
    }
}

fn toy_iwae_vs_quadrature() -> CheckResult {
    let model = VerifyToy::new(0.3);
    let x = [0usize, 4, 2];
    let exact = quadrature_marginal(&model.toy, &ToyObs::Tokens(x.to_vec()), 128).unwrap();
    let est = estimate_logp(&model, &x, 512, EstimatorMode::Iwae, 9).unwrap();
    let err = (est.value - exact).abs();
    check(
        "iwae-vs-quadrature",
        err < 0.05,
        format!("IWAE(512) off the marginal by {err:.3} nats"),
    )
}

fn shift_scan_invariance() -> CheckResult {
    let objective = separable_objective(
        |delta| -(delta - 0.7) * (delta - 0.7),
        |d| d as f64,
        |d| (d * d) as f64,
    );
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1 - 0.3).collect();
    let scan = scan_optimal_shift(&objective, &[4, 16, 64, 256], &grid).unwrap();
    let invariant = scan.points.iter().all(|p| p.delta_star == 0.7);
    check(
        "separable-shift-invariance",
        invariant,
        format!(
            "argmax per dim: {:?}",
            scan.points.iter().map(|p| p.delta_star).collect::<Vec<_>>()
        ),
    )
}

fn displacement_bound_randomized() -> CheckResult {
    let mut rng = rng_from_seed(7);
    use rand::Rng as _;
    let mut ok = true;
    for _ in 0..200 {
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let comps: Vec<Gaussian> = (0..3)
            .map(|_| {
                let mean = DVector::from_column_slice(
                    &(0..4)
                        .map(|_| rng.gen_range(-3.0..3.0))
                        .collect::<Vec<f64>>(),
                );
                Gaussian::isotropic(mean, 0.5).unwrap()
            })
            .collect();
        let mix = GaussianMixture::new(weights, comps).unwrap();
        let m_star = rng.gen_range(0..3);
        let (exact, bound) = crate::calib::mean_displacement_bound(&mix, m_star).unwrap();
        ok &= exact <= bound + 1e-12;
    }
    check(
        "mean-displacement-bound",
        ok,
        "exact displacement ≤ triangle bound on 200 random mixtures".into(),
    )
}
