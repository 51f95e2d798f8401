//! ODE machinery: flow integration for sampling, the augmented ODE for
//! exact prior log-density, and exact / stochastic-probe divergence.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::oracle::std_normal_logpdf;
use crate::Rng;

/// A time-dependent velocity field over flat latent vectors.
pub trait VectorField {
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor>;
    fn dim(&self) -> usize;
}

/// Field defined by a closure; the workhorse for tests and oracles.
pub struct FnField<F: Fn(&Tensor, f64) -> Tensor> {
    pub f: F,
    pub dim: usize,
}

impl<F: Fn(&Tensor, f64) -> Tensor> VectorField for FnField<F> {
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        Ok((self.f)(z, t))
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Dense linear field `v(z, t) = A z`.
pub struct LinearField {
    pub a: Tensor,
}

impl LinearField {
    pub fn new(a: Tensor) -> Self {
        LinearField { a }
    }

    pub fn trace(&self) -> f64 {
        let d = self.a.rows();
        (0..d).map(|i| self.a.get2(i, i)).sum()
    }
}

impl VectorField for LinearField {
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let _ = t;
        let col = z.reshape(&[z.len(), 1])?;
        Ok(self.a.matmul(&col)?.reshape(&[z.len()])?)
    }

    fn dim(&self) -> usize {
        self.a.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OdeMethod {
    Euler,
    Heun,
}

#[derive(Clone, Copy, Debug)]
pub struct OdeConfig {
    pub method: OdeMethod,
    pub steps: usize,
}

impl OdeConfig {
    pub fn heun(steps: usize) -> Self {
        OdeConfig {
            method: OdeMethod::Heun,
            steps,
        }
    }

    pub fn euler(steps: usize) -> Self {
        OdeConfig {
            method: OdeMethod::Euler,
            steps,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("ODE solver wants steps ≥ 1"));
        }
        Ok(())
    }
}

/// Divergence evaluation mode inside the augmented ODE.
#[derive(Clone, Debug)]
pub enum Divergence {
    /// Directional derivatives along the coordinate axes; `d + 1`-ish field
    /// evaluations per stage, viable for small dimensions.
    Exact,
    /// Hutchinson probes; each probe vector stays fixed for a whole solve.
    Probes(usize),
}

/// Result of an augmented-ODE density evaluation.
#[derive(Clone, Debug)]
pub struct DensityResult {
    pub log_prior: f64,
    pub z1_terminal: Tensor,
    /// Accumulated divergence integral ℓ₁.
    pub logdet: f64,
    /// Number of Hutchinson probes used; 0 means exact divergence.
    pub probe_count: usize,
}

/// Integrate `dz/dt = v(z, t)` from `t_from` to `t_to`.
pub fn integrate_flow(
    z_start: &Tensor,
    field: &dyn VectorField,
    t_from: f64,
    t_to: f64,
    config: OdeConfig,
) -> Result<Tensor> {
    config.validate()?;
    if t_from == t_to {
        return Err(Error::invalid("integrate_flow wants t_from ≠ t_to"));
    }
    let h = (t_to - t_from) / config.steps as f64;
    let mut z = z_start.clone();
    for step in 0..config.steps {
        let t = t_from + h * step as f64;
        let k1 = field.eval(&z, t)?;
        z = match config.method {
            OdeMethod::Euler => z.add(&k1.scale(h))?,
            OdeMethod::Heun => {
                let z_pred = z.add(&k1.scale(h))?;
                let k2 = field.eval(&z_pred, t + h)?;
                z.add(&k1.add(&k2)?.scale(0.5 * h))?
            }
        };
        if !z.is_finite() {
            return Err(Error::NonFinite {
                what: "flow state".into(),
                step: Some(step),
            });
        }
    }
    Ok(z)
}

/// Divergence of a field at `(z, t)`.
///
/// Exact mode sums central-difference directional derivatives along the
/// coordinate axes; probe mode averages `εᵀ (∂v/∂z) ε` with the
/// Jacobian-vector product taken by central differences along ε.
pub fn divergence(
    field: &dyn VectorField,
    z: &Tensor,
    t: f64,
    mode: &DivergenceAt,
) -> Result<f64> {
    match mode {
        DivergenceAt::Exact => {
            let h = 1e-4;
            let d = z.len();
            let mut total = 0.0;
            let mut zp = z.clone();
            for i in 0..d {
                zp.data_mut()[i] = z.data()[i] + h;
                let up = field.eval(&zp, t)?;
                zp.data_mut()[i] = z.data()[i] - h;
                let down = field.eval(&zp, t)?;
                zp.data_mut()[i] = z.data()[i];
                total += (up.data()[i] - down.data()[i]) / (2.0 * h);
            }
            Ok(total)
        }
        DivergenceAt::Probes(probes) => {
            let h = 1e-4;
            let mut total = 0.0;
            for eps in probes {
                let zp = z.add(&eps.scale(h))?;
                let zm = z.sub(&eps.scale(h))?;
                let jvp = field
                    .eval(&zp, t)?
                    .sub(&field.eval(&zm, t)?)?
                    .scale(1.0 / (2.0 * h));
                total += eps.dot(&jvp)?;
            }
            Ok(total / probes.len() as f64)
        }
    }
}

/// Concrete probe vectors for a divergence evaluation.
pub enum DivergenceAt {
    Exact,
    Probes(Vec<Tensor>),
}

/// Probe distribution for Hutchinson estimation. Gaussian is the canonical
/// choice; Rademacher is offered for variance reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Gaussian,
    Rademacher,
}

pub fn draw_probes(kind: ProbeKind, count: usize, dim: usize, rng: &mut Rng) -> Vec<Tensor> {
    use rand::Rng as _;
    (0..count)
        .map(|_| match kind {
            ProbeKind::Gaussian => Tensor::randn(&[dim], rng),
            ProbeKind::Rademacher => Tensor::from_vec(
                (0..dim)
                    .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                    .collect(),
            ),
        })
        .collect()
}

/// Convenience wrapper computing a one-shot divergence estimate.
pub fn divergence_estimate(
    field: &dyn VectorField,
    z: &Tensor,
    t: f64,
    probes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if probes == 0 {
        divergence(field, z, t, &DivergenceAt::Exact)
    } else {
        let eps = draw_probes(ProbeKind::Gaussian, probes, z.len(), rng);
        divergence(field, z, t, &DivergenceAt::Probes(eps))
    }
}

/// Solve the augmented ODE `(ż, ℓ̇) = (v, ∇·v)` from `t = 0` to `t = 1`
/// and return `log p(z0) = log N(z1; 0, I) + ℓ₁`.
///
/// `probes = 0` selects exact divergence. With probes, every probe vector
/// is drawn once up front and held fixed for the whole solve.
pub fn prior_logdensity(
    z0: &Tensor,
    field: &dyn VectorField,
    config: OdeConfig,
    probes: usize,
    rng: &mut Rng,
) -> Result<DensityResult> {
    config.validate()?;
    let mode = if probes == 0 {
        DivergenceAt::Exact
    } else {
        DivergenceAt::Probes(draw_probes(ProbeKind::Gaussian, probes, z0.len(), rng))
    };

    let h = 1.0 / config.steps as f64;
    let mut z = z0.clone();
    let mut ell = 0.0;
    for step in 0..config.steps {
        let t = h * step as f64;
        let k1 = field.eval(&z, t)?;
        let d1 = divergence(field, &z, t, &mode)?;
        match config.method {
            OdeMethod::Euler => {
                z = z.add(&k1.scale(h))?;
                ell += h * d1;
            }
            OdeMethod::Heun => {
                let z_pred = z.add(&k1.scale(h))?;
                let k2 = field.eval(&z_pred, t + h)?;
                let d2 = divergence(field, &z_pred, t + h, &mode)?;
                z = z.add(&k1.add(&k2)?.scale(0.5 * h))?;
                ell += 0.5 * h * (d1 + d2);
            }
        }
        if !z.is_finite() || !ell.is_finite() {
            return Err(Error::NonFinite {
                what: "augmented ODE state".into(),
                step: Some(step),
            });
        }
    }

    Ok(DensityResult {
        log_prior: std_normal_logpdf(z.data()) + ell,
        z1_terminal: z,
        logdet: ell,
        probe_count: probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::AnalyticLinearFlow;
    use crate::rng_from_seed;

    fn zero_field(d: usize) -> FnField<impl Fn(&Tensor, f64) -> Tensor> {
        FnField {
            f: |z: &Tensor, _t| Tensor::zeros(z.shape()),
            dim: d,
        }
    }

    #[test]
    fn zero_field_is_identity_transport() {
        let mut rng = rng_from_seed(1);
        let z = Tensor::randn(&[5], &mut rng);
        let out = integrate_flow(&z, &zero_field(5), 1.0, 0.0, OdeConfig::heun(16)).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn exponential_decay_matches_analytic() {
        // v(z, t) = -z integrated 1 → 0 multiplies by e.
        let field = FnField {
            f: |z: &Tensor, _t| z.scale(-1.0),
            dim: 3,
        };
        let z1 = Tensor::from_vec(vec![1.0, -0.5, 2.0]);
        let z0 = integrate_flow(&z1, &field, 1.0, 0.0, OdeConfig::heun(64)).unwrap();
        for (got, want) in z0.data().iter().zip(z1.data()) {
            let target = want * std::f64::consts::E;
            assert!(
                ((got - target) / target).abs() < 1e-4,
                "{got} vs {target}"
            );
        }
    }

    #[test]
    fn heun_halving_steps_quarters_error() {
        let field = FnField {
            f: |z: &Tensor, _t| z.scale(-1.0),
            dim: 1,
        };
        let z1 = Tensor::from_vec(vec![1.0]);
        let exact = std::f64::consts::E;
        let err = |steps: usize| {
            let z0 = integrate_flow(&z1, &field, 1.0, 0.0, OdeConfig::heun(steps)).unwrap();
            (z0.data()[0] - exact).abs()
        };
        let (e16, e32, e64) = (err(16), err(32), err(64));
        let r1 = e16 / e32;
        let r2 = e32 / e64;
        assert!((3.0..5.0).contains(&r1), "ratio {r1}");
        assert!((3.0..5.0).contains(&r2), "ratio {r2}");
    }

    #[test]
    fn non_finite_state_reports_step_index() {
        let field = FnField {
            f: |z: &Tensor, t| {
                if t > 0.5 {
                    Tensor::full(z.shape(), f64::NAN)
                } else {
                    Tensor::zeros(z.shape())
                }
            },
            dim: 1,
        };
        let z = Tensor::from_vec(vec![1.0]);
        let err = integrate_flow(&z, &field, 0.0, 1.0, OdeConfig::euler(10)).unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");
    }

    #[test]
    fn zero_field_density_is_standard_normal() {
        let mut rng = rng_from_seed(2);
        let z = Tensor::randn(&[4], &mut rng);
        let res = prior_logdensity(&z, &zero_field(4), OdeConfig::heun(8), 0, &mut rng).unwrap();
        let want = crate::oracle::std_normal_logpdf(z.data());
        assert!((res.log_prior - want).abs() < 1e-10);
        assert_eq!(res.probe_count, 0);
        assert_eq!(res.logdet, 0.0);
    }

    #[test]
    fn isotropic_linear_field_matches_pushforward() {
        let mut rng = rng_from_seed(3);
        for &a in &[-1.0, 0.5] {
            for &d in &[1usize, 2, 8] {
                let oracle = AnalyticLinearFlow::new(a, d);
                let mut m = Tensor::zeros(&[d, d]);
                for i in 0..d {
                    m.set2(i, i, a);
                }
                let field = LinearField::new(m);
                for _ in 0..4 {
                    let z0 = Tensor::randn(&[d], &mut rng).scale(0.5);
                    let res =
                        prior_logdensity(&z0, &field, OdeConfig::heun(64), 0, &mut rng).unwrap();
                    let want = oracle.log_prior_density(z0.data());
                    assert!(
                        (res.log_prior - want).abs() < 1e-4,
                        "a={a} d={d}: {} vs {want}",
                        res.log_prior
                    );
                }
            }
        }
    }

    #[test]
    fn exact_divergence_of_identity_field() {
        let field = FnField {
            f: |z: &Tensor, _t| z.clone(),
            dim: 3,
        };
        let z = Tensor::from_vec(vec![0.2, -0.4, 1.0]);
        let div = divergence(&field, &z, 0.0, &DivergenceAt::Exact).unwrap();
        assert!((div - 3.0).abs() < 1e-6);
    }

    #[test]
    fn divergence_of_constant_field_is_zero() {
        let field = FnField {
            f: |z: &Tensor, _t| Tensor::full(z.shape(), 1.5),
            dim: 4,
        };
        let z = Tensor::zeros(&[4]);
        let div = divergence(&field, &z, 0.3, &DivergenceAt::Exact).unwrap();
        assert!(div.abs() < 1e-9);
    }

    #[test]
    fn exact_divergence_matches_trace_of_random_linear_field() {
        let mut rng = rng_from_seed(4);
        let a = Tensor::randn(&[6, 6], &mut rng);
        let field = LinearField::new(a);
        let tr = field.trace();
        let z = Tensor::randn(&[6], &mut rng);
        let div = divergence(&field, &z, 0.0, &DivergenceAt::Exact).unwrap();
        assert!((div - tr).abs() < 1e-6, "{div} vs {tr}");
    }

    #[test]
    fn hutchinson_probe_mean_approaches_trace() {
        let mut rng = rng_from_seed(5);
        let a = Tensor::randn(&[8, 8], &mut rng).scale(0.3);
        let field = LinearField::new(a);
        let tr = field.trace();
        let z = Tensor::randn(&[8], &mut rng);
        let est = divergence_estimate(&field, &z, 0.0, 10_000, &mut rng).unwrap();
        assert!(
            (est - tr).abs() < 0.05 * tr.abs().max(1.0),
            "{est} vs {tr}"
        );
    }

    #[test]
    fn probe_is_fixed_within_one_solve() {
        // For a linear field the Hutchinson integrand εᵀAε is constant in
        // (z, t), so a solve with one fixed probe must accumulate exactly
        // ℓ₁ = εᵀAε for that single ε. Redrawing per step would average
        // several draws and break the equality.
        let mut rng = rng_from_seed(6);
        let a = Tensor::randn(&[5, 5], &mut rng);
        let field = LinearField::new(a.clone());
        let z0 = Tensor::randn(&[5], &mut rng);

        let mut solve_rng = rng_from_seed(77);
        let res =
            prior_logdensity(&z0, &field, OdeConfig::heun(32), 1, &mut solve_rng).unwrap();

        let mut replay = rng_from_seed(77);
        let eps = draw_probes(ProbeKind::Gaussian, 1, 5, &mut replay).remove(0);
        let col = eps.reshape(&[5, 1]).unwrap();
        let aeps = a.matmul(&col).unwrap().reshape(&[5]).unwrap();
        let quad = eps.dot(&aeps).unwrap();
        assert!(
            (res.logdet - quad).abs() < 1e-6,
            "ℓ₁ {} vs εᵀAε {quad}",
            res.logdet
        );
        assert_eq!(res.probe_count, 1);
    }

    #[test]
    fn probe_estimates_are_unbiased_across_seeds() {
        let mut rng = rng_from_seed(7);
        let a = Tensor::randn(&[6, 6], &mut rng).scale(0.4);
        let field = LinearField::new(a);
        let mut err_sum = 0.0;
        let points = 32;
        for p in 0..points {
            let z = Tensor::randn(&[6], &mut rng);
            let exact = divergence(&field, &z, 0.0, &DivergenceAt::Exact).unwrap();
            let mut mean = 0.0;
            let reps = 2000;
            for s in 0..reps {
                let mut prng = rng_from_seed(1000 + p * 100 + s);
                mean += divergence_estimate(&field, &z, 0.0, 1, &mut prng).unwrap();
            }
            mean /= reps as f64;
            err_sum += mean - exact;
        }
        let bias = err_sum / points as f64;
        assert!(bias.abs() < 0.05, "bias {bias}");
    }

    #[test]
    fn flow_round_trip_returns_start() {
        // Mildly nonlinear field; 1 → 0 then 0 → 1 must invert.
        let field = FnField {
            f: |z: &Tensor, t| z.map(|v| 0.4 * (v + t).tanh()),
            dim: 3,
        };
        let mut rng = rng_from_seed(8);
        let z1 = Tensor::randn(&[3], &mut rng);
        let z0 = integrate_flow(&z1, &field, 1.0, 0.0, OdeConfig::heun(128)).unwrap();
        let back = integrate_flow(&z0, &field, 0.0, 1.0, OdeConfig::heun(128)).unwrap();
        for (a, b) in back.data().iter().zip(z1.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }
}
