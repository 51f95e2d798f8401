//! Time parameterizations: logit-normal timestep sampling with shift, the
//! logSNR/coefficient bijection, shifted curves, induced densities on the
//! logSNR axis, and bridge-path target velocities.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `α² = sigmoid(λ)`, `σ² = 1 - α²`, so `α² + σ² = 1` holds bitwise.
pub fn logsnr_to_coeffs(lambda: f64) -> (f64, f64) {
    let alpha_sq = sigmoid(lambda);
    let sigma_sq = 1.0 - alpha_sq;
    (alpha_sq.sqrt(), sigma_sq.sqrt())
}

/// Interpolation coefficient of the bridge path, `β(0) = 0`, `β(1) = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BetaPath {
    Linear,
    /// `β(t) = t^p` for `p > 0`.
    Power(f64),
}

impl BetaPath {
    pub fn beta(&self, t: f64) -> f64 {
        match self {
            BetaPath::Linear => t,
            BetaPath::Power(p) => t.powf(*p),
        }
    }

    pub fn beta_dot(&self, t: f64) -> f64 {
        match self {
            BetaPath::Linear => 1.0,
            BetaPath::Power(p) => p * t.powf(p - 1.0),
        }
    }
}

/// Logit-normal timestep sampler plus the `(α_t, σ_t, λ(t))` family.
///
/// The normalized time `s = t / T` maps to logSNR through the
/// bridge-induced curve `λ(s) = 2·logit(1 - s)`, so `s → 0` is clean data
/// and `s → 1` is pure noise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Schedule {
    /// Location of the logit-normal (larger shifts mass toward later steps).
    pub mu: f64,
    /// Spread of the logit-normal. `0` degenerates to a single timestep.
    pub sigma: f64,
    /// Maximum diffusion step `T` (use `1.0` for continuous time).
    pub t_max: f64,
    pub beta_path: BetaPath,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            mu: 1.0,
            sigma: 1.0,
            t_max: 1.0,
            beta_path: BetaPath::Linear,
        }
    }
}

impl Schedule {
    pub fn new(mu: f64, sigma: f64, t_max: f64) -> Result<Self> {
        if sigma < 0.0 || t_max <= 0.0 {
            return Err(Error::invalid(format!(
                "schedule wants sigma ≥ 0 and T > 0, got sigma={sigma}, T={t_max}"
            )));
        }
        Ok(Schedule {
            mu,
            sigma,
            t_max,
            beta_path: BetaPath::Linear,
        })
    }

    /// Draw `t = T · sigmoid(u)`, `u ~ N(mu, sigma²)`. With `sigma = 0`
    /// this is a Dirac at `T · sigmoid(mu)`.
    pub fn sample_timestep(&self, rng: &mut Rng) -> f64 {
        self.t_max * self.sample_normalized(rng)
    }

    /// Normalized draw `s = t / T ∈ (0, 1)`.
    pub fn sample_normalized(&self, rng: &mut Rng) -> f64 {
        let u = self.mu + self.sigma * standard_normal(rng);
        sigmoid(u)
    }

    /// Floor to the discrete grid, clamped to `[0, T-1]`.
    pub fn discretize(&self, t: f64) -> usize {
        let max_idx = (self.t_max as usize).saturating_sub(1);
        (t.floor() as usize).min(max_idx)
    }

    /// Bridge-induced logSNR at normalized time `s`.
    pub fn logsnr(&self, s: f64) -> f64 {
        2.0 * logit(1.0 - s.clamp(1e-12, 1.0 - 1e-12))
    }

    /// `(α, σ)` of the normalized forward process at normalized time `s`.
    pub fn coeffs(&self, s: f64) -> (f64, f64) {
        logsnr_to_coeffs(self.logsnr(s))
    }

    /// Forward-noise a latent to normalized time `s`: `α_s z + σ_s ε`.
    pub fn forward_noise(&self, z: &Tensor, s: f64, rng: &mut Rng) -> Tensor {
        let (alpha, sigma) = self.coeffs(s);
        let eps = Tensor::randn(z.shape(), rng);
        z.scale(alpha).add(&eps.scale(sigma)).expect("same shape")
    }
}

fn standard_normal(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Closed-form logit-normal density on `(0, 1)`.
pub fn logitnormal_pdf(s: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(0.0 < s && s < 1.0) {
        return Err(Error::invalid(format!(
            "logit-normal pdf wants s in (0,1), got {s}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid(format!(
            "logit-normal pdf wants sigma > 0, got {sigma}"
        )));
    }
    let z = logit(s) - mu;
    Ok((1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt()))
        * (1.0 / (s * (1.0 - s)))
        * (-z * z / (2.0 * sigma * sigma)).exp())
}

/// Strictly monotone differentiable map from `t ∈ [0, 1]` to logSNR values,
/// with an additive shift `δ`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogSnrCurve {
    pub base: CurveKind,
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum CurveKind {
    /// `λ(t) = a·t + b`.
    Affine { a: f64, b: f64 },
    /// `λ(t) = logit(t)` (clamped away from the endpoints).
    Logit,
    /// Bridge-induced curve `λ(t) = 2·logit(1 - t)`.
    Bridge,
}

impl LogSnrCurve {
    pub fn affine(a: f64, b: f64) -> Self {
        LogSnrCurve {
            base: CurveKind::Affine { a, b },
            delta: 0.0,
        }
    }

    pub fn logit() -> Self {
        LogSnrCurve {
            base: CurveKind::Logit,
            delta: 0.0,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let t = t.clamp(1e-9, 1.0 - 1e-9);
        let base = match self.base {
            CurveKind::Affine { a, b } => a * t + b,
            CurveKind::Logit => logit(t),
            CurveKind::Bridge => 2.0 * logit(1.0 - t),
        };
        base + self.delta
    }

    pub fn deriv(&self, t: f64) -> f64 {
        let t = t.clamp(1e-9, 1.0 - 1e-9);
        match self.base {
            CurveKind::Affine { a, .. } => a,
            CurveKind::Logit => 1.0 / (t * (1.0 - t)),
            CurveKind::Bridge => -2.0 / ((1.0 - t) * t),
        }
    }

    /// `λ_δ(t) = λ(t) + δ`; `shift(0)` is the identity on curves.
    pub fn shift(&self, delta: f64) -> Self {
        LogSnrCurve {
            base: self.base,
            delta: self.delta + delta,
        }
    }
}

/// One row of an induced-density evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LambdaDensityPoint {
    pub t: f64,
    pub lambda: f64,
    pub density: f64,
}

/// Density induced on the logSNR axis by uniform-t sampling:
/// `p_λ(λ) = |dt/dλ|`, evaluated by central differences on a uniform
/// t-grid. Fails (naming the interval) if the curve is not strictly
/// monotone on the grid.
pub fn induced_lambda_density(
    curve: &LogSnrCurve,
    grid_points: usize,
) -> Result<Vec<LambdaDensityPoint>> {
    if grid_points < 8 {
        return Err(Error::invalid("induced density wants ≥ 8 grid points"));
    }
    let n = grid_points;
    let ts: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let lams: Vec<f64> = ts.iter().map(|&t| curve.eval(t)).collect();

    let increasing = lams[1] > lams[0];
    for i in 1..n {
        let ok = if increasing {
            lams[i] > lams[i - 1]
        } else {
            lams[i] < lams[i - 1]
        };
        if !ok {
            return Err(Error::invalid(format!(
                "logSNR curve is not strictly monotone on t ∈ [{:.6}, {:.6}]",
                ts[i - 1],
                ts[i]
            )));
        }
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
        let dt_dlam = (ts[hi] - ts[lo]) / (lams[hi] - lams[lo]);
        out.push(LambdaDensityPoint {
            t: ts[i],
            lambda: lams[i],
            density: dt_dlam.abs(),
        });
    }
    Ok(out)
}

/// Trapezoid integral of an induced density over its λ grid.
pub fn lambda_density_integral(points: &[LambdaDensityPoint]) -> f64 {
    let mut total = 0.0;
    for w in points.windows(2) {
        total += 0.5 * (w[1].density + w[0].density) * (w[1].lambda - w[0].lambda).abs();
    }
    total
}

/// Bridge-path target velocity `u_t = β̇(t) (z1 - z0)`.
pub fn target_velocity(z0: &Tensor, z1: &Tensor, t: f64, path: BetaPath) -> Result<Tensor> {
    if z0.shape() != z1.shape() {
        return Err(Error::ShapeMismatch {
            op: "target_velocity",
            left: z0.shape().to_vec(),
            right: z1.shape().to_vec(),
        });
    }
    Ok(z1.sub(z0)?.scale(path.beta_dot(t)))
}

/// Point on the bridge path, `z_t = (1 - β(t)) z0 + β(t) z1`.
pub fn bridge_point(z0: &Tensor, z1: &Tensor, t: f64, path: BetaPath) -> Result<Tensor> {
    let b = path.beta(t);
    z0.scale(1.0 - b).add(&z1.scale(b))
}

/// Rescale a t-time velocity to λ-time: `u_λ = u_t / λ̇(t)`.
pub fn velocity_time_rescale(u_t: &Tensor, lambda_dot: f64) -> Result<Tensor> {
    if lambda_dot == 0.0 {
        return Err(Error::invalid(
            "velocity rescale undefined on a stationary logSNR curve (λ̇ = 0)",
        ));
    }
    Ok(u_t.scale(1.0 / lambda_dot))
}

/// `u_t` of the normalized forward process, written in `(α, σ)` terms:
/// `u_t = ½ λ̇(t) (α σ² z - σ α² ε)`.
pub fn ut_from_alpha_sigma(z: &Tensor, eps: &Tensor, lambda: f64, lambda_dot: f64) -> Result<Tensor> {
    let (alpha, sigma) = logsnr_to_coeffs(lambda);
    let a = z.scale(alpha * sigma * sigma);
    let b = eps.scale(sigma * alpha * alpha);
    Ok(a.sub(&b)?.scale(0.5 * lambda_dot))
}

/// `u_λ` of the same process: `u_λ = ½ (α σ² z - σ α² ε)`.
pub fn ulambda_from_alpha_sigma(z: &Tensor, eps: &Tensor, lambda: f64) -> Result<Tensor> {
    let (alpha, sigma) = logsnr_to_coeffs(lambda);
    let a = z.scale(alpha * sigma * sigma);
    let b = eps.scale(sigma * alpha * alpha);
    Ok(a.sub(&b)?.scale(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn coeffs_at_special_logsnr_values() {
        let (a, s) = logsnr_to_coeffs(0.0);
        assert!((a * a - 0.5).abs() < 1e-15);
        assert!((s * s - 0.5).abs() < 1e-15);
        let (a, _) = logsnr_to_coeffs(3.0f64.ln());
        assert!((a * a - 0.75).abs() < 1e-15);
    }

    #[test]
    fn coeffs_sum_is_exactly_one() {
        let mut rng = rng_from_seed(2);
        use rand::Rng as _;
        for _ in 0..100_000 {
            let lam: f64 = rng.gen_range(-20.0..20.0);
            let (a, s) = logsnr_to_coeffs(lam);
            // σ² is computed as 1 - α², so only the sqrt round trip rounds.
            assert!((a * a + s * s - 1.0).abs() <= 4.0 * f64::EPSILON, "λ = {lam}");
        }
    }

    #[test]
    fn degenerate_sigma_is_dirac() {
        let sched = Schedule::new(0.7, 0.0, 10.0).unwrap();
        let mut rng = rng_from_seed(3);
        let want = 10.0 * sigmoid(0.7);
        for _ in 0..32 {
            assert_eq!(sched.sample_timestep(&mut rng), want);
        }
    }

    #[test]
    fn sampler_median_matches_sigmoid_mu() {
        let sched = Schedule::new(0.0, 1.0, 1.0).unwrap();
        let mut rng = rng_from_seed(4);
        let n = 1_000_000;
        let below = (0..n)
            .filter(|_| sched.sample_normalized(&mut rng) < 0.5)
            .count();
        let frac = below as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "median fraction {frac}");
    }

    #[test]
    fn larger_mu_shifts_mass_later() {
        let mut rng = rng_from_seed(5);
        let s0 = Schedule::new(0.0, 1.0, 1.0).unwrap();
        let s1 = Schedule::new(1.0, 1.0, 1.0).unwrap();
        let n = 200_000;
        let mean0: f64 = (0..n).map(|_| s0.sample_normalized(&mut rng)).sum::<f64>() / n as f64;
        let mean1: f64 = (0..n).map(|_| s1.sample_normalized(&mut rng)).sum::<f64>() / n as f64;
        assert!(mean1 > mean0 + 0.05, "mean0 {mean0} mean1 {mean1}");
    }

    #[test]
    fn logitnormal_pdf_closed_form_point() {
        // s = 0.5, μ = 0, σ = 1: logit(0.5) = 0, so pdf = 4/√(2π).
        let got = logitnormal_pdf(0.5, 0.0, 1.0).unwrap();
        let want = 4.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(logitnormal_pdf(0.0, 0.0, 1.0).is_err());
        assert!(logitnormal_pdf(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn logitnormal_pdf_integrates_to_one() {
        // Trapezoid quadrature with 10⁴ interior nodes.
        let n = 10_000;
        let mut total = 0.0;
        let h = 1.0 / (n as f64 + 1.0);
        let mut prev = logitnormal_pdf(h, 0.3, 0.8).unwrap();
        for i in 2..=n + 1 {
            let s = i as f64 * h;
            let cur = logitnormal_pdf(s.min(1.0 - 1e-12), 0.3, 0.8).unwrap();
            total += 0.5 * (prev + cur) * h;
            prev = cur;
        }
        assert!((total - 1.0).abs() < 1e-6, "integral {total}");
    }

    #[test]
    fn sampler_histogram_matches_pdf() {
        let (mu, sigma) = (0.5, 1.0);
        let sched = Schedule::new(mu, sigma, 1.0).unwrap();
        let mut rng = rng_from_seed(6);
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
        assert!(l1 < 0.02, "L1 distance {l1}");
    }

    #[test]
    fn affine_curve_has_constant_induced_density() {
        let curve = LogSnrCurve::affine(-4.0, 2.0);
        let pts = induced_lambda_density(&curve, 1024).unwrap();
        let mean = pts.iter().map(|p| p.density).sum::<f64>() / pts.len() as f64;
        assert!((mean - 0.25).abs() < 1e-9, "density {mean}");
        let var = pts
            .iter()
            .map(|p| (p.density - mean) * (p.density - mean))
            .sum::<f64>()
            / pts.len() as f64;
        assert!(var < 1e-8, "variance {var}");
    }

    #[test]
    fn logit_curve_density_concentrates_at_zero() {
        // dt/dλ = sigmoid(λ)·sigmoid(-λ) analytically.
        let curve = LogSnrCurve::logit();
        let pts = induced_lambda_density(&curve, 1024).unwrap();
        let mut worst = 0.0f64;
        for p in &pts {
            let analytic = sigmoid(p.lambda) * sigmoid(-p.lambda);
            worst = worst.max((p.density - analytic).abs());
        }
        assert!(worst < 1e-3, "max deviation {worst}");
        let var = {
            let mean = pts.iter().map(|p| p.density).sum::<f64>() / pts.len() as f64;
            pts.iter()
                .map(|p| (p.density - mean) * (p.density - mean))
                .sum::<f64>()
                / pts.len() as f64
        };
        assert!(var > 1e-3, "logit curve density should be non-constant");
        let peak = pts
            .iter()
            .max_by(|a, b| a.density.total_cmp(&b.density))
            .unwrap();
        assert!(peak.lambda.abs() < 0.1, "peak at λ = {}", peak.lambda);
    }

    #[test]
    fn induced_density_integrates_to_one() {
        // The midpoint grid covers 1 - 1/n of the t-mass, so the grid must
        // be fine enough for the 1e-4 budget.
        for curve in [LogSnrCurve::affine(3.0, -1.0), LogSnrCurve::logit()] {
            let pts = induced_lambda_density(&curve, 16_384).unwrap();
            let integral = lambda_density_integral(&pts);
            assert!((integral - 1.0).abs() < 1e-4, "integral {integral}");
        }
    }

    #[test]
    fn non_monotone_curve_is_rejected_with_interval() {
        // A parabola opening downward is not monotone on [0, 1].
        let curve = LogSnrCurve {
            base: CurveKind::Affine { a: 0.0, b: 0.0 },
            delta: 0.0,
        };
        // Affine with a = 0 is constant, which violates strictness.
        let err = induced_lambda_density(&curve, 64).unwrap_err().to_string();
        assert!(err.contains("monotone"), "{err}");
    }

    #[test]
    fn target_velocity_cases() {
        let z0 = Tensor::from_vec(vec![0.0]);
        let z1 = Tensor::from_vec(vec![2.0]);
        for t in [0.0, 0.3, 0.9] {
            let u = target_velocity(&z0, &z1, t, BetaPath::Linear).unwrap();
            assert_eq!(u.data(), &[2.0]);
        }
        let same = target_velocity(&z1, &z1, 0.5, BetaPath::Linear).unwrap();
        assert_eq!(same.data(), &[0.0]);
        // β(t) = t²: β̇(0.5) = 1.
        let u = target_velocity(&z0, &z1, 0.5, BetaPath::Power(2.0)).unwrap();
        assert_eq!(u.data(), &[2.0]);
    }

    #[test]
    fn velocity_rescale_identity_and_error() {
        let u = Tensor::from_vec(vec![4.0]);
        assert_eq!(velocity_time_rescale(&u, 1.0).unwrap().data(), &[4.0]);
        assert_eq!(velocity_time_rescale(&u, 2.0).unwrap().data(), &[2.0]);
        assert!(velocity_time_rescale(&u, 0.0).is_err());
        // Round trip is the identity.
        let back = velocity_time_rescale(&u, 0.5).unwrap().scale(0.5);
        assert_eq!(back.data(), u.data());
    }

    #[test]
    fn ut_equals_lambda_dot_ulambda() {
        let mut rng = rng_from_seed(8);
        let curve = LogSnrCurve::logit();
        for _ in 0..32 {
            use rand::Rng as _;
            let t: f64 = rng.gen_range(0.05..0.95);
            let lam = curve.eval(t);
            let lam_dot = curve.deriv(t);
            let z = Tensor::randn(&[6], &mut rng);
            let eps = Tensor::randn(&[6], &mut rng);
            let ut = ut_from_alpha_sigma(&z, &eps, lam, lam_dot).unwrap();
            let ul = ulambda_from_alpha_sigma(&z, &eps, lam).unwrap();
            let recon = ul.scale(lam_dot);
            for (a, b) in ut.data().iter().zip(recon.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shift_zero_is_identity_on_curves() {
        let curve = LogSnrCurve::logit();
        let shifted = curve.shift(0.0);
        for i in 0..1024 {
            let t = (i as f64 + 0.5) / 1024.0;
            assert_eq!(curve.eval(t), shifted.eval(t));
        }
    }
}
