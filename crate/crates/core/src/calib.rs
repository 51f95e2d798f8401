//! Analytical calibration lab: closed-form Gaussian mutual-information
//! curves, shift scans for the separable-null invariance and the
//! shared-factor logarithmic drift, and the likelihood-vs-generation
//! mismatch demonstration.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::likelihood::{single_block_score, CondBlockModel, SingleBlockScore};
use crate::schedule::logsnr_to_coeffs;
use crate::Rng;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

// Public signatures use nalgebra vectors/matrices; callers get the exact
// version through this re-export.
pub use nalgebra;

/// Full-covariance Gaussian with cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::invalid("covariance shape mismatch"));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
        Ok(Gaussian { mean, cov, chol })
    }

    pub fn isotropic(mean: DVector<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_det_cov(&self) -> f64 {
        2.0 * self.chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn log_density(&self, z: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        let diff = z - &self.mean;
        let solved = self.chol.solve(&diff);
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_det_cov() + diff.dot(&solved))
    }

    pub fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        let eps = Tensor::randn(&[self.dim()], rng);
        let eps = DVector::from_column_slice(eps.data());
        &self.mean + self.chol.l() * eps
    }

    /// `KL(self ‖ other)` with the mean / trace / log-det split reported.
    pub fn kl_to(&self, other: &Gaussian) -> KlBreakdown {
        let d = self.dim() as f64;
        let sigma_q = &self.cov;
        let trace_term = other.chol.solve(sigma_q).trace();
        let mean_diff = &other.mean - &self.mean;
        let mean_term = mean_diff.dot(&other.chol.solve(&mean_diff));
        let logdet_term = other.log_det_cov() - self.log_det_cov();
        KlBreakdown {
            trace_term,
            mean_term,
            dim_term: -d,
            logdet_term,
            total: 0.5 * (trace_term + mean_term - d + logdet_term),
        }
    }
}

/// `KL = ½ (trace + mean − d + logdet)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct KlBreakdown {
    pub trace_term: f64,
    pub mean_term: f64,
    pub dim_term: f64,
    pub logdet_term: f64,
    pub total: f64,
}

/// Mixture of full-covariance Gaussians.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub components: Vec<Gaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(Error::invalid("mixture wants matching weights/components"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("mixture weights must be a distribution"));
        }
        Ok(GaussianMixture {
            weights,
            components,
        })
    }

    pub fn log_density(&self, z: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_density(z))
            .collect();
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
    }

    pub fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        use rand::Rng as _;
        let mut u = rng.gen::<f64>();
        for (w, c) in self.weights.iter().zip(&self.components) {
            u -= w;
            if u <= 0.0 {
                return c.sample(rng);
            }
        }
        self.components.last().unwrap().sample(rng)
    }

    /// Mixture mean `Σ π_m μ_m`.
    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.components[0].dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            acc += &c.mean * *w;
        }
        acc
    }
}

/// Linear-Gaussian shared-factor world `z = A g + ξ`.
#[derive(Clone, Debug)]
pub struct SharedFactorWorld {
    /// Observed latent dimension.
    pub d: usize,
    /// Shared-factor dimension.
    pub r: usize,
    /// Observation map `[d, r]`.
    pub a: DMatrix<f64>,
    /// Factor covariance `[r, r]`.
    pub sigma_g: DMatrix<f64>,
    /// Residual covariance `[d, d]`.
    pub sigma_u: DMatrix<f64>,
}

impl SharedFactorWorld {
    /// The default observation map: identical rows, so every observed
    /// dimension sees the same factor and the effective SNR grows with d.
    pub fn identical_rows(d: usize, r: usize, coupling: f64, sigma_g2: f64, sigma_u2: f64) -> Self {
        SharedFactorWorld {
            d,
            r,
            a: DMatrix::from_element(d, r, coupling),
            sigma_g: DMatrix::identity(r, r) * sigma_g2,
            sigma_u: DMatrix::identity(d, d) * sigma_u2,
        }
    }

    /// Effective information about the shared factor at coefficients
    /// `(α, σ)`, evaluated in the factor basis:
    /// `½ logdet(I_r + α² Σ_g^{1/2} Aᵀ (α² Σ_u + σ² I)⁻¹ A Σ_g^{1/2})`.
    pub fn gaussian_mi(&self, alpha: f64, sigma: f64) -> Result<f64> {
        let noise = &self.sigma_u * (alpha * alpha)
            + DMatrix::identity(self.d, self.d) * (sigma * sigma);
        let noise_chol = Cholesky::new(noise)
            .ok_or_else(|| Error::invalid("singular noise covariance"))?;
        let g_sqrt = sym_sqrt(&self.sigma_g)?;
        let a_l = &self.a * g_sqrt;
        let solved = noise_chol.solve(&a_l);
        let inner = DMatrix::identity(self.r, self.r) + a_l.transpose() * solved * (alpha * alpha);
        let inner_chol =
            Cholesky::new(inner).ok_or_else(|| Error::invalid("MI inner matrix not PD"))?;
        Ok(inner_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }

    /// MI at a shifted logSNR value.
    pub fn gaussian_mi_at_logsnr(&self, lambda: f64) -> Result<f64> {
        let (alpha, sigma) = logsnr_to_coeffs(lambda);
        self.gaussian_mi(alpha, sigma)
    }
}

/// Symmetric PSD square root by eigendecomposition; tiny negative
/// eigenvalues are clamped, genuinely negative ones are rejected.
fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-9 {
            return Err(Error::invalid("covariance is not positive semidefinite"));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// One row of a shift scan.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ShiftPoint {
    pub dim: usize,
    pub delta_star: f64,
    pub objective: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LogLawFit {
    /// `δ*(d) = a ln d + b`.
    pub a: f64,
    pub b: f64,
    pub r_squared: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ShiftScan {
    pub points: Vec<ShiftPoint>,
    pub log_fit: Option<LogLawFit>,
    /// Objective values over the full grid, row per dimension.
    pub table: Vec<(usize, Vec<(f64, f64)>)>,
}

/// Scan `argmax_δ J_d(δ)` per dimension over an explicit δ grid and fit the
/// logarithmic law `δ*(d) = a ln d + b` when at least two dims are present.
pub fn scan_optimal_shift(
    objective: &dyn Fn(usize, f64) -> f64,
    dims: &[usize],
    delta_grid: &[f64],
) -> Result<ShiftScan> {
    if delta_grid.is_empty() || dims.is_empty() {
        return Err(Error::invalid("shift scan wants non-empty dims and grid"));
    }
    let mut points = Vec::with_capacity(dims.len());
    let mut table = Vec::with_capacity(dims.len());
    for &d in dims {
        let mut best = (delta_grid[0], f64::NEG_INFINITY);
        let mut row = Vec::with_capacity(delta_grid.len());
        for &delta in delta_grid {
            let j = objective(d, delta);
            row.push((delta, j));
            if j > best.1 {
                best = (delta, j);
            }
        }
        points.push(ShiftPoint {
            dim: d,
            delta_star: best.0,
            objective: best.1,
        });
        table.push((d, row));
    }
    let log_fit = if dims.len() >= 2 {
        Some(fit_log_law(&points))
    } else {
        None
    };
    Ok(ShiftScan {
        points,
        log_fit,
        table,
    })
}

/// Least squares of `δ*` against `ln d`.
pub fn fit_log_law(points: &[ShiftPoint]) -> LogLawFit {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| (p.dim as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.delta_star).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let b = my - a * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let pred = a * x + b;
            (y - pred) * (y - pred)
        })
        .sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    LogLawFit { a, b, r_squared }
}

/// Objective of the separable-null family `J_d(δ) = a_d · j(δ) + b_d`.
pub fn separable_objective(
    profile: impl Fn(f64) -> f64 + 'static,
    scale: impl Fn(usize) -> f64 + 'static,
    offset: impl Fn(usize) -> f64 + 'static,
) -> impl Fn(usize, f64) -> f64 {
    move |d, delta| scale(d) * profile(delta) + offset(d)
}

/// Calibration objective for the shared-factor family: shifted-schedule MI
/// at a fixed target time, scored by closeness to a target information
/// level (the "appropriate regime" reading of the optimal shift).
pub fn mi_calibration_objective(
    worlds: Vec<(usize, SharedFactorWorld)>,
    lambda_star: f64,
    target_nats: f64,
) -> impl Fn(usize, f64) -> f64 {
    move |d, delta| {
        let world = worlds
            .iter()
            .find(|(dim, _)| *dim == d)
            .map(|(_, w)| w)
            .expect("world for dimension");
        match world.gaussian_mi_at_logsnr(lambda_star + delta) {
            Ok(mi) => -(mi - target_nats) * (mi - target_nats),
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

/// Exact mean displacement `‖μ̄_p − μ_{m*}‖` of a mixture against its
/// triangle bound `Σ_{m≠m*} π_m ‖μ_m − μ_{m*}‖`.
pub fn mean_displacement_bound(
    mixture: &GaussianMixture,
    m_star: usize,
) -> Result<(f64, f64)> {
    if m_star >= mixture.components.len() {
        return Err(Error::invalid(format!(
            "component index {m_star} out of range"
        )));
    }
    let mu_star = &mixture.components[m_star].mean;
    let exact = (mixture.mean() - mu_star).norm();
    let bound: f64 = mixture
        .weights
        .iter()
        .zip(&mixture.components)
        .enumerate()
        .filter(|(m, _)| *m != m_star)
        .map(|(_, (w, c))| w * (&c.mean - mu_star).norm())
        .sum();
    Ok((exact, bound))
}

/// World for the good-generation / poor-score demonstration.
#[derive(Clone, Debug)]
pub struct MixtureDemo {
    pub prior: GaussianMixture,
    pub posterior: Gaussian,
    /// Index of the mode the posterior concentrates on.
    pub m_star: usize,
    /// Euclidean radius of the decoder-good balls around mode centers.
    pub good_radius: f64,
    /// Upper bound `B` on the synthetic decoder term.
    pub decoder_bound: f64,
    /// Posterior mass held by the tube (instantiates the density
    /// threshold ρ of the super-level set).
    pub tube_mass: f64,
}

impl MixtureDemo {
    /// Synthetic decoder log-likelihood, bounded above by `decoder_bound`.
    pub fn log_decoder(&self, z: &DVector<f64>) -> f64 {
        let diff = z - &self.prior.components[self.m_star].mean;
        self.decoder_bound - diff.norm_squared()
    }

    pub fn in_good_region(&self, z: &DVector<f64>) -> bool {
        self.prior
            .components
            .iter()
            .any(|c| (z - &c.mean).norm() <= self.good_radius)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MismatchReport {
    /// Prior mass inside the decoder-good region (Monte Carlo).
    pub coverage: f64,
    /// Local log-density gap `min_{z ∈ tube} [log q(z) − log p(z)]`.
    pub delta: f64,
    /// `B − Δ`.
    pub score_bound: f64,
    /// Measured single-block score of the demo world.
    pub measured: SingleBlockScore,
    /// Full Gaussian KL of the posterior against its own mode, split into
    /// terms.
    pub kl_to_mode: KlBreakdown,
    pub samples: usize,
}

struct DemoBlockModel<'a> {
    demo: &'a MixtureDemo,
}

impl CondBlockModel for DemoBlockModel<'_> {
    fn sample_posterior(&self, rng: &mut Rng) -> Result<Tensor> {
        let z = self.demo.posterior.sample(rng);
        Ok(Tensor::from_vec(z.iter().copied().collect()))
    }

    fn log_posterior(&self, z: &Tensor) -> Result<f64> {
        Ok(self
            .demo
            .posterior
            .log_density(&DVector::from_column_slice(z.data())))
    }

    fn log_cond_prior(&self, z: &Tensor, _rng: &mut Rng) -> Result<f64> {
        Ok(self
            .demo
            .prior
            .log_density(&DVector::from_column_slice(z.data())))
    }

    fn log_decoder(&self, z: &Tensor) -> Result<f64> {
        Ok(self.demo.log_decoder(&DVector::from_column_slice(z.data())))
    }
}

/// Evaluate the demo: prior coverage of the good region, the local gap Δ on
/// the posterior tube, the `B − Δ` score bound against the measured score,
/// and the KL term split.
pub fn mismatch_demo(demo: &MixtureDemo, samples: usize, rng: &mut Rng) -> Result<MismatchReport> {
    // (i) coverage by Monte Carlo over the prior.
    let mut hits = 0usize;
    for _ in 0..samples {
        if demo.in_good_region(&demo.prior.sample(rng)) {
            hits += 1;
        }
    }
    let coverage = hits as f64 / samples as f64;

    // (ii) local gap on the posterior tube: the tube is the q-density
    // super-level set holding `tube_mass` of the posterior, realized here
    // through the empirical log-density quantile.
    let mut draws: Vec<(f64, f64)> = (0..samples)
        .map(|_| {
            let z = demo.posterior.sample(rng);
            let log_q = demo.posterior.log_density(&z);
            (log_q, log_q - demo.prior.log_density(&z))
        })
        .collect();
    draws.sort_by(|a, b| a.0.total_cmp(&b.0));
    let cut = ((1.0 - demo.tube_mass) * samples as f64).floor() as usize;
    let delta = draws[cut.min(samples - 1)..]
        .iter()
        .map(|(_, gap)| *gap)
        .fold(f64::INFINITY, f64::min);

    // (iii) measured score against the bound.
    let model = DemoBlockModel { demo };
    let measured = single_block_score(&model, samples, rng)?;

    // (iv) KL split against the concentrated mode.
    let kl_to_mode = demo.posterior.kl_to(&demo.prior.components[demo.m_star]);

    Ok(MismatchReport {
        coverage,
        delta,
        score_bound: demo.decoder_bound - delta,
        measured,
        kl_to_mode,
        samples,
    })
}
