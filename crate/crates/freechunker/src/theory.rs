//! Substitution-loss geometry: worst-case and expected bounds for replacing
//! a true chunk embedding with the encoder's approximation, plus Monte Carlo
//! verification of both bounds and of the spherical-cosine-law decomposition
//! they rest on.
//!
//! With alpha = angle(q, e), beta = angle(e, v) and phi the azimuth of v
//! around the e axis measured from q's tangential direction:
//!
//!   cos(q, v) = cos(alpha) cos(beta) + sin(alpha) sin(beta) cos(phi)
//!
//! The worst case is cos(phi) = -1; under a uniform azimuth the tangential
//! term shrinks by E[|cos(phi)|] = 2/pi.

use std::f64::consts::{FRAC_2_PI, PI, TAU};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("vector is not unit-norm (|v| = {0})")]
    NotUnitNorm(f64),
    #[error("dimension must be >= 3, got {0}")]
    DimensionTooSmall(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct GeometryConfig {
    /// Query-truth alignment cos(q, e).
    pub s: f64,
    /// Substitution quality cos(e, v).
    pub rho: f64,
    pub dimension: usize,
    pub trials: usize,
    pub seed: u64,
}

impl GeometryConfig {
    pub fn new(s: f64, rho: f64, trials: usize, seed: u64) -> Self {
        assert!(s.abs() <= 1.0 && rho.abs() <= 1.0);
        GeometryConfig {
            s,
            rho,
            dimension: 3,
            trials,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub s: f64,
    pub rho: f64,
    pub trials: usize,
    pub max_observed: f64,
    pub mean_observed: f64,
    pub std_observed: f64,
    pub worst_case_bound: f64,
    pub expected_bound: f64,
    /// Trials where observed loss exceeded the worst-case bound (beyond
    /// 1e-9); zero for a correct implementation.
    pub violations: usize,
    /// Empirical mean of |cos(phi)|, diagnostic against 2/pi.
    pub mean_abs_cos_phi: f64,
}

impl BoundReport {
    /// Three-sigma check of the expected bound against the sample mean.
    pub fn expected_bound_holds(&self) -> bool {
        let margin = 3.0 * self.std_observed / (self.trials as f64).sqrt();
        self.mean_observed <= self.expected_bound + margin
    }
}

fn check_unit(v: &[f64]) -> Result<(), TheoryError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(TheoryError::NotUnitNorm(norm));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// |cos(q, e) - cos(q, v)| for unit vectors.
pub fn substitution_loss(q: &[f64], e: &[f64], v: &[f64]) -> Result<f64, TheoryError> {
    check_unit(q)?;
    check_unit(e)?;
    check_unit(v)?;
    Ok((dot(q, e) - dot(q, v)).abs())
}

/// s(1 - rho) + sqrt(1 - s^2) sqrt(1 - rho^2).
pub fn worst_case_bound(s: f64, rho: f64) -> f64 {
    s * (1.0 - rho) + (1.0 - s * s).max(0.0).sqrt() * (1.0 - rho * rho).max(0.0).sqrt()
}

/// s(1 - rho) + (2/pi) sqrt(1 - s^2) sqrt(1 - rho^2).
pub fn expected_bound(s: f64, rho: f64) -> f64 {
    s * (1.0 - rho) + FRAC_2_PI * (1.0 - s * s).max(0.0).sqrt() * (1.0 - rho * rho).max(0.0).sqrt()
}

/// One sampled configuration plus the azimuth it was built with.
#[derive(Debug, Clone)]
pub struct Configuration {
    pub q: Vec<f64>,
    pub e: Vec<f64>,
    pub v: Vec<f64>,
    pub phi: f64,
}

/// Build (q, e, v) with cos(q,e) = s, cos(e,v) = rho and the given azimuth,
/// inside a random orthonormal 3-frame of R^dimension.
pub fn configuration_with_azimuth(
    cfg: &GeometryConfig,
    rng: &mut impl Rng,
    phi: f64,
) -> Result<Configuration, TheoryError> {
    if cfg.dimension < 3 {
        return Err(TheoryError::DimensionTooSmall(cfg.dimension));
    }
    let frame = random_orthonormal_frame(cfg.dimension, rng);
    let (e_ax, t_ax, u_ax) = (&frame[0], &frame[1], &frame[2]);

    let s = cfg.s;
    let rho = cfg.rho;
    let sin_a = (1.0 - s * s).max(0.0).sqrt();
    let sin_b = (1.0 - rho * rho).max(0.0).sqrt();

    let combine = |ce: f64, ct: f64, cu: f64| -> Vec<f64> {
        (0..cfg.dimension)
            .map(|i| ce * e_ax[i] + ct * t_ax[i] + cu * u_ax[i])
            .collect()
    };
    // q lies in the (e, t) plane; v's tangential part rotates by phi from t.
    let q = combine(s, sin_a, 0.0);
    let v = combine(rho, sin_b * phi.cos(), sin_b * phi.sin());
    let e = combine(1.0, 0.0, 0.0);
    Ok(Configuration { q, e, v, phi })
}

/// Sample with phi ~ Uniform[0, 2*pi).
pub fn sample_configuration(
    cfg: &GeometryConfig,
    rng: &mut impl Rng,
) -> Result<Configuration, TheoryError> {
    let phi = rng.gen_range(0.0..TAU);
    configuration_with_azimuth(cfg, rng, phi)
}

/// Gram-Schmidt on Gaussian draws; the 3-frame spans the plane the
/// construction lives in, so results are equivalent for any dimension >= 3.
fn random_orthonormal_frame(dim: usize, rng: &mut impl Rng) -> [Vec<f64>; 3] {
    let gauss = |rng: &mut dyn rand::RngCore| -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
    };
    let mut frame: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for k in 0..3 {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
            for prev in frame.iter().take(k) {
                let proj = dot(&v, prev);
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= proj * pi;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for vi in &mut v {
                    *vi /= norm;
                }
                frame[k] = v;
                break;
            }
        }
    }
    frame
}

/// Run `cfg.trials` random-azimuth trials and report observed losses against
/// both bounds.
pub fn monte_carlo_verify(cfg: &GeometryConfig) -> Result<BoundReport, TheoryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wc = worst_case_bound(cfg.s, cfg.rho);
    let exp = expected_bound(cfg.s, cfg.rho);
    let mut max = 0.0f64;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut sum_abs_cos = 0.0f64;
    let mut violations = 0usize;
    for _ in 0..cfg.trials {
        let c = sample_configuration(cfg, &mut rng)?;
        let eps = substitution_loss(&c.q, &c.e, &c.v)?;
        if eps > wc + 1e-9 {
            violations += 1;
        }
        max = max.max(eps);
        sum += eps;
        sum_sq += eps * eps;
        sum_abs_cos += c.phi.cos().abs();
    }
    let n = cfg.trials as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(BoundReport {
        s: cfg.s,
        rho: cfg.rho,
        trials: cfg.trials,
        max_observed: max,
        mean_observed: mean,
        std_observed: var.sqrt(),
        worst_case_bound: wc,
        expected_bound: exp,
        violations,
        mean_abs_cos_phi: sum_abs_cos / n,
    })
}

/// Loss at the adversarial azimuth phi = pi (the worst-case configuration).
pub fn adversarial_loss(s: f64, rho: f64, seed: u64) -> Result<f64, TheoryError> {
    let cfg = GeometryConfig::new(s, rho, 1, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = configuration_with_azimuth(&cfg, &mut rng, PI)?;
    substitution_loss(&c.q, &c.e, &c.v)
}
