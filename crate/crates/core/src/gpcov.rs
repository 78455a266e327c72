//! Isotropic exponential covariance for the latent process and the
//! Cholesky machinery shared by the downstream modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{distance, min_pairwise_distance};
use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovParams {
    /// Process variance σ².
    pub sigma2: f64,
    /// Range φ, in coordinate units.
    pub phi: f64,
    /// Nugget τ² (gaussian response only).
    #[serde(default)]
    pub tau2: f64,
}

impl CovParams {
    pub fn new(sigma2: f64, phi: f64, tau2: f64) -> Result<Self> {
        let p = CovParams { sigma2, phi, tau2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidParams(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::InvalidParams(format!("phi must be positive, got {}", self.phi)));
        }
        if !(self.tau2 >= 0.0 && self.tau2.is_finite()) {
            return Err(Error::InvalidParams(format!("tau2 must be non-negative, got {}", self.tau2)));
        }
        Ok(())
    }
}

/// `Σ` with its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovMatrix {
    pub sigma: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub log_det: f64,
    /// Diagonal jitter that was needed for the factorisation (0 if none).
    pub jitter: f64,
}

impl CovMatrix {
    pub fn n(&self) -> usize {
        self.sigma.nrows()
    }

    /// `Σ⁻¹ v` via two triangular solves.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let z = self.chol.solve_lower_triangular(v).expect("non-singular factor");
        self.chol.tr_solve_lower_triangular(&z).expect("non-singular factor")
    }

    /// Explicit `Σ⁻¹` (symmetric).
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.n();
        let linv = self
            .chol
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("non-singular factor");
        linv.transpose() * linv
    }
}

pub fn distance_matrix(coords: &[[f64; 2]]) -> DMatrix<f64> {
    let n = coords.len();
    DMatrix::from_fn(n, n, |i, j| distance(&coords[i], &coords[j]))
}

/// `exp(−d_ij / φ)`.
pub fn correlation_matrix(coords: &[[f64; 2]], phi: f64) -> DMatrix<f64> {
    distance_matrix(coords).map(|d| (-d / phi).exp())
}

/// Cholesky with diagonal jitter escalating from 1e-10·scale to 1e-6·scale.
///
/// Returns the factor and the jitter that was added.
pub fn cholesky_jittered(m: &DMatrix<f64>, scale: f64) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = m.clone().cholesky() {
        return Some((c, 0.0));
    }
    let mut jitter = JITTER_START * scale;
    while jitter <= JITTER_MAX * scale * (1.0 + 1e-12) {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(c) = a.cholesky() {
            return Some((c, jitter));
        }
        jitter *= 10.0;
    }
    None
}

pub fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `Σ_ij = σ² exp(−‖x_i − x_j‖ / φ)`, factorised.
pub fn build_cov(coords: &[[f64; 2]], params: &CovParams) -> Result<CovMatrix> {
    params.validate()?;
    let min_distance = min_pairwise_distance(coords);
    if min_distance == 0.0 {
        return Err(Error::IllConditioned { jitter: 0.0, min_distance });
    }
    let sigma = correlation_matrix(coords, params.phi) * params.sigma2;
    let Some((chol, jitter)) = cholesky_jittered(&sigma, params.sigma2) else {
        return Err(Error::IllConditioned {
            jitter: JITTER_MAX * params.sigma2,
            min_distance,
        });
    };
    let l = chol.l();
    let log_det = log_det_from_factor(&l);
    let mut sigma = sigma;
    for i in 0..sigma.nrows() {
        sigma[(i, i)] += jitter;
    }
    Ok(CovMatrix { sigma, chol: l, log_det, jitter })
}

/// One draw of the process at the covariance's sites: `L z`, `z ~ N(0, I)`.
pub fn gp_sample(cov: &CovMatrix, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    gp_sample_with(cov, &mut rng)
}

pub fn gp_sample_with<R: rand::Rng>(cov: &CovMatrix, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(cov.n(), |_, _| StandardNormal.sample(rng));
    &cov.chol * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_coords(n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.random::<f64>() * 50.0, rng.random::<f64>() * 50.0]).collect()
    }

    #[test]
    fn entry_at_one_range() {
        let c = build_cov(&[[0.0, 0.0], [6.0, 8.0]], &CovParams::new(2.0, 10.0, 0.0).unwrap()).unwrap();
        assert!((c.sigma[(0, 1)] - 2.0 * (-1f64).exp()).abs() < 1e-15);
        assert!((c.sigma[(0, 1)] - 0.73576).abs() < 1e-5);
        assert_eq!(c.sigma[(0, 0)], 2.0);
    }

    #[test]
    fn near_coincident_points_approach_sigma2() {
        let c = build_cov(&[[0.0, 0.0], [1e-9, 0.0]], &CovParams::new(1.5, 1.0, 0.0).unwrap());
        let c = c.unwrap();
        assert!((c.sigma[(0, 1)] - 1.5).abs() < 1e-8);
        assert!((c.sigma[(0, 0)] - 1.5).abs() <= c.jitter);
    }

    #[test]
    fn coincident_points_report_min_distance() {
        let err = build_cov(&[[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]], &CovParams::new(1.0, 1.0, 0.0).unwrap());
        assert!(matches!(err, Err(Error::IllConditioned { min_distance, .. }) if min_distance == 0.0));
    }

    #[test]
    fn matches_brute_force_loop() {
        let coords = random_coords(20, 3);
        let params = CovParams::new(0.7, 12.0, 0.0).unwrap();
        let c = build_cov(&coords, &params).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let dx = coords[i][0] - coords[j][0];
                let dy = coords[i][1] - coords[j][1];
                let naive = 0.7 * (-(dx * dx + dy * dy).sqrt() / 12.0).exp();
                assert!((c.sigma[(i, j)] - naive).abs() < 1e-14);
            }
        }
        let direct: f64 = c.chol.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        assert!((c.log_det - direct).abs() < 1e-12);
        let recon = &c.chol * c.chol.transpose();
        assert!((recon - &c.sigma).amax() < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(CovParams::new(0.0, 1.0, 0.0).is_err());
        assert!(CovParams::new(1.0, -1.0, 0.0).is_err());
        assert!(CovParams::new(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn sampling_determinism_and_degeneracy() {
        let coords = random_coords(15, 1);
        let c = build_cov(&coords, &CovParams::new(1.0, 5.0, 0.0).unwrap()).unwrap();
        assert_eq!(gp_sample(&c, 42), gp_sample(&c, 42));
        assert_ne!(gp_sample(&c, 42), gp_sample(&c, 43));
        let tiny = build_cov(&coords, &CovParams::new(1e-20, 5.0, 0.0).unwrap()).unwrap();
        assert!(gp_sample(&tiny, 9).amax() < 1e-8);
    }

    #[test]
    fn empirical_variance() {
        let coords = random_coords(5, 8);
        let c = build_cov(&coords, &CovParams::new(2.5, 10.0, 0.0).unwrap()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut sum2 = 0.0;
        let mut sum = 0.0;
        for _ in 0..n {
            let s = gp_sample_with(&c, &mut rng)[2];
            sum += s;
            sum2 += s * s;
        }
        let var = sum2 / n as f64 - (sum / n as f64).powi(2);
        assert!((var / 2.5 - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn longer_range_increases_covariance() {
        let coords = random_coords(10, 5);
        let a = build_cov(&coords, &CovParams::new(1.0, 5.0, 0.0).unwrap()).unwrap();
        let b = build_cov(&coords, &CovParams::new(1.0, 6.0, 0.0).unwrap()).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                if i != j {
                    assert!(b.sigma[(i, j)] > a.sigma[(i, j)]);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rigid_motion_invariance(theta in 0.0f64..6.3, tx in -100.0f64..100.0, ty in -100.0f64..100.0, seed in 0u64..500) {
            let coords = random_coords(12, seed);
            let moved: Vec<[f64; 2]> = coords
                .iter()
                .map(|c| [theta.cos() * c[0] - theta.sin() * c[1] + tx, theta.sin() * c[0] + theta.cos() * c[1] + ty])
                .collect();
            let p = CovParams::new(1.3, 9.0, 0.0).unwrap();
            let a = build_cov(&coords, &p).unwrap();
            let b = build_cov(&moved, &p).unwrap();
            prop_assert!((a.sigma - b.sigma).amax() < 1e-12);
        }
    }
}
