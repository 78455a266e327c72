//! Synthetic geostatistical data: uniform sites in a box, a latent
//! exponential-covariance field, a linear trend and family-specific outcomes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::{Family, FamilyKind};
use crate::gpcov::{build_cov, gp_sample_with, CovParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trials {
    Fixed(u32),
    /// Inclusive range.
    Uniform(u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    /// Intercept only.
    None,
    /// Covariates `cx1 = scale·x1`, `cx2 = scale·x2`.
    Planar { scale: f64 },
    /// Independent standard-normal covariates `z1..zk`.
    Iid { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n: usize,
    /// `[xmin, xmax, ymin, ymax]`.
    pub bbox: [f64; 4],
    pub family: FamilyKind,
    pub beta: Vec<f64>,
    /// Zero disables the latent field.
    pub sigma2: f64,
    pub phi: f64,
    #[serde(default)]
    pub tau2: f64,
    pub trials: Trials,
    pub trend: Trend,
}

impl SimSpec {
    /// Binomial-logit model with a planar trend over a 450 km × 460 km box,
    /// generated from the with-covariates estimates of the river-blindness
    /// analysis (coordinates and range in km).
    pub fn liberia() -> Self {
        SimSpec {
            n: 90,
            bbox: [200.0, 650.0, 480.0, 940.0],
            family: FamilyKind::Binomial,
            beta: vec![-6.327, 2.761e-3, 4.784e-3],
            sigma2: 0.145,
            phi: 68.526,
            tau2: 0.0,
            trials: Trials::Uniform(30, 70),
            trend: Trend::Planar { scale: 1.0 },
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        match self.trend {
            Trend::None => Vec::new(),
            Trend::Planar { .. } => vec!["cx1".into(), "cx2".into()],
            Trend::Iid { count } => (1..=count).map(|k| format!("z{k}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        let [x0, x1, y0, y1] = self.bbox;
        if !(x0 < x1 && y0 < y1) || self.bbox.iter().any(|v| !v.is_finite()) {
            return bad(format!("empty bounding box {:?}", self.bbox));
        }
        if self.beta.len() != 1 + self.covariate_names().len() {
            return bad(format!(
                "{} coefficients for {} covariates plus intercept",
                self.beta.len(),
                self.covariate_names().len()
            ));
        }
        if !(self.sigma2 >= 0.0) || !(self.phi > 0.0) || !(self.tau2 >= 0.0) {
            return bad("sigma2 >= 0, phi > 0 and tau2 >= 0 are required".into());
        }
        if self.family == FamilyKind::Gaussian && !(self.tau2 > 0.0) {
            return bad("gaussian simulation needs tau2 > 0".into());
        }
        if self.family == FamilyKind::Quasi {
            return bad("quasi families cannot be simulated".into());
        }
        match self.trials {
            Trials::Fixed(0) => return bad("trials must be positive".into()),
            Trials::Uniform(lo, hi) if lo == 0 || lo > hi => return bad("invalid trials range".into()),
            _ => {}
        }
        if self.family != FamilyKind::Binomial && self.trials != Trials::Fixed(1) {
            return bad("m_i must be 1 for non-binomial families".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub data: Dataset,
    /// Realised latent field at the sites.
    pub latent: Vec<f64>,
    /// Covariate columns as written to CSV.
    pub columns: Vec<(String, Vec<f64>)>,
}

pub fn simulate(spec: &SimSpec, seed: u64) -> Result<SimOutput> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = spec.n;
    let [x0, x1, y0, y1] = spec.bbox;
    let coords: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            [x0 + (x1 - x0) * u, y0 + (y1 - y0) * v]
        })
        .collect();
    let trials: Vec<u32> = (0..n)
        .map(|_| match spec.trials {
            Trials::Fixed(m) => m,
            Trials::Uniform(lo, hi) => rng.random_range(lo..=hi),
        })
        .collect();
    let covariates: Vec<Vec<f64>> = match spec.trend {
        Trend::None => Vec::new(),
        Trend::Planar { scale } => vec![
            coords.iter().map(|c| scale * c[0]).collect(),
            coords.iter().map(|c| scale * c[1]).collect(),
        ],
        Trend::Iid { count } => {
            (0..count).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
        }
    };
    let latent: Vec<f64> = if spec.sigma2 > 0.0 {
        let cov = build_cov(&coords, &CovParams::new(spec.sigma2, spec.phi, 0.0)?)?;
        gp_sample_with(&cov, &mut rng).iter().copied().collect()
    } else {
        vec![0.0; n]
    };

    let family = Family::from_kind(spec.family)?;
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let mut eta = spec.beta[0] + latent[i];
            for (k, col) in covariates.iter().enumerate() {
                eta += spec.beta[k + 1] * col[i];
            }
            let mu = family.link().invert(eta);
            match spec.family {
                FamilyKind::Binomial => {
                    Binomial::new(trials[i] as u64, mu).map(|d| d.sample(&mut rng) as f64).map_err(|e| e.to_string())
                }
                FamilyKind::Poisson => {
                    Poisson::new(mu).map(|d| d.sample(&mut rng).round()).map_err(|e| e.to_string())
                }
                _ => Normal::new(mu, spec.tau2.sqrt()).map(|d| d.sample(&mut rng)).map_err(|e| e.to_string()),
            }
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidParams(format!("outcome distribution: {e}")))?;

    let names = spec.covariate_names();
    let columns = names.iter().cloned().zip(covariates.iter().cloned()).collect();
    let data = Dataset::new(coords, trials, y, covariates, names)?;
    Ok(SimOutput { data, latent, columns })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::gpcov::CovParams;

    /// Spatially unstructured logistic data with iid N(0,1) covariates.
    pub fn simulate_logistic(n: usize, beta: &[f64], m: u32, seed: u64) -> (Dataset, Vec<f64>) {
        let spec = SimSpec {
            n,
            bbox: [0.0, 1.0, 0.0, 1.0],
            family: FamilyKind::Binomial,
            beta: beta.to_vec(),
            sigma2: 0.0,
            phi: 1.0,
            tau2: 0.0,
            trials: Trials::Fixed(m),
            trend: Trend::Iid { count: beta.len() - 1 },
        };
        (simulate(&spec, seed).unwrap().data, beta.to_vec())
    }

    /// Linear geostatistical data on the unit square with one iid covariate.
    pub fn simulate_linear(n: usize, sigma2: f64, phi: f64, tau2: f64, seed: u64) -> (Dataset, Vec<f64>, CovParams) {
        let beta = vec![1.0, 0.7];
        let spec = SimSpec {
            n,
            bbox: [0.0, 1.0, 0.0, 1.0],
            family: FamilyKind::Gaussian,
            beta: beta.clone(),
            sigma2,
            phi,
            tau2,
            trials: Trials::Fixed(1),
            trend: Trend::Iid { count: 1 },
        };
        (simulate(&spec, seed).unwrap().data, beta, CovParams::new(sigma2, phi, tau2).unwrap())
    }
}
