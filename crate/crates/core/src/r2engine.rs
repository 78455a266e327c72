//! Monte Carlo R² for geostatistical models, the partial coefficient of
//! determination and per-site prevalence standard errors.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::glm::baseline_variation;
use crate::mcml::GlgmParams;
use crate::posterior::PosteriorDraws;

pub const BATCHES: usize = 20;

/// A Monte Carlo average with its batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// `None` when fewer than two draws are available.
    pub mc_se: Option<f64>,
}

/// Batch-means standard error of the mean with up to 20 batches.
///
/// Trailing draws that do not fill a batch are left out of the batch
/// variance.
pub fn batch_means_se(x: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let a = BATCHES.min(n);
    let b = n / a;
    let means: Vec<f64> = x.chunks_exact(b).take(a).map(|c| c.iter().sum::<f64>() / b as f64).collect();
    let grand = means.iter().sum::<f64>() / a as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (a - 1) as f64;
    Some((var / a as f64).sqrt())
}

fn check_draws(data: &Dataset, draws: &PosteriorDraws) -> Result<()> {
    if draws.n_sites() != data.n() {
        return Err(Error::Mismatch(format!("draws cover {} sites, dataset has {}", draws.n_sites(), data.n())));
    }
    if draws.is_empty() {
        return Err(Error::InvalidData("no posterior draws".into()));
    }
    Ok(())
}

fn offset(data: &Dataset, params: &GlgmParams) -> Result<DVector<f64>> {
    if params.beta.len() != data.p() {
        return Err(Error::Mismatch(format!("{} coefficients for {} design columns", params.beta.len(), data.p())));
    }
    Ok(&data.design * DVector::from_column_slice(&params.beta))
}

/// `Σ_i c_V(y_i, g⁻¹(d_iᵀβ + s_ij))` for each draw `j`.
pub fn inner_sums(data: &Dataset, family: &Family, params: &GlgmParams, draws: &PosteriorDraws) -> Result<Vec<f64>> {
    check_draws(data, draws)?;
    let eta0 = offset(data, params)?;
    let obs = data.observed_means(family);
    draws
        .draws
        .row_iter()
        .map(|s| {
            let mut total = 0.0;
            for i in 0..obs.len() {
                let mu = family.link_invert(eta0[i] + s[i])?;
                total += family.cv(obs[i], mu)?;
            }
            Ok(total)
        })
        .collect()
}

fn summarise(x: &[f64]) -> McEstimate {
    McEstimate { mean: x.iter().sum::<f64>() / x.len() as f64, mc_se: batch_means_se(x) }
}

/// Expected total variation over the draws.
pub fn total_variation_mc(
    data: &Dataset,
    family: &Family,
    params: &GlgmParams,
    draws: &PosteriorDraws,
) -> Result<McEstimate> {
    Ok(summarise(&inner_sums(data, family, params, draws)?))
}

pub fn r2_glgm_mc(data: &Dataset, family: &Family, params: &GlgmParams, draws: &PosteriorDraws) -> Result<McEstimate> {
    let denom = baseline_variation(data, family)?;
    let tv = total_variation_mc(data, family, params, draws)?;
    Ok(McEstimate { mean: 1.0 - tv.mean / denom, mc_se: tv.mc_se.map(|se| se / denom) })
}

/// Partial R² of the covariates given the spatial effect.
///
/// `without` must be an intercept-only model for the same sites.
pub fn partial_r2(
    data: &Dataset,
    family: &Family,
    with: &GlgmParams,
    draws_with: &PosteriorDraws,
    without: &GlgmParams,
    draws_without: &PosteriorDraws,
) -> Result<McEstimate> {
    if without.beta.len() != 1 {
        return Err(Error::Mismatch(format!("model without covariates has {} coefficients", without.beta.len())));
    }
    let a = total_variation_mc(data, family, with, draws_with)?;
    let b = total_variation_mc(&data.intercept_only(), family, without, draws_without)?;
    if !(b.mean > 0.0) {
        return Err(Error::UndefinedR2);
    }
    let mc_se = match (a.mc_se, b.mc_se) {
        (Some(sa), Some(sb)) => Some(((sa / b.mean).powi(2) + (a.mean * sb / (b.mean * b.mean)).powi(2)).sqrt()),
        _ => None,
    };
    Ok(McEstimate { mean: 1.0 - a.mean / b.mean, mc_se })
}

/// Per-site mean over draws of `g⁻¹(d_iᵀβ + s_ij)`.
pub fn prevalence_mean(data: &Dataset, family: &Family, params: &GlgmParams, draws: &PosteriorDraws) -> Result<Vec<f64>> {
    Ok(prevalence_moments(data, family, params, draws)?.0)
}

/// Per-site standard deviation over draws of `g⁻¹(d_iᵀβ + s_ij)`.
pub fn prevalence_se(data: &Dataset, family: &Family, params: &GlgmParams, draws: &PosteriorDraws) -> Result<Vec<f64>> {
    Ok(prevalence_moments(data, family, params, draws)?.1)
}

fn prevalence_moments(
    data: &Dataset,
    family: &Family,
    params: &GlgmParams,
    draws: &PosteriorDraws,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_draws(data, draws)?;
    let eta0 = offset(data, params)?;
    let b = draws.len();
    let mut mean = Vec::with_capacity(data.n());
    let mut sd = Vec::with_capacity(data.n());
    for (i, col) in draws.draws.column_iter().enumerate() {
        let p = col.iter().map(|s| family.link_invert(eta0[i] + s)).collect::<Result<Vec<f64>>>()?;
        // shifted by the first value so identical draws give exactly 0
        let k = p[0];
        let d = p.iter().map(|x| x - k).sum::<f64>() / b as f64;
        let v = if b > 1 { p.iter().map(|x| (x - k - d).powi(2)).sum::<f64>() / (b - 1) as f64 } else { 0.0 };
        mean.push(k + d);
        sd.push(v.sqrt());
    }
    Ok((mean, sd))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSe {
    pub site_id: String,
    pub x1: f64,
    pub x2: f64,
    pub se_without: f64,
    pub se_with: f64,
    /// `1 − se_with / se_without`; `NaN` if `se_without` is 0.
    pub rel_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeComparison {
    pub sites: Vec<SiteSe>,
    pub max_relative_reduction: f64,
}

impl SeComparison {
    pub fn new(data: &Dataset, se_with: &[f64], se_without: &[f64]) -> Result<Self> {
        if se_with.len() != data.n() || se_without.len() != data.n() {
            return Err(Error::Mismatch("standard errors do not match the dataset".into()));
        }
        let sites: Vec<SiteSe> = (0..data.n())
            .map(|i| SiteSe {
                site_id: data.ids[i].clone(),
                x1: data.coords[i][0],
                x2: data.coords[i][1],
                se_without: se_without[i],
                se_with: se_with[i],
                rel_reduction: if se_without[i] > 0.0 { 1.0 - se_with[i] / se_without[i] } else { f64::NAN },
            })
            .collect();
        let max_relative_reduction =
            sites.iter().map(|s| s.rel_reduction).filter(|r| r.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        Ok(SeComparison { sites, max_relative_reduction })
    }

    /// Fraction of sites where the covariate model's SE is not larger.
    pub fn fraction_reduced(&self) -> f64 {
        let k = self.sites.iter().filter(|s| s.se_with <= s.se_without).count();
        k as f64 / self.sites.len() as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["site_id", "x1", "x2", "se_without", "se_with", "rel_reduction"])?;
        for s in &self.sites {
            w.write_record([
                s.site_id.clone(),
                s.x1.to_string(),
                s.x2.to_string(),
                s.se_without.to_string(),
                s.se_with.to_string(),
                s.rel_reduction.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Report {
    pub family: String,
    pub r2_glm: f64,
    pub r2_glgm: f64,
    pub r2_glgm_mc_se: Option<f64>,
    /// Closed-form value, linear gaussian models only.
    pub r2_glgm_exact: Option<f64>,
    pub partial_r2: Option<f64>,
    pub partial_r2_mc_se: Option<f64>,
    pub baseline_variation: f64,
    pub expected_total_variation: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    /// Hash of the producing configuration, if any.
    #[serde(default)]
    pub config_hash: String,
}

impl R2Report {
    /// Two-column `quantity,value` table; missing values are empty.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let rows = [
            ("family", self.family.clone()),
            ("r2_glm", self.r2_glm.to_string()),
            ("r2_glgm", self.r2_glgm.to_string()),
            ("r2_glgm_mc_se", opt(self.r2_glgm_mc_se)),
            ("r2_glgm_exact", opt(self.r2_glgm_exact)),
            ("partial_r2", opt(self.partial_r2)),
            ("partial_r2_mc_se", opt(self.partial_r2_mc_se)),
            ("baseline_variation", self.baseline_variation.to_string()),
            ("expected_total_variation", self.expected_total_variation.to_string()),
            ("B", self.b.to_string()),
            ("seed", self.seed.to_string()),
            ("config_hash", self.config_hash.clone()),
        ];
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["quantity", "value"])?;
        for (k, v) in rows {
            w.write_record([k, v.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{fit_glm, r2_glm};
    use crate::gpcov::CovParams;
    use crate::lingeo::{linear_posterior, r2_linear_glgm};
    use crate::posterior::{sample_posterior, SamplerSchedule};
    use crate::sim::test_support::{simulate_linear, simulate_logistic};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn fake_draws(draws: DMatrix<f64>) -> PosteriorDraws {
        let n = draws.ncols();
        PosteriorDraws {
            draws,
            acceptance_rate: 1.0,
            burn_in: 0,
            thin: 1,
            seed: 0,
            step_size: 0.0,
            mode: DVector::zeros(n),
        }
    }

    #[test]
    fn batch_means_independent_data() {
        // Alternating ±1 in batches of equal size: batch means are all 0.
        let x: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(batch_means_se(&x), Some(0.0));
        assert_eq!(batch_means_se(&[3.0]), None);
        // Fewer draws than batches reduces to the iid standard error.
        let y = [1.0, 2.0, 3.0, 4.0];
        let iid = (y.iter().map(|v| (v - 2.5f64).powi(2)).sum::<f64>() / 3.0 / 4.0).sqrt();
        assert!((batch_means_se(&y).unwrap() - iid).abs() < 1e-15);
    }

    #[test]
    fn zero_draws_give_glm_rss() {
        let (data, _, cov) = simulate_linear(25, 0.5, 0.3, 0.2, 1);
        let fam = Family::gaussian();
        let glm = fit_glm(&data, &fam).unwrap();
        let params = GlgmParams::new(glm.beta.clone(), cov);
        let draws = fake_draws(DMatrix::zeros(7, 25));
        let tv = total_variation_mc(&data, &fam, &params, &draws).unwrap();
        let rss: f64 = data.y.iter().zip(&glm.fitted_means).map(|(y, m)| (y - m).powi(2)).sum();
        assert!((tv.mean - rss).abs() < 1e-9 * rss);
        assert!(tv.mc_se.unwrap() < 1e-12 * rss);
        let r2 = r2_glgm_mc(&data, &fam, &params, &draws).unwrap();
        assert!((r2.mean - r2_glm(&data, &fam, &glm).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn single_draw_has_no_se() {
        let (data, beta, cov) = simulate_linear(10, 0.5, 0.3, 0.2, 2);
        let s = DMatrix::from_fn(1, 10, |_, i| 0.1 * i as f64);
        let draws = fake_draws(s.clone());
        let params = GlgmParams::new(beta.clone(), cov);
        let tv = total_variation_mc(&data, &Family::gaussian(), &params, &draws).unwrap();
        let eta = &data.design * DVector::from_vec(beta);
        let direct: f64 = (0..10).map(|i| (data.y[i] - eta[i] - s[(0, i)]).powi(2)).sum();
        assert!((tv.mean - direct).abs() < 1e-12);
        assert_eq!(tv.mc_se, None);
    }

    #[test]
    fn gaussian_mc_matches_closed_form() {
        let (data, beta, cov) = simulate_linear(30, 0.8, 0.25, 0.3, 3);
        let fam = Family::gaussian();
        let params = GlgmParams::new(beta.clone(), cov);
        let draws = sample_posterior(&data, &fam, &params, &SamplerSchedule::new(2_000, 5, 2_000, 9)).unwrap();
        let tv = total_variation_mc(&data, &fam, &params, &draws).unwrap();
        let exact = linear_posterior(&data, &beta, &cov).unwrap().expected_total_variation;
        assert!((tv.mean - exact).abs() < 3.0 * tv.mc_se.unwrap(), "{} vs {exact}", tv.mean);
        let r2 = r2_glgm_mc(&data, &fam, &params, &draws).unwrap();
        let r2_exact = r2_linear_glgm(&data, &beta, &cov).unwrap();
        assert!((r2.mean - r2_exact).abs() < 3.0 * r2.mc_se.unwrap());
    }

    #[test]
    fn identical_models_partial_zero() {
        let (data, _) = simulate_logistic(40, &[0.3], 20, 4);
        let fam = Family::binomial();
        let params = GlgmParams::new(vec![0.3], CovParams::new(0.4, 0.3, 0.0).unwrap());
        let sched = SamplerSchedule::new(1_000, 4, 1_000, 11);
        let draws = sample_posterior(&data, &fam, &params, &sched).unwrap();
        let pr = partial_r2(&data, &fam, &params, &draws, &params, &draws).unwrap();
        assert!(pr.mean.abs() < 1e-14);
        let other = sample_posterior(&data, &fam, &params, &sched.with_seed(12)).unwrap();
        let pr = partial_r2(&data, &fam, &params, &draws, &params, &other).unwrap();
        assert!(pr.mean.abs() < 3.0 * pr.mc_se.unwrap(), "{pr:?}");
    }

    #[test]
    fn partial_requires_intercept_only_reference() {
        let (data, beta) = simulate_logistic(20, &[0.1, 0.5], 10, 5);
        let params = GlgmParams::new(beta, CovParams::new(0.4, 0.3, 0.0).unwrap());
        let draws = fake_draws(DMatrix::zeros(3, 20));
        assert!(matches!(
            partial_r2(&data, &Family::binomial(), &params, &draws, &params, &draws),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn prevalence_se_cases() {
        let (data, _) = simulate_logistic(2, &[0.0], 10, 6);
        let fam = Family::binomial();
        let same = fake_draws(DMatrix::from_element(50, 2, 0.3));
        let params = GlgmParams::new(vec![0.0], CovParams::new(1.0, 1.0, 0.0).unwrap());
        assert!(prevalence_se(&data, &fam, &params, &same).unwrap().iter().all(|&v| v == 0.0));

        // Site 0 near μ = 0.5, site 1 near μ = 0.02, same latent spread 0.1.
        let b = 20_000;
        let shift = [0.0, (0.02f64 / 0.98).ln()];
        let z: Vec<f64> = (0..b).map(|j| 0.1 * ((j as f64 + 0.5) / b as f64 * 2.0 - 1.0) * 3f64.sqrt()).collect();
        let draws = fake_draws(DMatrix::from_fn(b, 2, |j, i| shift[i] + z[j]));
        let se = prevalence_se(&data, &fam, &params, &draws).unwrap();
        assert!(se[0] > se[1]);
        for (i, mu) in [0.5f64, 0.02].iter().enumerate() {
            let delta = mu * (1.0 - mu) * 0.1;
            assert!((se[i] / delta - 1.0).abs() < 0.01, "{} vs {delta}", se[i]);
        }
    }

    #[test]
    fn se_comparison_summary() {
        let (data, _) = simulate_logistic(3, &[0.0], 10, 7);
        let cmp = SeComparison::new(&data, &[0.09, 0.2, 0.1], &[0.1, 0.1, 0.1]).unwrap();
        assert!((cmp.max_relative_reduction - 0.1).abs() < 1e-12);
        assert!((cmp.fraction_reduced() - 2.0 / 3.0).abs() < 1e-12);
        let mut buf = Vec::new();
        cmp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("site_id,x1,x2,se_without,se_with,rel_reduction\n"));
        assert_eq!(text.lines().count(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn batch_means_scale_equivariant(xs in proptest::collection::vec(-10.0f64..10.0, 2..300), c in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let se = batch_means_se(&xs).unwrap();
            let ys: Vec<f64> = xs.iter().map(|x| c * x + shift).collect();
            let se2 = batch_means_se(&ys).unwrap();
            prop_assert!((se2 - c * se).abs() <= 1e-9 * (1.0 + c * se));
            prop_assert!(se >= 0.0);
        }
    }
}
