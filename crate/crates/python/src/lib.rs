use std::fs::File;

use glgm_r2::data::read_csv;
use glgm_r2::glm::{fit_glm, r2_glm as core_r2_glm};
use glgm_r2::lingeo::{fit_linear_ml as core_fit_linear_ml, r2_linear_glgm as core_r2_linear_glgm};
use glgm_r2::mcml::{default_init, fit_mcml as core_fit_mcml};
use glgm_r2::posterior::sample_posterior;
use glgm_r2::r2engine::{partial_r2 as core_partial_r2, prevalence_se as core_prevalence_se, r2_glgm_mc};
use glgm_r2::sim::{simulate as core_simulate, SimSpec};
use glgm_r2::{CovParams, Family, GlgmParams, McmlSchedule, SamplerSchedule};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: glgm_r2::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn family(name: &str) -> PyResult<Family> {
    match name {
        "binomial" => Ok(Family::binomial()),
        "poisson" => Ok(Family::poisson()),
        "gaussian" => Ok(Family::gaussian()),
        other => Err(PyValueError::new_err(format!("unknown family '{other}'"))),
    }
}

fn params(beta: Vec<f64>, sigma2: f64, phi: f64, tau2: f64) -> PyResult<GlgmParams> {
    Ok(GlgmParams::new(beta, CovParams::new(sigma2, phi, tau2).map_err(py_err)?))
}

/// Geostatistical dataset: coordinates, trials, responses and a design with
/// a leading intercept column.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Dataset(glgm_r2::Dataset);

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (coords, trials, y, covariates = Vec::new(), names = Vec::new()))]
    fn new(
        coords: Vec<(f64, f64)>,
        trials: Vec<u32>,
        y: Vec<f64>,
        covariates: Vec<Vec<f64>>,
        names: Vec<String>,
    ) -> PyResult<Self> {
        let coords = coords.into_iter().map(|(a, b)| [a, b]).collect();
        glgm_r2::Dataset::new(coords, trials, y, covariates, names).map(Dataset).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, covariates = Vec::new()))]
    fn read_csv(path: &str, covariates: Vec<String>) -> PyResult<Self> {
        let file = File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        read_csv(file, &covariates).map(|ing| Dataset(ing.data)).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn coords(&self) -> Vec<(f64, f64)> {
        self.0.coords.iter().map(|c| (c[0], c[1])).collect()
    }

    #[getter]
    fn trials(&self) -> Vec<u32> {
        self.0.trials.clone()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.0.y.clone()
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.0.covariate_names.clone()
    }

    fn intercept_only(&self) -> Self {
        Dataset(self.0.intercept_only())
    }
}

/// Closed-form c_V between means `a` and `b`.
#[pyfunction]
fn c_v(family_name: &str, a: f64, b: f64) -> PyResult<f64> {
    family(family_name)?.cv(a, b).map_err(py_err)
}

/// The built-in 90-site binomial configuration as JSON.
#[pyfunction]
fn liberia_spec() -> String {
    serde_json::to_string(&SimSpec::liberia()).unwrap()
}

/// Simulates a dataset from a JSON spec.
#[pyfunction]
fn simulate(spec_json: &str, seed: u64) -> PyResult<Dataset> {
    let spec: SimSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    core_simulate(&spec, seed).map(|out| Dataset(out.data)).map_err(py_err)
}

/// Fitted coefficients and R² of the non-spatial GLM.
#[pyfunction]
#[pyo3(signature = (data, family_name = "binomial"))]
fn fit_glm_r2(data: &Dataset, family_name: &str) -> PyResult<(Vec<f64>, f64)> {
    let fam = family(family_name)?;
    let fit = fit_glm(&data.0, &fam).map_err(py_err)?;
    let r2 = core_r2_glm(&data.0, &fam, &fit).map_err(py_err)?;
    Ok((fit.beta.clone(), r2))
}

/// Maximum likelihood fit of the linear geostatistical model as
/// `(beta, sigma2, phi, tau2)`.
#[pyfunction]
fn fit_linear_ml(data: &Dataset) -> PyResult<(Vec<f64>, f64, f64, f64)> {
    let fit = core_fit_linear_ml(&data.0).map_err(py_err)?;
    Ok((fit.beta, fit.cov.sigma2, fit.cov.phi, fit.cov.tau2))
}

#[pyfunction]
#[pyo3(signature = (data, beta, sigma2, phi, tau2))]
fn r2_linear_glgm(data: &Dataset, beta: Vec<f64>, sigma2: f64, phi: f64, tau2: f64) -> PyResult<f64> {
    let cov = CovParams::new(sigma2, phi, tau2).map_err(py_err)?;
    core_r2_linear_glgm(&data.0, &beta, &cov).map_err(py_err)
}

/// Monte Carlo maximum likelihood fit of a binomial model; the fit is
/// returned as JSON.
#[pyfunction]
#[pyo3(signature = (data, seed, burn_in = 2_000, thin = 5, samples = 1_000))]
fn fit_mcml(data: &Dataset, seed: u64, burn_in: usize, thin: usize, samples: usize) -> PyResult<String> {
    let fam = Family::binomial();
    let init = default_init(&data.0, &fam).map_err(py_err)?;
    let schedule = McmlSchedule { sampler: SamplerSchedule::new(burn_in, thin, samples, seed), ..Default::default() };
    let fit = core_fit_mcml(&data.0, &fam, &init, &schedule).map_err(py_err)?;
    Ok(serde_json::to_string(&fit).unwrap())
}

/// Posterior draws of the latent field, `samples` rows of `n` values.
#[pyfunction]
#[pyo3(signature = (data, family_name, beta, sigma2, phi, tau2, seed, burn_in = 2_000, thin = 5, samples = 1_000))]
#[allow(clippy::too_many_arguments)]
fn posterior_draws(
    data: &Dataset,
    family_name: &str,
    beta: Vec<f64>,
    sigma2: f64,
    phi: f64,
    tau2: f64,
    seed: u64,
    burn_in: usize,
    thin: usize,
    samples: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let fam = family(family_name)?;
    let p = params(beta, sigma2, phi, tau2)?;
    let draws = sample_posterior(&data.0, &fam, &p, &SamplerSchedule::new(burn_in, thin, samples, seed)).map_err(py_err)?;
    Ok(draws.draws.row_iter().map(|r| r.iter().copied().collect()).collect())
}

/// Monte Carlo R² of a geostatistical model as `(estimate, mc_se)`.
#[pyfunction]
#[pyo3(signature = (data, family_name, beta, sigma2, phi, tau2, seed, burn_in = 2_000, thin = 5, samples = 1_000))]
#[allow(clippy::too_many_arguments)]
fn r2_glgm(
    data: &Dataset,
    family_name: &str,
    beta: Vec<f64>,
    sigma2: f64,
    phi: f64,
    tau2: f64,
    seed: u64,
    burn_in: usize,
    thin: usize,
    samples: usize,
) -> PyResult<(f64, Option<f64>)> {
    let fam = family(family_name)?;
    let p = params(beta, sigma2, phi, tau2)?;
    let draws = sample_posterior(&data.0, &fam, &p, &SamplerSchedule::new(burn_in, thin, samples, seed)).map_err(py_err)?;
    let est = r2_glgm_mc(&data.0, &fam, &p, &draws).map_err(py_err)?;
    Ok((est.mean, est.mc_se))
}

/// Partial R² of the covariates given fitted `(beta, sigma2, phi)` for the
/// models with and without them, as `(estimate, mc_se)`.
#[pyfunction]
#[pyo3(signature = (data, with_params, without_params, seed, burn_in = 2_000, thin = 5, samples = 1_000))]
fn partial_r2(
    data: &Dataset,
    with_params: (Vec<f64>, f64, f64),
    without_params: (Vec<f64>, f64, f64),
    seed: u64,
    burn_in: usize,
    thin: usize,
    samples: usize,
) -> PyResult<(f64, Option<f64>)> {
    let fam = Family::binomial();
    let with = params(with_params.0, with_params.1, with_params.2, 0.0)?;
    let without = params(without_params.0, without_params.1, without_params.2, 0.0)?;
    let d0 = data.0.intercept_only();
    let sched = SamplerSchedule::new(burn_in, thin, samples, seed);
    let dw = sample_posterior(&data.0, &fam, &with, &sched).map_err(py_err)?;
    let dn = sample_posterior(&d0, &fam, &without, &sched.with_seed(seed.wrapping_add(1))).map_err(py_err)?;
    let est = core_partial_r2(&data.0, &fam, &with, &dw, &without, &dn).map_err(py_err)?;
    Ok((est.mean, est.mc_se))
}

/// Per-site posterior standard deviation of the prevalence.
#[pyfunction]
#[pyo3(signature = (data, beta, sigma2, phi, seed, burn_in = 2_000, thin = 5, samples = 1_000))]
#[allow(clippy::too_many_arguments)]
fn prevalence_se(
    data: &Dataset,
    beta: Vec<f64>,
    sigma2: f64,
    phi: f64,
    seed: u64,
    burn_in: usize,
    thin: usize,
    samples: usize,
) -> PyResult<Vec<f64>> {
    let fam = Family::binomial();
    let p = params(beta, sigma2, phi, 0.0)?;
    let draws = sample_posterior(&data.0, &fam, &p, &SamplerSchedule::new(burn_in, thin, samples, seed)).map_err(py_err)?;
    core_prevalence_se(&data.0, &fam, &p, &draws).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "glgm_r2")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(c_v, m)?)?;
    m.add_function(wrap_pyfunction!(liberia_spec, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_glm_r2, m)?)?;
    m.add_function(wrap_pyfunction!(fit_linear_ml, m)?)?;
    m.add_function(wrap_pyfunction!(r2_linear_glgm, m)?)?;
    m.add_function(wrap_pyfunction!(fit_mcml, m)?)?;
    m.add_function(wrap_pyfunction!(posterior_draws, m)?)?;
    m.add_function(wrap_pyfunction!(r2_glgm, m)?)?;
    m.add_function(wrap_pyfunction!(partial_r2, m)?)?;
    m.add_function(wrap_pyfunction!(prevalence_se, m)?)?;
    Ok(())
}
