use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use glgm_r2::artifact::{config_hash, data_hash, sha256_hex, write_json, write_prevalence_points, FitMethod, ModelArtifact, SCHEMA_VERSION};
use glgm_r2::data::{read_csv, write_csv};
use glgm_r2::glm::{fit_glm, r2_glm};
use glgm_r2::lingeo::{fit_linear_ml, r2_linear_glgm};
use glgm_r2::mcml::{default_init, fit_mcml};
use glgm_r2::posterior::sample_posterior;
use glgm_r2::r2engine::{partial_r2, prevalence_se, r2_glgm_mc, total_variation_mc};
use glgm_r2::sim::{simulate as simulate_data, SimSpec, Trend, Trials};
use glgm_r2::{Dataset, Family, FamilyKind, GlgmParams, McmlSchedule, R2Report, SamplerSchedule, SeComparison};
use serde::Serialize;

use crate::error::{CliError, CliResult, IoContext};
use crate::{DataArgs, FamilyArg, FitArgs, Preset, R2Args, SamplerArgs, SeCompareArgs, SimulateArgs};

/// Seed offset for the chain of the model without covariates.
const WITHOUT_SEED_OFFSET: u64 = 1;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    Ok(BufWriter::new(File::create(path).at(path)?))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    Ok(BufReader::new(File::open(path).at(path)?))
}

fn load_data(args: &DataArgs, covariates: &[String]) -> CliResult<Dataset> {
    let ingested = read_csv(open(&args.data)?, covariates)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.data.display())))?;
    for w in &ingested.warnings {
        eprintln!("warning: {w}");
    }
    if ingested.data.looks_geographic() && !args.force_planar {
        return Err(CliError::Usage(format!(
            "{}: coordinates lie within [-180, 180] x [-90, 90] and look like longitude/latitude; \
             project them first or pass --force-planar",
            args.data.display()
        )));
    }
    Ok(ingested.data)
}

fn load_artifact(path: &Path) -> CliResult<ModelArtifact> {
    ModelArtifact::read(open(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn family_of(a: &ModelArtifact) -> CliResult<Family> {
    Ok(Family::from_kind(a.family)?.with_link(a.link))
}

fn schedule(s: &SamplerArgs, seed: u64) -> SamplerSchedule {
    SamplerSchedule::new(s.burn_in, s.thin, s.samples, seed)
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    config_hash: &'a str,
    seed: Option<u64>,
    /// SHA-256 of each written file.
    files: BTreeMap<String, String>,
}

/// Writes `manifest_<name>.json` next to the outputs.
fn write_manifest(dir: &Path, name: &str, command: &str, hash: &str, seed: Option<u64>, files: &[PathBuf]) -> CliResult<()> {
    let mut hashes = BTreeMap::new();
    for f in files {
        let bytes = fs::read(f).at(f)?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        hashes.insert(name, sha256_hex(&bytes));
    }
    let m = Manifest { schema_version: SCHEMA_VERSION, command, config_hash: hash, seed, files: hashes };
    let path = dir.join(format!("manifest_{name}.json"));
    write_json(&m, create(&path)?)?;
    Ok(())
}

fn unit_spec() -> SimSpec {
    SimSpec {
        n: 100,
        bbox: [0.0, 1.0, 0.0, 1.0],
        family: FamilyKind::Binomial,
        beta: vec![-2.0, 1.0],
        sigma2: 0.5,
        phi: 0.2,
        tau2: 0.0,
        trials: Trials::Fixed(50),
        trend: Trend::Iid { count: 1 },
    }
}

#[derive(Serialize)]
struct Truth<'a> {
    schema_version: u32,
    seed: u64,
    config_hash: &'a str,
    spec: &'a SimSpec,
    covariate_names: Vec<String>,
    /// Realised latent field at the sites.
    latent: &'a [f64],
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let mut spec = match (&args.preset, &args.spec) {
        (_, Some(path)) => serde_json::from_reader(open(path)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        (Some(Preset::Unit), None) => unit_spec(),
        (Some(Preset::Liberia), None) | (None, None) => SimSpec::liberia(),
    };
    if let Some(n) = args.n {
        spec.n = n;
    }
    let out = simulate_data(&spec, args.seed)?;
    let hash = config_hash(&(&spec, args.seed))?;

    let data_path = args.out_dir.join("data.csv");
    write_csv(&out.data, &out.columns, create(&data_path)?)?;
    let truth_path = args.out_dir.join("truth.json");
    let truth = Truth {
        schema_version: SCHEMA_VERSION,
        seed: args.seed,
        config_hash: &hash,
        spec: &spec,
        covariate_names: spec.covariate_names(),
        latent: &out.latent,
    };
    write_json(&truth, create(&truth_path)?)?;
    write_manifest(&args.out_dir, "simulate", "simulate", &hash, Some(args.seed), &[data_path.clone(), truth_path])?;
    println!("wrote {} sites to {}", out.data.n(), data_path.display());
    Ok(())
}

#[derive(Serialize)]
struct FitConfig<'a> {
    command: &'static str,
    family: FamilyArg,
    covariates: &'a [String],
    seed: Option<u64>,
    sampler: &'a SamplerArgs,
    max_updates: usize,
    sigma2_init: Option<f64>,
    phi_init: Option<f64>,
    require_convergence: bool,
    data_hash: String,
}

pub fn fit(args: &FitArgs) -> CliResult<()> {
    let covariates: Vec<String> = args.covariates.iter().filter(|c| !c.is_empty()).cloned().collect();
    let data = load_data(&args.input, &covariates)?;
    let family = match args.family {
        FamilyArg::Binomial => Family::binomial(),
        FamilyArg::Gaussian => Family::gaussian(),
        FamilyArg::Poisson => Family::poisson(),
    };
    let config = FitConfig {
        command: "fit",
        family: args.family,
        covariates: &covariates,
        seed: args.seed,
        sampler: &args.sampler,
        max_updates: args.max_updates,
        sigma2_init: args.sigma2_init,
        phi_init: args.phi_init,
        require_convergence: args.require_convergence,
        data_hash: data_hash(&data),
    };
    let hash = config_hash(&config)?;
    let glm = fit_glm(&data, &family)?;
    if glm.separation_warning {
        eprintln!("warning: GLM fit suggests (quasi-)separation");
    }
    let r2 = r2_glm(&data, &family, &glm)?;

    let (method, params, mcml, sched) = match family.kind() {
        FamilyKind::Gaussian => {
            let lf = fit_linear_ml(&data)?;
            if !lf.converged {
                eprintln!("warning: profile likelihood optimiser did not converge");
            }
            (FitMethod::LinearMl, GlgmParams::new(lf.beta, lf.cov), None, None)
        }
        _ => {
            let seed = args.seed.ok_or_else(|| CliError::Usage("--seed is required for Monte Carlo fits".into()))?;
            let mut init = default_init(&data, &family)?;
            if let Some(s) = args.sigma2_init {
                init.cov.sigma2 = s;
            }
            if let Some(p) = args.phi_init {
                init.cov.phi = p;
            }
            let sched = McmlSchedule {
                sampler: schedule(&args.sampler, seed),
                max_reference_updates: args.max_updates,
                require_convergence: args.require_convergence,
                ..Default::default()
            };
            let fit = fit_mcml(&data, &family, &init, &sched)?;
            if !fit.converged {
                eprintln!("warning: reference parameters still moving after {} updates", fit.reference_updates);
            }
            (FitMethod::Mcml, fit.params.clone(), Some(fit), Some(sched))
        }
    };
    let artifact = ModelArtifact {
        schema_version: SCHEMA_VERSION,
        family: family.kind(),
        link: family.link(),
        method,
        covariate_names: covariates,
        params,
        glm_beta: glm.beta,
        r2_glm: r2,
        mcml,
        schedule: sched,
        seed: args.seed,
        n_sites: data.n(),
        data_hash: data_hash(&data),
        config_hash: hash.clone(),
    };
    artifact.write(create(&args.out)?)?;
    let dir = args.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = args.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write_manifest(&dir, &format!("fit_{stem}"), "fit", &hash, args.seed, &[args.out.clone()])?;
    println!("beta = {:?}", artifact.params.beta);
    println!("sigma2 = {}, phi = {}, tau2 = {}", artifact.params.cov.sigma2, artifact.params.cov.phi, artifact.params.cov.tau2);
    Ok(())
}

#[derive(Serialize)]
struct ReportConfig<'a> {
    command: &'static str,
    artifact: &'a str,
    artifact_without: Option<&'a str>,
    seed: u64,
    sampler: &'a SamplerArgs,
    data_hash: String,
}

/// Loads the intercept-only artifact and checks it matches `data`.
fn load_without(path: &Path, data: &Dataset, family: &Family) -> CliResult<(ModelArtifact, Dataset)> {
    let a = load_artifact(path)?;
    if !a.covariate_names.is_empty() {
        return Err(CliError::Usage(format!("{}: model without covariates has covariates {:?}", path.display(), a.covariate_names)));
    }
    let reduced = data.intercept_only();
    a.check_data(&reduced)?;
    if family_of(&a)?.kind() != family.kind() {
        return Err(CliError::Usage(format!("{}: family differs from the model with covariates", path.display())));
    }
    Ok((a, reduced))
}

pub fn r2(args: &R2Args) -> CliResult<()> {
    let art = load_artifact(&args.artifact)?;
    let data = load_data(&args.input, &art.covariate_names)?;
    art.check_data(&data)?;
    let family = family_of(&art)?;
    let config = ReportConfig {
        command: "r2",
        artifact: &art.config_hash,
        artifact_without: None,
        seed: args.seed,
        sampler: &args.sampler,
        data_hash: data_hash(&data),
    };
    let without = args.artifact_without.as_deref().map(|p| load_without(p, &data, &family)).transpose()?;
    let config = ReportConfig { artifact_without: without.as_ref().map(|(a, _)| a.config_hash.as_str()), ..config };
    let hash = config_hash(&config)?;

    let glm = fit_glm(&data, &family)?;
    let sched = schedule(&args.sampler, args.seed);
    let draws = sample_posterior(&data, &family, &art.params, &sched)?;
    let tv = total_variation_mc(&data, &family, &art.params, &draws)?;
    let r2 = r2_glgm_mc(&data, &family, &art.params, &draws)?;
    let exact = match family.kind() {
        FamilyKind::Gaussian => Some(r2_linear_glgm(&data, &art.params.beta, &art.params.cov)?),
        _ => None,
    };
    let partial = match &without {
        Some((a0, d0)) => {
            let draws0 = sample_posterior(d0, &family, &a0.params, &sched.with_seed(args.seed.wrapping_add(WITHOUT_SEED_OFFSET)))?;
            Some(partial_r2(&data, &family, &art.params, &draws, &a0.params, &draws0)?)
        }
        None => None,
    };
    let report = R2Report {
        family: family.kind().name().into(),
        r2_glm: r2_glm(&data, &family, &glm)?,
        r2_glgm: r2.mean,
        r2_glgm_mc_se: r2.mc_se,
        r2_glgm_exact: exact,
        partial_r2: partial.map(|p| p.mean),
        partial_r2_mc_se: partial.and_then(|p| p.mc_se),
        baseline_variation: glgm_r2::glm::baseline_variation(&data, &family)?,
        expected_total_variation: tv.mean,
        b: draws.len(),
        seed: args.seed,
        config_hash: hash.clone(),
    };

    let json = args.out_dir.join("r2_report.json");
    write_json(&report, create(&json)?)?;
    let csv = args.out_dir.join("r2_report.csv");
    report.write_csv(create(&csv)?)?;
    let points = args.out_dir.join("prevalence_points.csv");
    write_prevalence_points(&data, create(&points)?)?;
    let mut files = vec![json, csv, points];
    if let Some(path) = &args.draws_csv {
        draws.write_csv(&data.ids, create(path)?)?;
        files.push(path.clone());
    }
    write_manifest(&args.out_dir, "r2", "r2", &hash, Some(args.seed), &files)?;

    let pct = |v: f64| format!("{:.1}%", 100.0 * v);
    println!("R2_GLM  = {}", pct(report.r2_glm));
    match report.r2_glgm_mc_se {
        Some(se) => println!("R2_GLGM = {} (MC se {})", pct(report.r2_glgm), pct(se)),
        None => println!("R2_GLGM = {}", pct(report.r2_glgm)),
    }
    if let Some(p) = report.partial_r2 {
        println!("partial R2 = {}", pct(p));
    }
    Ok(())
}

pub fn se_compare(args: &SeCompareArgs) -> CliResult<()> {
    let art = load_artifact(&args.artifact_with)?;
    let data = load_data(&args.input, &art.covariate_names)?;
    art.check_data(&data)?;
    let family = family_of(&art)?;
    let (art0, data0) = load_without(&args.artifact_without, &data, &family)?;
    let config = ReportConfig {
        command: "se-compare",
        artifact: &art.config_hash,
        artifact_without: Some(&art0.config_hash),
        seed: args.seed,
        sampler: &args.sampler,
        data_hash: data_hash(&data),
    };
    let hash = config_hash(&config)?;

    let sched = schedule(&args.sampler, args.seed);
    let draws = sample_posterior(&data, &family, &art.params, &sched)?;
    let draws0 = sample_posterior(&data0, &family, &art0.params, &sched.with_seed(args.seed.wrapping_add(WITHOUT_SEED_OFFSET)))?;
    let se_with = prevalence_se(&data, &family, &art.params, &draws)?;
    let se_without = prevalence_se(&data0, &family, &art0.params, &draws0)?;
    let cmp = SeComparison::new(&data, &se_with, &se_without)?;

    let path = args.out_dir.join("se_compare.csv");
    cmp.write_csv(create(&path)?)?;
    write_manifest(&args.out_dir, "se_compare", "se-compare", &hash, Some(args.seed), &[path])?;
    println!("standard error reduced at {:.1}% of sites", 100.0 * cmp.fraction_reduced());
    println!("largest relative reduction {:.1}%", 100.0 * cmp.max_relative_reduction);
    Ok(())
}
