//! Geostatistical datasets and their CSV representation.
//!
//! Input CSV columns: `id, x1, x2, m, y` plus any named covariate columns.
//! A header row is required and missing values are rejected.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expfam::{Family, FamilyKind};

/// Minimum number of sites for model fitting and R² computations.
pub const MIN_SITES: usize = 3;

pub const REQUIRED_COLUMNS: [&str; 5] = ["id", "x1", "x2", "m", "y"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    /// Binomial denominators; 1 for gaussian and poisson responses.
    pub trials: Vec<u32>,
    pub y: Vec<f64>,
    /// Design matrix with an explicit leading intercept column.
    pub design: DMatrix<f64>,
    /// Names of the non-intercept design columns.
    pub covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from raw parts, prepending the intercept column.
    ///
    /// Checks shapes, finiteness, distinct coordinates and full column rank.
    /// The minimum site count is checked by [`Dataset::check_fit_ready`].
    pub fn new(
        coords: Vec<[f64; 2]>,
        trials: Vec<u32>,
        y: Vec<f64>,
        covariates: Vec<Vec<f64>>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = coords.len();
        if n == 0 {
            return Err(Error::InvalidData("no observations".into()));
        }
        if trials.len() != n || y.len() != n {
            return Err(Error::InvalidData(format!(
                "length mismatch: {n} coordinates, {} trials, {} outcomes",
                trials.len(),
                y.len()
            )));
        }
        if covariates.len() != covariate_names.len() {
            return Err(Error::InvalidData("covariate names do not match columns".into()));
        }
        for (name, col) in covariate_names.iter().zip(&covariates) {
            if col.len() != n {
                return Err(Error::InvalidData(format!("covariate {name} has {} rows", col.len())));
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("covariate {name} non-finite at row {i}")));
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("outcome non-finite at row {i}")));
        }
        if let Some(i) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::InvalidData(format!("coordinate non-finite at row {i}")));
        }
        if let Some(i) = trials.iter().position(|&m| m == 0) {
            return Err(Error::InvalidData(format!("m must be positive (row {i})")));
        }
        let p = covariates.len() + 1;
        let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { covariates[j - 1][i] });
        let ids = (1..=n).map(|i| i.to_string()).collect();
        let data = Dataset { ids, coords, trials, y, design, covariate_names };
        data.check_coordinates()?;
        data.check_rank()?;
        Ok(data)
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n() {
            return Err(Error::InvalidData("id count does not match rows".into()));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    /// The same sites with an intercept-only design.
    pub fn intercept_only(&self) -> Dataset {
        Dataset {
            ids: self.ids.clone(),
            coords: self.coords.clone(),
            trials: self.trials.clone(),
            y: self.y.clone(),
            design: DMatrix::from_element(self.n(), 1, 1.0),
            covariate_names: Vec::new(),
        }
    }

    /// Observed outcomes on the mean scale (`y / m` for binomial).
    pub fn observed_means(&self, family: &Family) -> Vec<f64> {
        match family.kind() {
            FamilyKind::Binomial => {
                self.y.iter().zip(&self.trials).map(|(y, &m)| y / m as f64).collect()
            }
            _ => self.y.clone(),
        }
    }

    pub fn min_distance(&self) -> f64 {
        min_pairwise_distance(&self.coords)
    }

    fn check_coordinates(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.n());
        for (i, c) in self.coords.iter().enumerate() {
            if !seen.insert((c[0].to_bits(), c[1].to_bits())) {
                return Err(Error::InvalidData(format!(
                    "duplicate coordinates ({}, {}) at row {i}",
                    c[0], c[1]
                )));
            }
        }
        Ok(())
    }

    fn check_rank(&self) -> Result<()> {
        let (n, p) = self.design.shape();
        if p > n {
            return Err(Error::InvalidData(format!("{p} design columns for {n} rows")));
        }
        // Column-scaled so that covariates in large units do not mask rank deficiency.
        let mut scaled = self.design.clone();
        for mut col in scaled.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        let sv = scaled.singular_values();
        let max = sv.max();
        let min = sv.min();
        if !(max > 0.0) || min <= 1e-10 * max {
            return Err(Error::InvalidData("design matrix is not of full column rank".into()));
        }
        Ok(())
    }

    /// Family-specific checks on outcomes.
    pub fn check_family(&self, family: &Family) -> Result<()> {
        match family.kind() {
            FamilyKind::Binomial => {
                for (i, (&y, &m)) in self.y.iter().zip(&self.trials).enumerate() {
                    if y.fract() != 0.0 || y < 0.0 || y > m as f64 {
                        return Err(Error::InvalidData(format!(
                            "binomial outcome {y} at row {i} not an integer in [0, {m}]"
                        )));
                    }
                }
            }
            FamilyKind::Poisson => {
                if let Some(i) = self.y.iter().position(|&y| y < 0.0 || y.fract() != 0.0) {
                    return Err(Error::InvalidData(format!(
                        "poisson outcome at row {i} is not a non-negative integer"
                    )));
                }
            }
            FamilyKind::Gaussian => {}
            FamilyKind::Quasi => {
                let (lo, hi) = family.mean_domain();
                if let Some(i) = self.y.iter().position(|&y| y < lo || y > hi) {
                    return Err(Error::InvalidData(format!("outcome at row {i} outside mean domain")));
                }
            }
        }
        Ok(())
    }

    /// Checks everything a model fit needs: site count and family constraints.
    pub fn check_fit_ready(&self, family: &Family) -> Result<()> {
        if self.n() < MIN_SITES {
            return Err(Error::InvalidData(format!(
                "{} sites; at least {MIN_SITES} are required",
                self.n()
            )));
        }
        self.check_family(family)
    }

    /// Whether every coordinate lies in the longitude/latitude box.
    pub fn looks_geographic(&self) -> bool {
        self.coords
            .iter()
            .all(|c| (-180.0..=180.0).contains(&c[0]) && (-90.0..=90.0).contains(&c[1]))
    }
}

pub fn distance(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn min_pairwise_distance(coords: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            best = best.min(distance(&coords[i], &coords[j]));
        }
    }
    best
}

/// Result of reading a CSV file.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: Dataset,
    pub warnings: Vec<String>,
}

/// Reads the CSV schema; `covariates` name the columns entering the design
/// after the intercept (coordinate columns may be reused).
pub fn read_csv<R: Read>(reader: R, covariates: &[String]) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    for col in REQUIRED_COLUMNS {
        if !index.contains_key(col) {
            return Err(Error::InvalidData(format!("missing required column '{col}'")));
        }
    }
    let mut cov_idx = Vec::with_capacity(covariates.len());
    for name in covariates {
        match index.get(name.as_str()) {
            Some(&i) => cov_idx.push(i),
            None => return Err(Error::InvalidData(format!("unknown covariate column '{name}'"))),
        }
    }

    let mut ids = Vec::new();
    let mut coords = Vec::new();
    let mut trials = Vec::new();
    let mut y = Vec::new();
    let mut cols = vec![Vec::new(); covariates.len()];
    let mut warnings = Vec::new();

    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 2; // 1-based, after the header
        let field = |name: &str| -> Result<&str> {
            let v = rec.get(index[name]).unwrap_or("");
            if v.is_empty() || v.eq_ignore_ascii_case("na") || v.eq_ignore_ascii_case("nan") {
                return Err(Error::InvalidData(format!("missing value at row {row}, column '{name}'")));
            }
            Ok(v)
        };
        let num = |name: &str| -> Result<f64> {
            let s = field(name)?;
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::InvalidData(format!("bad number '{s}' at row {row}, column '{name}'")))
        };
        ids.push(field("id")?.to_string());
        coords.push([num("x1")?, num("x2")?]);
        let m_str = field("m")?;
        let m = m_str
            .parse::<u32>()
            .ok()
            .filter(|&m| m > 0)
            .ok_or_else(|| Error::InvalidData(format!("m must be a positive integer at row {row}, got '{m_str}'")))?;
        trials.push(m);
        y.push(num("y")?);
        for (k, name) in covariates.iter().enumerate() {
            cols[k].push(num(name)?);
        }
    }

    let mut seen = HashSet::new();
    for id in &ids {
        if !seen.insert(id.as_str()) {
            warnings.push(format!("duplicate site id '{id}'"));
        }
    }
    let data = Dataset::new(coords, trials, y, cols, covariates.to_vec())?.with_ids(ids)?;
    Ok(Ingested { data, warnings })
}

/// Writes the dataset in the input schema; `extra` columns are appended.
pub fn write_csv<W: Write>(data: &Dataset, extra: &[(String, Vec<f64>)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    header.extend(extra.iter().map(|(n, _)| n.as_str()));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![
            data.ids[i].clone(),
            data.coords[i][0].to_string(),
            data.coords[i][1].to_string(),
            data.trials[i].to_string(),
            data.y[i].to_string(),
        ];
        rec.extend(extra.iter().map(|(_, v)| v[i].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_text() -> &'static str {
        "id,x1,x2,m,y,elev\na,0,0,10,3,1.5\nb,1,0,10,4,2.0\nc,0,1,12,0,0.5\nd,1,1,8,8,0.1\n"
    }

    #[test]
    fn reads_schema_with_named_covariates() {
        let ing = read_csv(csv_text().as_bytes(), &["elev".into(), "x1".into()]).unwrap();
        let d = ing.data;
        assert!(ing.warnings.is_empty());
        assert_eq!(d.n(), 4);
        assert_eq!(d.p(), 3);
        assert_eq!(d.design[(2, 0)], 1.0);
        assert_eq!(d.design[(2, 1)], 0.5);
        assert_eq!(d.design[(1, 2)], 1.0);
        assert_eq!(d.ids[3], "d");
        d.check_fit_ready(&Family::binomial()).unwrap();
    }

    #[test]
    fn missing_value_reports_row_and_column() {
        let text = "id,x1,x2,m,y\na,0,0,10,3\nb,1,,10,4\n";
        let err = read_csv(text.as_bytes(), &[]).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("x2"), "{err}");
    }

    #[test]
    fn missing_column_and_unknown_covariate() {
        let err = read_csv("id,x1,x2,y\n".as_bytes(), &[]).unwrap_err().to_string();
        assert!(err.contains("'m'"));
        let err = read_csv(csv_text().as_bytes(), &["rain".into()]).unwrap_err().to_string();
        assert!(err.contains("rain"));
    }

    #[test]
    fn rejects_duplicates_and_rank_deficiency() {
        let dup = Dataset::new(vec![[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]], vec![1; 3], vec![1.0, 2.0, 3.0], vec![], vec![]);
        assert!(dup.is_err());
        let col = vec![1.0, 1.0, 1.0];
        let rank = Dataset::new(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
            vec![1; 3],
            vec![1.0, 2.0, 3.0],
            vec![col],
            vec!["const".into()],
        );
        assert!(rank.is_err());
    }

    #[test]
    fn binomial_range_checked() {
        let d = Dataset::new(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
            vec![5, 5, 5],
            vec![1.0, 6.0, 2.0],
            vec![],
            vec![],
        )
        .unwrap();
        assert!(d.check_family(&Family::binomial()).is_err());
        assert!(d.check_family(&Family::gaussian()).is_ok());
        let small = Dataset::new(vec![[0.0, 0.0]], vec![5], vec![1.0], vec![], vec![]).unwrap();
        assert!(small.check_fit_ready(&Family::binomial()).is_err());
    }

    #[test]
    fn write_then_read_round_trip() {
        let d = read_csv(csv_text().as_bytes(), &["elev".into()]).unwrap().data;
        let mut buf = Vec::new();
        let extra = vec![("elev".to_string(), d.design.column(1).iter().copied().collect())];
        write_csv(&d, &extra, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &["elev".into()]).unwrap();
        assert!(back.warnings.is_empty());
        assert_eq!(back.data, d);
    }
}
