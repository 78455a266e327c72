//! Model artifacts, plot-ready tables and content hashes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expfam::{FamilyKind, Link};
use crate::mcml::{GlgmParams, McmlFit, McmlSchedule};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Monte Carlo maximum likelihood (binomial).
    Mcml,
    /// Exact profile likelihood (gaussian).
    LinearMl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub schema_version: u32,
    pub family: FamilyKind,
    pub link: Link,
    pub method: FitMethod,
    pub covariate_names: Vec<String>,
    pub params: GlgmParams,
    pub glm_beta: Vec<f64>,
    pub r2_glm: f64,
    pub mcml: Option<McmlFit>,
    pub schedule: Option<McmlSchedule>,
    pub seed: Option<u64>,
    pub n_sites: usize,
    pub data_hash: String,
    pub config_hash: String,
}

impl ModelArtifact {
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let a: ModelArtifact = serde_json::from_reader(reader)?;
        if a.schema_version != SCHEMA_VERSION {
            return Err(Error::Mismatch(format!(
                "artifact schema version {} (expected {SCHEMA_VERSION})",
                a.schema_version
            )));
        }
        Ok(a)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        write_json(self, writer)
    }

    /// Confirms the artifact was fitted to `data`.
    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        let h = data_hash(data);
        if h != self.data_hash {
            return Err(Error::Mismatch(format!("artifact was fitted to data {} but input hashes to {h}", self.data_hash)));
        }
        Ok(())
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize, W: Write>(value: &T, mut writer: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the dataset contents in site order.
pub fn data_hash(data: &Dataset) -> String {
    let mut h = Sha256::new();
    for i in 0..data.n() {
        h.update(data.ids[i].as_bytes());
        h.update([0u8]);
        for v in data.coords[i] {
            h.update(v.to_le_bytes());
        }
        h.update(data.trials[i].to_le_bytes());
        h.update(data.y[i].to_le_bytes());
        for v in data.design.row(i).iter() {
            h.update(v.to_le_bytes());
        }
    }
    for name in &data.covariate_names {
        h.update(name.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Hash of a serialisable configuration.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

/// Quintile class (1..=5) of each value among all values.
///
/// Breaks are the 20/40/60/80% empirical quantiles (type 7); a value equal
/// to a break falls in the lower class.
pub fn quintile_classes(values: &[f64]) -> Vec<u8> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (sorted.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let breaks: Vec<f64> = [0.2, 0.4, 0.6, 0.8].iter().map(|&p| q(p)).collect();
    values.iter().map(|v| 1 + breaks.iter().filter(|&&b| *v > b).count() as u8).collect()
}

/// `site_id, x1, x2, m, y, prevalence, quintile`.
pub fn write_prevalence_points<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let prev: Vec<f64> = data.y.iter().zip(&data.trials).map(|(y, &m)| y / m as f64).collect();
    let class = quintile_classes(&prev);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["site_id", "x1", "x2", "m", "y", "prevalence", "quintile"])?;
    for i in 0..data.n() {
        w.write_record([
            data.ids[i].clone(),
            data.coords[i][0].to_string(),
            data.coords[i][1].to_string(),
            data.trials[i].to_string(),
            data.y[i].to_string(),
            prev[i].to_string(),
            class[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
