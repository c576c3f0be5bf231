//! Trial data model, CSV ingestion and center weights.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeFamily {
    #[serde(alias = "gaussian", alias = "continuous")]
    Gaussian,
    #[serde(alias = "binomial", alias = "binomial-logit", alias = "binomial_logit", alias = "binary")]
    Binomial,
}

impl OutcomeFamily {
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            OutcomeFamily::Gaussian => eta,
            OutcomeFamily::Binomial => expit(eta),
        }
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub center_id: String,
    pub cluster_id: Option<String>,
    pub treatment: u8,
    pub covariates: Vec<f64>,
    pub outcome: f64,
}

/// Validated, immutable collection of patient records.
///
/// Centers are enumerated in order of first appearance; every per-center
/// output in the crate follows that order.
#[derive(Clone, Debug)]
pub struct TrialDataset {
    records: Vec<PatientRecord>,
    family: OutcomeFamily,
    covariate_names: Vec<String>,
    centers: Vec<String>,
    center_of: Vec<usize>,
    center_rows: Vec<Vec<usize>>,
    clusters: Option<ClusterIndex>,
}

#[derive(Clone, Debug)]
struct ClusterIndex {
    /// `(center index, cluster label)` per cluster, first-appearance order.
    keys: Vec<(usize, String)>,
    cluster_of: Vec<usize>,
    rows: Vec<Vec<usize>>,
}

impl TrialDataset {
    pub fn new(
        records: Vec<PatientRecord>,
        family: OutcomeFamily,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let p = covariate_names.len();
        let mut centers = Vec::new();
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let mut center_of = Vec::with_capacity(records.len());
        let mut center_rows: Vec<Vec<usize>> = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if r.treatment > 1 {
                return Err(Error::Row {
                    row: i + 1,
                    message: format!("treatment must be 0 or 1, got {}", r.treatment),
                });
            }
            if r.covariates.len() != p {
                return Err(Error::Row {
                    row: i + 1,
                    message: format!("expected {} covariates, got {}", p, r.covariates.len()),
                });
            }
            if !r.outcome.is_finite() || r.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::Row { row: i + 1, message: "non-finite value".into() });
            }
            if family == OutcomeFamily::Binomial && r.outcome != 0.0 && r.outcome != 1.0 {
                return Err(Error::Row {
                    row: i + 1,
                    message: format!("binomial outcome must be 0 or 1, got {}", r.outcome),
                });
            }
            let c = *lookup.entry(r.center_id.clone()).or_insert_with(|| {
                centers.push(r.center_id.clone());
                center_rows.push(Vec::new());
                centers.len() - 1
            });
            center_of.push(c);
            center_rows[c].push(i);
        }
        if centers.len() < 2 {
            return Err(Error::InvalidData(format!(
                "at least 2 distinct centers required, found {}",
                centers.len()
            )));
        }

        let with_cluster = records.iter().filter(|r| r.cluster_id.is_some()).count();
        let clusters = if with_cluster == 0 {
            None
        } else if with_cluster != records.len() {
            return Err(Error::InvalidData("cluster id present on some records only".into()));
        } else {
            let mut keys = Vec::new();
            let mut lookup: HashMap<(usize, String), usize> = HashMap::new();
            let mut cluster_of = Vec::with_capacity(records.len());
            let mut rows: Vec<Vec<usize>> = Vec::new();
            for (i, r) in records.iter().enumerate() {
                let key = (center_of[i], r.cluster_id.clone().unwrap_or_default());
                let j = *lookup.entry(key.clone()).or_insert_with(|| {
                    keys.push(key);
                    rows.push(Vec::new());
                    keys.len() - 1
                });
                cluster_of.push(j);
                rows[j].push(i);
            }
            Some(ClusterIndex { keys, cluster_of, rows })
        };

        Ok(Self { records, family, covariate_names, centers, center_of, center_rows, clusters })
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }
    pub fn family(&self) -> OutcomeFamily {
        self.family
    }
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }
    pub fn n(&self) -> usize {
        self.records.len()
    }
    pub fn k(&self) -> usize {
        self.centers.len()
    }
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }
    pub fn center_ids(&self) -> &[String] {
        &self.centers
    }
    /// Index of the center of record `i`.
    pub fn center_of(&self, i: usize) -> usize {
        self.center_of[i]
    }
    pub fn center_rows(&self, c: usize) -> &[usize] {
        &self.center_rows[c]
    }
    pub fn center_sizes(&self) -> Vec<usize> {
        self.center_rows.iter().map(Vec::len).collect()
    }
    pub fn treatment(&self, i: usize) -> f64 {
        f64::from(self.records[i].treatment)
    }
    pub fn outcome(&self, i: usize) -> f64 {
        self.records[i].outcome
    }
    pub fn outcomes(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.outcome).collect()
    }
    pub fn treatments(&self) -> Vec<f64> {
        self.records.iter().map(|r| f64::from(r.treatment)).collect()
    }
    pub fn covariate(&self, i: usize, j: usize) -> f64 {
        self.records[i].covariates[j]
    }

    pub fn has_clusters(&self) -> bool {
        self.clusters.is_some()
    }
    /// Number of clusters (nested within centers), if cluster ids are present.
    pub fn n_clusters(&self) -> Option<usize> {
        self.clusters.as_ref().map(|c| c.keys.len())
    }
    pub fn cluster_of(&self, i: usize) -> Option<usize> {
        self.clusters.as_ref().map(|c| c.cluster_of[i])
    }
    pub fn cluster_rows(&self) -> Option<&[Vec<usize>]> {
        self.clusters.as_ref().map(|c| c.rows.as_slice())
    }
    /// Center index of every cluster.
    pub fn cluster_centers(&self) -> Option<Vec<usize>> {
        self.clusters.as_ref().map(|c| c.keys.iter().map(|k| k.0).collect())
    }
    /// J_c: distinct clusters per center.
    pub fn clusters_per_center(&self) -> Option<Vec<usize>> {
        self.clusters.as_ref().map(|cl| {
            let mut counts = vec![0; self.k()];
            for (c, _) in &cl.keys {
                counts[*c] += 1;
            }
            counts
        })
    }

    /// The same records regrouped so that each cluster acts as a center.
    pub fn clusters_as_centers(&self) -> Result<TrialDataset> {
        let cl = self
            .clusters
            .as_ref()
            .ok_or_else(|| Error::InvalidData("dataset has no cluster ids".into()))?;
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let (c, label) = &cl.keys[cl.cluster_of[i]];
                PatientRecord {
                    center_id: format!("{}:{}", self.centers[*c], label),
                    cluster_id: None,
                    ..r.clone()
                }
            })
            .collect();
        TrialDataset::new(records, self.family, self.covariate_names.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightScheme {
    #[serde(rename = "equal_centers", alias = "equal-centers")]
    EqualCenters,
    #[serde(rename = "equal_patients", alias = "equal-patients")]
    EqualPatients,
}

impl WeightScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightScheme::EqualCenters => "equal_centers",
            WeightScheme::EqualPatients => "equal_patients",
        }
    }

    pub fn weights_for_sizes(self, sizes: &[usize]) -> Vec<f64> {
        let k = sizes.len() as f64;
        match self {
            WeightScheme::EqualCenters => vec![1.0 / k; sizes.len()],
            WeightScheme::EqualPatients => {
                let total: usize = sizes.iter().sum();
                sizes.iter().map(|&n| n as f64 / total as f64).collect()
            }
        }
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-centers" | "equal_centers" => Ok(WeightScheme::EqualCenters),
            "equal-patients" | "equal_patients" => Ok(WeightScheme::EqualPatients),
            other => Err(Error::Config(format!("unknown weight scheme `{other}`"))),
        }
    }
}

/// w(c) per center in enumeration order.
pub fn center_weights(data: &TrialDataset, scheme: WeightScheme) -> Vec<(String, f64)> {
    let w = scheme.weights_for_sizes(&data.center_sizes());
    data.center_ids().iter().cloned().zip(w).collect()
}

/// Column-name mapping for CSV ingestion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub outcome: String,
    pub treatment: String,
    pub center: String,
    #[serde(default)]
    pub cluster: Option<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub patient_id: Option<String>,
}

impl CsvSchema {
    /// The schema produced by [`write_csv`].
    pub fn canonical(data: &TrialDataset) -> Self {
        CsvSchema {
            outcome: "outcome".into(),
            treatment: "treatment".into(),
            center: "center_id".into(),
            cluster: data.has_clusters().then(|| "cluster_id".into()),
            covariates: data.covariate_names().to_vec(),
            patient_id: Some("patient_id".into()),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema, family: OutcomeFamily) -> Result<TrialDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema, family)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema, family: OutcomeFamily) -> Result<TrialDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}').trim().to_string())
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let i_out = col(&schema.outcome)?;
    let i_trt = col(&schema.treatment)?;
    let i_ctr = col(&schema.center)?;
    let i_cl = schema.cluster.as_deref().map(col).transpose()?;
    let i_id = schema.patient_id.as_deref().map(col).transpose()?;
    let i_cov = schema.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (r, row) in rdr.records().enumerate() {
        let row = row?;
        // header occupies line 1
        let line = r + 2;
        let cell = |idx: usize, name: &str| -> Result<&str> {
            let v = row.get(idx).map(str::trim).unwrap_or("");
            if v.is_empty() || v.eq_ignore_ascii_case("na") {
                return Err(Error::Row { row: line, message: format!("missing value in column `{name}`") });
            }
            Ok(v)
        };
        let number = |idx: usize, name: &str| -> Result<f64> {
            let v = cell(idx, name)?;
            v.parse::<f64>().map_err(|_| Error::Row {
                row: line,
                message: format!("non-numeric value `{v}` in column `{name}`"),
            })
        };
        let a = number(i_trt, &schema.treatment)?;
        if a != 0.0 && a != 1.0 {
            return Err(Error::Row { row: line, message: format!("treatment must be 0 or 1, got {a}") });
        }
        let y = number(i_out, &schema.outcome)?;
        if family == OutcomeFamily::Binomial && y != 0.0 && y != 1.0 {
            return Err(Error::Row { row: line, message: format!("binomial outcome must be 0 or 1, got {y}") });
        }
        let covariates = i_cov
            .iter()
            .zip(&schema.covariates)
            .map(|(&i, name)| number(i, name))
            .collect::<Result<Vec<_>>>()?;
        records.push(PatientRecord {
            patient_id: match i_id {
                Some(i) => cell(i, "patient_id")?.to_string(),
                None => (r + 1).to_string(),
            },
            center_id: cell(i_ctr, &schema.center)?.to_string(),
            cluster_id: match (i_cl, schema.cluster.as_deref()) {
                (Some(i), Some(name)) => Some(cell(i, name)?.to_string()),
                _ => None,
            },
            treatment: a as u8,
            covariates,
            outcome: y,
        });
    }
    TrialDataset::new(records, family, schema.covariates.clone())
}

/// Write in the canonical layout; numbers use shortest round-trip formatting.
pub fn write_csv<W: Write>(data: &TrialDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["patient_id".to_string(), "center_id".to_string()];
    if data.has_clusters() {
        header.push("cluster_id".into());
    }
    header.push("treatment".into());
    header.extend(data.covariate_names().iter().cloned());
    header.push("outcome".into());
    w.write_record(&header)?;
    for r in data.records() {
        let mut row = vec![r.patient_id.clone(), r.center_id.clone()];
        if let Some(cl) = &r.cluster_id {
            row.push(cl.clone());
        }
        row.push(r.treatment.to_string());
        row.extend(r.covariates.iter().map(|v| format!("{v:?}")));
        row.push(format!("{:?}", r.outcome));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(data: &TrialDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(data, std::io::BufWriter::new(file))
}
