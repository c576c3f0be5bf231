//! Synthetic multi-center trial generators and their true estimands.

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{expit, OutcomeFamily, PatientRecord, TrialDataset, WeightScheme};
use crate::error::{Error, Result};
use crate::estimators::Estimand;
use crate::rng::{stream, SimRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Continuous,
    Binary,
}

impl Endpoint {
    pub fn family(self) -> OutcomeFamily {
        match self {
            Endpoint::Continuous => OutcomeFamily::Gaussian,
            Endpoint::Binary => OutcomeFamily::Binomial,
        }
    }

    pub fn covariate_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Endpoint::Continuous => &["z30", "age", "cd40", "wt"],
            Endpoint::Binary => &["severe", "moderate", "age", "ichv"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

/// Number of centers and the center-size law's (average, min, max).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterLayout {
    pub k: usize,
    pub avg: f64,
    pub min: usize,
    pub max: usize,
}

impl CenterLayout {
    pub fn setting(id: u8) -> Result<Self> {
        let (k, avg, min, max) = match id {
            1 => (100, 5.0, 1, 24),
            2 => (50, 10.0, 2, 48),
            3 => (10, 50.0, 25, 80),
            4 => (5, 100.0, 50, 150),
            5 => (100, 100.0, 50, 145),
            _ => return Err(Error::Config(format!("setting must be 1..5, got {id}"))),
        };
        Ok(CenterLayout { k, avg, min, max })
    }

    fn validate(&self) -> Result<()> {
        if self.k < 2 || self.min < 1 || self.max < self.min || !(self.avg >= self.min as f64 && self.avg <= self.max as f64) {
            return Err(Error::Config(format!("invalid center layout {self:?}")));
        }
        Ok(())
    }

    /// min + Binomial(max − min, p*) with p* matching the average.
    pub fn draw_size(&self, rng: &mut SimRng) -> usize {
        if self.max == self.min {
            return self.min;
        }
        let p = (self.avg - self.min as f64) / (self.max - self.min) as f64;
        let b = Binomial::new((self.max - self.min) as u64, p.clamp(0.0, 1.0)).expect("valid binomial");
        self.min + b.sample(rng) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuousCovariates {
    pub z30_prob: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    /// CD4 count law, truncated below at 0.
    pub cd40_mean: f64,
    pub cd40_sd: f64,
    pub wt_mean: f64,
    pub wt_sd: f64,
}

impl Default for ContinuousCovariates {
    fn default() -> Self {
        ContinuousCovariates {
            z30_prob: 0.55,
            age_mean: 35.0,
            age_sd: 8.7,
            cd40_mean: 350.0,
            cd40_sd: 120.0,
            wt_mean: 75.0,
            wt_sd: 13.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinaryCovariates {
    pub severe_prob: f64,
    pub moderate_prob: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    /// Hemorrhage volume law, truncated below at 0.
    pub ichv_mean: f64,
    pub ichv_sd: f64,
}

impl Default for BinaryCovariates {
    fn default() -> Self {
        BinaryCovariates { severe_prob: 0.3, moderate_prob: 0.4, age_mean: 62.0, age_sd: 12.0, ichv_mean: 45.0, ichv_sd: 20.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateLaws {
    pub continuous: ContinuousCovariates,
    pub binary: BinaryCovariates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgmSpec {
    pub endpoint: Endpoint,
    #[serde(default)]
    pub misspecified: bool,
    /// (σ²_b0, σ²_b1, σ²_b2).
    pub sigma2: (f64, f64, f64),
    #[serde(default = "one")]
    pub setting: u8,
    /// Overrides the preset layout of `setting`.
    #[serde(default)]
    pub layout: Option<CenterLayout>,
    /// Couple center sizes to the treatment-effect deviation b_1c.
    #[serde(default)]
    pub informative_size: bool,
    #[serde(default = "half")]
    pub size_kendall_tau: f64,
    #[serde(default)]
    pub covariates: CovariateLaws,
    #[serde(default = "half")]
    pub treatment_prob: f64,
}

fn one() -> u8 {
    1
}

fn half() -> f64 {
    0.5
}

impl DgmSpec {
    pub fn new(endpoint: Endpoint, setting: u8, sigma2: (f64, f64, f64)) -> Self {
        DgmSpec {
            endpoint,
            misspecified: false,
            sigma2,
            setting,
            layout: None,
            informative_size: false,
            size_kendall_tau: 0.5,
            covariates: CovariateLaws::default(),
            treatment_prob: 0.5,
        }
    }

    pub fn layout(&self) -> Result<CenterLayout> {
        let l = match self.layout {
            Some(l) => l,
            None => CenterLayout::setting(self.setting)?,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        let (a, b, c) = self.sigma2;
        if [a, b, c].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("random-effect variances must be finite and nonnegative".into()));
        }
        if !(self.treatment_prob > 0.0 && self.treatment_prob < 1.0) {
            return Err(Error::Config("treatment probability must lie in (0, 1)".into()));
        }
        if !(self.size_kendall_tau > -1.0 && self.size_kendall_tau < 1.0) {
            return Err(Error::Config("size_kendall_tau must lie in (-1, 1)".into()));
        }
        let cb = &self.covariates.binary;
        if cb.severe_prob < 0.0 || cb.moderate_prob < 0.0 || cb.severe_prob + cb.moderate_prob > 1.0 {
            return Err(Error::Config("GCS category probabilities must be nonnegative and sum to at most 1".into()));
        }
        if !(0.0..=1.0).contains(&self.covariates.continuous.z30_prob) {
            return Err(Error::Config("z30 probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Random-effect variance triples studied for each endpoint.
pub fn variance_grid(endpoint: Endpoint) -> Vec<(f64, f64, f64)> {
    match endpoint {
        Endpoint::Continuous => vec![
            (0.0, 0.0, 0.0),
            (0.05, 0.0, 0.0),
            (0.10, 0.0, 0.0),
            (0.15, 0.0, 0.0),
            (0.10, 0.10, 0.0),
            (0.15, 0.15, 0.0),
            (0.15, 0.15, 4e-6),
        ],
        Endpoint::Binary => vec![
            (0.0, 0.0, 0.0),
            (0.25, 0.0, 0.0),
            (0.5, 0.0, 0.0),
            (0.5, 0.25, 0.0),
            (0.5, 0.25, 0.25),
            (0.5, 0.5, 0.0),
            (0.75, 0.5, 0.5),
        ],
    }
}

fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

fn truncated_normal(rng: &mut SimRng, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean.max(0.0);
    }
    // rejection; the laws used here put little mass below 0
    for _ in 0..10_000 {
        let v = mean + sd * normal(rng);
        if v >= 0.0 {
            return v;
        }
    }
    0.0
}

fn draw_covariates(spec: &DgmSpec, rng: &mut SimRng) -> [f64; 4] {
    match spec.endpoint {
        Endpoint::Continuous => {
            let c = &spec.covariates.continuous;
            let z30 = f64::from(u8::from(rng.random::<f64>() < c.z30_prob));
            let age = c.age_mean + c.age_sd * normal(rng);
            let cd40 = truncated_normal(rng, c.cd40_mean, c.cd40_sd);
            let wt = c.wt_mean + c.wt_sd * normal(rng);
            [z30, age, cd40, wt]
        }
        Endpoint::Binary => {
            let c = &spec.covariates.binary;
            let u: f64 = rng.random();
            let severe = f64::from(u8::from(u < c.severe_prob));
            let moderate = f64::from(u8::from(u >= c.severe_prob && u < c.severe_prob + c.moderate_prob));
            let age = c.age_mean + c.age_sd * normal(rng);
            let ichv = truncated_normal(rng, c.ichv_mean, c.ichv_sd);
            [severe, moderate, age, ichv]
        }
    }
}

/// Conditional mean of Y given the center effects, covariates and arm
/// (probability for the binary endpoint).
pub fn conditional_mean(spec: &DgmSpec, b: [f64; 3], x: &[f64; 4], a: f64) -> f64 {
    match (spec.endpoint, spec.misspecified) {
        (Endpoint::Continuous, false) => {
            let [z30, age, cd40, wt] = *x;
            4.06 + b[0] + (0.29 + b[1]) * a + (0.004 + b[2]) * cd40 - 0.15 * z30 - 0.0004 * age + 0.005 * wt
        }
        (Endpoint::Continuous, true) => {
            let [z30, age, cd40, wt] = *x;
            3.71 + b[0] + (0.29 + b[1]) * a + (0.08 + b[2]) * cd40.sqrt() - 0.14 * z30 - 0.0002 * age - 0.001 * wt
                + 1e-5 * cd40 * wt
        }
        (Endpoint::Binary, false) => {
            let [severe, moderate, age, ichv] = *x;
            expit(3.22 + b[0] + (0.28 + b[1]) * a - (1.71 + b[2]) * severe - 0.72 * moderate - 0.04 * age - 0.007 * ichv)
        }
        (Endpoint::Binary, true) => {
            let [severe, moderate, age, ichv] = *x;
            expit(
                5.52 + b[0] + (0.29 + b[1]) * a - (1.72 + b[2]) * severe - 0.72 * moderate - 0.12 * age
                    + 7e-4 * age * age
                    - 0.007 * ichv,
            )
        }
    }
}

/// Center sizes and effects for one trial of k centers. With informative
/// sizes, sizes are assigned through a Gaussian copula on b_1c whose
/// correlation sin(πτ/2) gives Kendall's τ.
fn draw_centers(spec: &DgmSpec, layout: &CenterLayout, rng: &mut SimRng) -> (Vec<usize>, Vec<[f64; 3]>) {
    let (v0, v1, v2) = spec.sigma2;
    let sd = [v0.sqrt(), v1.sqrt(), v2.sqrt()];
    let mut sizes: Vec<usize> = (0..layout.k).map(|_| layout.draw_size(rng)).collect();
    let effects: Vec<[f64; 3]> =
        (0..layout.k).map(|_| [sd[0] * normal(rng), sd[1] * normal(rng), sd[2] * normal(rng)]).collect();
    if spec.informative_size {
        let r = (std::f64::consts::PI * spec.size_kendall_tau / 2.0).sin();
        let latent: Vec<f64> = effects
            .iter()
            .map(|e| {
                let z = if sd[1] > 0.0 { e[1] / sd[1] } else { 0.0 };
                r * z + (1.0 - r * r).sqrt() * normal(rng)
            })
            .collect();
        sizes.sort_unstable();
        let mut order: Vec<usize> = (0..layout.k).collect();
        order.sort_by(|&i, &j| latent[i].total_cmp(&latent[j]));
        let mut assigned = vec![0; layout.k];
        for (rank, &c) in order.iter().enumerate() {
            assigned[c] = sizes[rank];
        }
        sizes = assigned;
    }
    (sizes, effects)
}

#[derive(Clone, Debug)]
pub struct GeneratedTrial {
    pub data: TrialDataset,
    /// (b_0c, b_1c, b_2c) per center.
    pub effects: Vec<[f64; 3]>,
}

pub fn generate(spec: &DgmSpec, seed: u64) -> Result<TrialDataset> {
    Ok(generate_with_effects(spec, seed)?.data)
}

pub fn generate_with_effects(spec: &DgmSpec, seed: u64) -> Result<GeneratedTrial> {
    spec.validate()?;
    let layout = spec.layout()?;
    let mut rng = stream(seed, &[]);
    let (sizes, effects) = draw_centers(spec, &layout, &mut rng);
    let total: usize = sizes.iter().sum();
    let mut records = Vec::with_capacity(total);
    for (c, (&n, b)) in sizes.iter().zip(&effects).enumerate() {
        for i in 0..n {
            let x = draw_covariates(spec, &mut rng);
            let a = u8::from(rng.random::<f64>() < spec.treatment_prob);
            let mu = conditional_mean(spec, *b, &x, f64::from(a));
            let y = match spec.endpoint {
                Endpoint::Continuous => mu + normal(&mut rng),
                Endpoint::Binary => f64::from(u8::from(rng.random::<f64>() < mu)),
            };
            records.push(PatientRecord {
                patient_id: format!("{c}-{i}"),
                center_id: format!("c{c:03}"),
                cluster_id: None,
                treatment: a,
                covariates: x.to_vec(),
                outcome: y,
            });
        }
    }
    let data = TrialDataset::new(records, spec.endpoint.family(), spec.endpoint.covariate_names())?;
    Ok(GeneratedTrial { data, effects })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMethod {
    ClosedForm,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrueEstimand {
    pub estimand: Estimand,
    pub scheme: WeightScheme,
    pub value: f64,
    pub method: TruthMethod,
    pub mc_se: Option<f64>,
}

pub const DEFAULT_TRUTH_DRAWS: usize = 10_000_000;

/// Mean of a normal truncated below at 0.
fn truncated_mean(mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean.max(0.0);
    }
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let alpha = -mean / sd;
    mean + sd * n.pdf(alpha) / (1.0 - n.cdf(alpha))
}

/// True counterfactual means and ATE under `scheme`, in `Estimand::ALL` order.
/// Linear correctly specified models with non-informative sizes are
/// evaluated in closed form; everything else by Monte Carlo over centers and
/// covariates with common random numbers across estimands.
pub fn true_estimands(spec: &DgmSpec, scheme: WeightScheme, draws: usize, seed: u64) -> Result<Vec<TrueEstimand>> {
    spec.validate()?;
    match closed_form_truth(spec, scheme) {
        Some(t) => Ok(t),
        None => monte_carlo_truth(spec, scheme, draws, seed),
    }
}

fn closed_form_truth(spec: &DgmSpec, scheme: WeightScheme) -> Option<Vec<TrueEstimand>> {
    let informative = spec.informative_size && scheme == WeightScheme::EqualPatients && spec.sigma2.1 > 0.0;
    if spec.endpoint != Endpoint::Continuous || spec.misspecified || informative {
        return None;
    }
    let c = &spec.covariates.continuous;
    let cd40 = truncated_mean(c.cd40_mean, c.cd40_sd);
    let base = 4.06 + 0.004 * cd40 - 0.15 * c.z30_prob - 0.0004 * c.age_mean + 0.005 * c.wt_mean;
    let vals = [base + 0.29, base, 0.29];
    Some(
        Estimand::ALL
            .iter()
            .zip(vals)
            .map(|(&e, v)| TrueEstimand { estimand: e, scheme, value: v, method: TruthMethod::ClosedForm, mc_se: None })
            .collect(),
    )
}

/// Monte Carlo evaluation of the true estimands regardless of whether a
/// closed form exists.
pub fn monte_carlo_truth(spec: &DgmSpec, scheme: WeightScheme, draws: usize, seed: u64) -> Result<Vec<TrueEstimand>> {
    spec.validate()?;
    if draws < 2 {
        return Err(Error::Config("truth Monte Carlo needs at least 2 draws".into()));
    }
    let layout = spec.layout()?;
    // one patient per simulated center; centers come in trial-sized batches
    // so informative size coupling matches the generator
    let chunk = layout.k * 1000;
    let n_chunks = draws.div_ceil(chunk);
    // accumulators: Σw, Σw², then per estimand Σwf, Σw²f, Σw²f²
    let parts: Vec<[f64; 11]> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = stream(seed, &[0x7472_7574, ci as u64]);
            let mut acc = [0.0; 11];
            let mut remaining = (draws - ci * chunk).min(chunk);
            while remaining > 0 {
                let (sizes, effects) = draw_centers(spec, &layout, &mut rng);
                for (n, b) in sizes.iter().zip(&effects).take(remaining) {
                    let x = draw_covariates(spec, &mut rng);
                    let m1 = conditional_mean(spec, *b, &x, 1.0);
                    let m0 = conditional_mean(spec, *b, &x, 0.0);
                    let w = if scheme == WeightScheme::EqualPatients { *n as f64 } else { 1.0 };
                    acc[0] += w;
                    acc[1] += w * w;
                    for (e, f) in [m1, m0, m1 - m0].into_iter().enumerate() {
                        acc[2 + 3 * e] += w * f;
                        acc[3 + 3 * e] += w * w * f;
                        acc[4 + 3 * e] += w * w * f * f;
                    }
                }
                remaining = remaining.saturating_sub(layout.k);
            }
            acc
        })
        .collect();
    let mut t = [0.0; 11];
    for p in &parts {
        for j in 0..11 {
            t[j] += p[j];
        }
    }
    let (sw, sw2) = (t[0], t[1]);
    Ok(Estimand::ALL
        .iter()
        .enumerate()
        .map(|(e, &est)| {
            let value = t[2 + 3 * e] / sw;
            // linearized SE of the ratio Σwf / Σw
            let ss = (t[4 + 3 * e] - 2.0 * value * t[3 + 3 * e] + value * value * sw2).max(0.0);
            TrueEstimand { estimand: est, scheme, value, method: TruthMethod::MonteCarlo, mc_se: Some(ss.sqrt() / sw) }
        })
        .collect())
}

/// Three-level cluster-randomized design: patients in clusters in centers,
/// with treatment assigned per cluster (complete randomization within each
/// center). Y = intercept + α_c + b_jc + effect·A_j + slope·x + ε, x ~ N(0, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDgm {
    pub k: usize,
    pub clusters_per_center: usize,
    pub cluster_size_min: usize,
    pub cluster_size_max: usize,
    pub var_center: f64,
    pub var_cluster: f64,
    pub var_residual: f64,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub effect: f64,
    #[serde(default)]
    pub slope: f64,
    #[serde(default = "half")]
    pub treatment_prob: f64,
    /// When set, cluster sizes and arms come from this seed, so repeated
    /// draws share one design and differ only in effects and outcomes.
    #[serde(default)]
    pub layout_seed: Option<u64>,
}

impl ClusterDgm {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.clusters_per_center < 1 || self.cluster_size_min < 1 || self.cluster_size_max < self.cluster_size_min {
            return Err(Error::Config(format!("invalid cluster layout {self:?}")));
        }
        if [self.var_center, self.var_cluster, self.var_residual].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("variance components must be finite and nonnegative".into()));
        }
        if !(self.treatment_prob > 0.0 && self.treatment_prob < 1.0) {
            return Err(Error::Config("treatment probability must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// (ψ_1, ψ_0, ATE); the same under either weighting since x has mean 0
    /// and no effect varies across centers.
    pub fn truth(&self) -> [f64; 3] {
        [self.intercept + self.effect, self.intercept, self.effect]
    }

    /// Cluster sizes and arms, indexed [center][cluster].
    pub fn draw_layout(&self, rng: &mut SimRng) -> Vec<Vec<(usize, u8)>> {
        let m = self.clusters_per_center;
        (0..self.k)
            .map(|_| {
                let sizes: Vec<usize> =
                    (0..m).map(|_| rng.random_range(self.cluster_size_min..=self.cluster_size_max)).collect();
                let n_treated = ((self.treatment_prob * m as f64).round() as usize).min(m);
                let mut arms: Vec<u8> = (0..m).map(|j| u8::from(j < n_treated)).collect();
                if m == 1 {
                    arms[0] = u8::from(rng.random::<f64>() < self.treatment_prob);
                } else {
                    for j in (1..m).rev() {
                        let r = rng.random_range(0..=j);
                        arms.swap(j, r);
                    }
                }
                sizes.into_iter().zip(arms).collect()
            })
            .collect()
    }
}

pub fn generate_cluster_trial(dgm: &ClusterDgm, seed: u64) -> Result<TrialDataset> {
    dgm.validate()?;
    let mut rng = stream(seed, &[]);
    let layout = match dgm.layout_seed {
        Some(s) => dgm.draw_layout(&mut stream(s, &[])),
        None => dgm.draw_layout(&mut rng),
    };
    let (sc, sb, se) = (dgm.var_center.sqrt(), dgm.var_cluster.sqrt(), dgm.var_residual.sqrt());
    let mut records = Vec::new();
    for (c, clusters) in layout.iter().enumerate() {
        let alpha = sc * normal(&mut rng);
        for (j, &(size, a)) in clusters.iter().enumerate() {
            let b = sb * normal(&mut rng);
            for i in 0..size {
                let x = normal(&mut rng);
                let y = dgm.intercept + alpha + b + dgm.effect * f64::from(a) + dgm.slope * x + se * normal(&mut rng);
                records.push(PatientRecord {
                    patient_id: format!("{c}-{j}-{i}"),
                    center_id: format!("c{c:03}"),
                    cluster_id: Some(format!("c{c:03}-{j:02}")),
                    treatment: a,
                    covariates: vec![x],
                    outcome: y,
                });
            }
        }
    }
    TrialDataset::new(records, OutcomeFamily::Gaussian, vec!["x".into()])
}
