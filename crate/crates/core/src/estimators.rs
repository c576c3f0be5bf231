//! AIPW point estimation: per-center counterfactual means, pooling, the
//! naive pooled estimator, cluster-level estimation and the estimator roster.

use serde::{Deserialize, Serialize};

use crate::dataset::{TrialDataset, WeightScheme};
use crate::design::DesignSpec;
use crate::error::{Error, Result};
use crate::glm::{fit_glm, predict_counterfactual, GlmFit};
use crate::mixed::{
    fit_glmm_logit_with, fit_lmm, predict_counterfactual_mixed, GlmmOptions, MixedFit, PredictionMode, RandomEffectsSpec,
};
use crate::propensity::{default_clamp, estimate_propensity, PropensityEstimate, PropensityKind, PropensityPolicy};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "counterfactual_mean_treated", alias = "cm1")]
    CounterfactualMeanTreated,
    #[serde(rename = "counterfactual_mean_control", alias = "cm0")]
    CounterfactualMeanControl,
    #[serde(rename = "ate")]
    Ate,
}

impl Estimand {
    pub const ALL: [Estimand; 3] = [Estimand::CounterfactualMeanTreated, Estimand::CounterfactualMeanControl, Estimand::Ate];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimand::CounterfactualMeanTreated => "cm1",
            Estimand::CounterfactualMeanControl => "cm0",
            Estimand::Ate => "ate",
        }
    }
}

impl std::str::FromStr for Estimand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cm1" | "counterfactual_mean_treated" => Ok(Estimand::CounterfactualMeanTreated),
            "cm0" | "counterfactual_mean_control" => Ok(Estimand::CounterfactualMeanControl),
            "ate" => Ok(Estimand::Ate),
            other => Err(Error::Config(format!("unknown estimand `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterEstimate {
    pub center_id: String,
    pub n_c: usize,
    pub n_treated: usize,
    pub tau1_hat: f64,
    pub tau0_hat: f64,
    pub tau_hat: f64,
    pub if_treated: Vec<f64>,
    pub if_control: Vec<f64>,
    pub if_ate: Vec<f64>,
}

impl CenterEstimate {
    pub fn value(&self, estimand: Estimand) -> f64 {
        match estimand {
            Estimand::CounterfactualMeanTreated => self.tau1_hat,
            Estimand::CounterfactualMeanControl => self.tau0_hat,
            Estimand::Ate => self.tau_hat,
        }
    }

    pub fn if_values(&self, estimand: Estimand) -> &[f64] {
        match estimand {
            Estimand::CounterfactualMeanTreated => &self.if_treated,
            Estimand::CounterfactualMeanControl => &self.if_control,
            Estimand::Ate => &self.if_ate,
        }
    }

    /// Whether every arm the estimand's IPW terms need is observed in the center.
    pub fn has_required_arms(&self, estimand: Estimand) -> bool {
        let treated = self.n_treated > 0;
        let control = self.n_treated < self.n_c;
        match estimand {
            Estimand::CounterfactualMeanTreated => treated,
            Estimand::CounterfactualMeanControl => control,
            Estimand::Ate => treated && control,
        }
    }
}

fn mean_in_order(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// AIPW estimates for one center from aligned per-patient vectors.
pub fn aipw_center(
    center_id: &str,
    a: &[f64],
    y: &[f64],
    p_hat: &[f64],
    m1_hat: &[f64],
    m0_hat: &[f64],
) -> Result<CenterEstimate> {
    let n = a.len();
    if n == 0 {
        return Err(Error::Dimension(format!("center `{center_id}` has no patients")));
    }
    if [y.len(), p_hat.len(), m1_hat.len(), m0_hat.len()].iter().any(|&l| l != n) {
        return Err(Error::Dimension(format!("center `{center_id}`: per-patient vectors differ in length")));
    }
    if let Some(p) = p_hat.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Numerical(format!("center `{center_id}`: propensity {p} outside (0, 1)")));
    }
    let mut if_treated = Vec::with_capacity(n);
    let mut if_control = Vec::with_capacity(n);
    let mut if_ate = Vec::with_capacity(n);
    for i in 0..n {
        let t = a[i] / p_hat[i] * (y[i] - m1_hat[i]) + m1_hat[i];
        let c = (1.0 - a[i]) / (1.0 - p_hat[i]) * (y[i] - m0_hat[i]) + m0_hat[i];
        if_treated.push(t);
        if_control.push(c);
        if_ate.push(t - c);
    }
    let tau1_hat = mean_in_order(&if_treated);
    let tau0_hat = mean_in_order(&if_control);
    Ok(CenterEstimate {
        center_id: center_id.to_string(),
        n_c: n,
        n_treated: a.iter().filter(|&&v| v == 1.0).count(),
        tau1_hat,
        tau0_hat,
        tau_hat: tau1_hat - tau0_hat,
        if_treated,
        if_control,
        if_ate,
    })
}

/// Per-center AIPW estimates for the whole dataset, in center enumeration order.
pub fn aipw_by_center(data: &TrialDataset, p_hat: &[f64], m1_hat: &[f64], m0_hat: &[f64]) -> Result<Vec<CenterEstimate>> {
    let n = data.n();
    if p_hat.len() != n || m1_hat.len() != n || m0_hat.len() != n {
        return Err(Error::Dimension("per-patient vectors must have one entry per patient".into()));
    }
    (0..data.k())
        .map(|c| {
            let rows = data.center_rows(c);
            let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let a: Vec<f64> = rows.iter().map(|&i| data.treatment(i)).collect();
            let y: Vec<f64> = rows.iter().map(|&i| data.outcome(i)).collect();
            aipw_center(&data.center_ids()[c], &a, &y, &pick(p_hat), &pick(m1_hat), &pick(m0_hat))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PooledEstimate {
    pub estimand: Estimand,
    pub weight_scheme: WeightScheme,
    pub value: f64,
    /// w(c) in center order.
    pub weights: Vec<f64>,
    pub per_center: Vec<CenterEstimate>,
}

impl PooledEstimate {
    pub fn center_values(&self) -> Vec<f64> {
        self.per_center.iter().map(|c| c.value(self.estimand)).collect()
    }

    pub fn center_sizes(&self) -> Vec<usize> {
        self.per_center.iter().map(|c| c.n_c).collect()
    }

    /// All per-patient influence values, center by center.
    pub fn patient_if_values(&self) -> Vec<f64> {
        self.per_center.iter().flat_map(|c| c.if_values(self.estimand).iter().copied()).collect()
    }
}

pub fn pool(centers: Vec<CenterEstimate>, scheme: WeightScheme, estimand: Estimand) -> Result<PooledEstimate> {
    let sizes: Vec<usize> = centers.iter().map(|c| c.n_c).collect();
    pool_with_weights(centers, scheme.weights_for_sizes(&sizes), scheme, estimand)
}

pub fn pool_with_weights(
    centers: Vec<CenterEstimate>,
    weights: Vec<f64>,
    scheme: WeightScheme,
    estimand: Estimand,
) -> Result<PooledEstimate> {
    if centers.is_empty() {
        return Err(Error::InvalidData("cannot pool zero centers".into()));
    }
    if weights.len() != centers.len() {
        return Err(Error::Dimension(format!("{} weights for {} centers", weights.len(), centers.len())));
    }
    let value = centers.iter().zip(&weights).map(|(c, w)| w * c.value(estimand)).sum();
    Ok(PooledEstimate { estimand, weight_scheme: scheme, value, weights, per_center: centers })
}

/// Naive AIPW: one sum over all patients with shared p̂ and m̂, which is the
/// patient-weighted pooling of the per-center terms.
pub fn naive_aipw(data: &TrialDataset, fit: &GlmFit, policy: &PropensityPolicy, estimand: Estimand) -> Result<PooledEstimate> {
    if fit.design.center_indicators {
        return Err(Error::Config("the naive estimator takes an outcome model without center terms".into()));
    }
    if policy.kind == PropensityKind::MixedLogistic {
        return Err(Error::Config("the naive estimator takes a marginal or covariate propensity".into()));
    }
    let p = estimate_propensity(data, policy)?;
    let m1 = predict_counterfactual(fit, data, 1)?;
    let m0 = predict_counterfactual(fit, data, 0)?;
    naive_from_predictions(data, &p.p, &m1, &m0, estimand)
}

pub fn naive_from_predictions(
    data: &TrialDataset,
    p_hat: &[f64],
    m1_hat: &[f64],
    m0_hat: &[f64],
    estimand: Estimand,
) -> Result<PooledEstimate> {
    let centers = aipw_by_center(data, p_hat, m1_hat, m0_hat)?;
    let mut pooled = pool(centers, WeightScheme::EqualPatients, estimand)?;
    // sum patients directly, not through per-center means
    pooled.value = mean_in_order(&pooled.patient_if_values());
    Ok(pooled)
}

/// G-computation ATE: mean of m̂_1 − m̂_0.
pub fn gcomp_ate(m1_hat: &[f64], m0_hat: &[f64]) -> f64 {
    m1_hat.iter().zip(m0_hat).map(|(a, b)| a - b).sum::<f64>() / m1_hat.len() as f64
}

/// Cluster-randomized AIPW: one estimate per cluster, averaged with equal
/// cluster weights.
#[derive(Clone, Debug)]
pub struct ClusterEstimate {
    pub psi1: f64,
    pub psi0: f64,
    pub ate: f64,
    /// ψ̂_1j per cluster; these are also the cluster-level influence values.
    pub psi1_by_cluster: Vec<f64>,
    pub psi0_by_cluster: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
}

/// `p_cluster` holds one probability per cluster; predictions are per patient.
pub fn cluster_randomized_mean(data: &TrialDataset, p_cluster: &[f64], m1_hat: &[f64], m0_hat: &[f64]) -> Result<ClusterEstimate> {
    let rows = data.cluster_rows().ok_or_else(|| Error::InvalidData("cluster ids required".into()))?;
    if p_cluster.len() != rows.len() {
        return Err(Error::Dimension(format!("{} propensities for {} clusters", p_cluster.len(), rows.len())));
    }
    if m1_hat.len() != data.n() || m0_hat.len() != data.n() {
        return Err(Error::Dimension("predictions must have one entry per patient".into()));
    }
    let mut psi1 = Vec::with_capacity(rows.len());
    let mut psi0 = Vec::with_capacity(rows.len());
    for (j, r) in rows.iter().enumerate() {
        let a = data.treatment(r[0]);
        if r.iter().any(|&i| data.treatment(i) != a) {
            return Err(Error::InvalidData(format!("treatment varies within cluster {j}")));
        }
        let p = p_cluster[j];
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Numerical(format!("cluster {j}: propensity {p} outside (0, 1)")));
        }
        let n = r.len() as f64;
        psi1.push(r.iter().map(|&i| a / p * (data.outcome(i) - m1_hat[i]) + m1_hat[i]).sum::<f64>() / n);
        psi0.push(r.iter().map(|&i| (1.0 - a) / (1.0 - p) * (data.outcome(i) - m0_hat[i]) + m0_hat[i]).sum::<f64>() / n);
    }
    let m1 = mean_in_order(&psi1);
    let m0 = mean_in_order(&psi0);
    Ok(ClusterEstimate {
        psi1: m1,
        psi0: m0,
        ate: m1 - m0,
        psi1_by_cluster: psi1,
        psi0_by_cluster: psi0,
        cluster_sizes: rows.iter().map(Vec::len).collect(),
    })
}

// ---------------------------------------------------------------------------
// Estimator roster

pub const ROSTER_NAMES: [&str; 6] = ["Naive", "Fixed", "Mixed(1|c)", "Mixed(1|c) Sam", "Mixed(1+A|c)", "Mixed(1+A|c) Sam"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeModel {
    /// Pooled GLM without center terms.
    Glm,
    /// GLM with center indicators.
    FixedCenters,
    /// Random center intercept.
    MixedIntercept,
    /// Random center intercept and treatment slope.
    MixedSlope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Fixed-effect model predictions.
    Plugin,
    Blup,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub name: String,
    pub adjusted: bool,
    pub outcome: OutcomeModel,
    pub prediction: Prediction,
    pub propensity: PropensityKind,
}

impl RosterEntry {
    pub fn label(&self) -> String {
        if self.adjusted {
            format!("{} adj", self.name)
        } else {
            self.name.clone()
        }
    }

    /// The naive estimator pools all patients and uses the naive variance.
    pub fn is_naive(&self) -> bool {
        self.outcome == OutcomeModel::Glm
    }
}

/// Map a roster name to its (outcome model, prediction, propensity) triple.
pub fn roster_entry(name: &str, adjusted: bool) -> Result<RosterEntry> {
    let key: String = name.trim().trim_end_matches('.').chars().filter(|c| !c.is_whitespace()).collect();
    let (canonical, outcome, prediction, propensity) = match key.to_ascii_lowercase().as_str() {
        "naive" => ("Naive", OutcomeModel::Glm, Prediction::Plugin, PropensityKind::Marginal),
        "fixed" => ("Fixed", OutcomeModel::FixedCenters, Prediction::Plugin, PropensityKind::MixedLogistic),
        "mixed(1|c)" => ("Mixed(1|c)", OutcomeModel::MixedIntercept, Prediction::Blup, PropensityKind::MixedLogistic),
        "mixed(1|c)sam" => ("Mixed(1|c) Sam", OutcomeModel::MixedIntercept, Prediction::Sampled, PropensityKind::MixedLogistic),
        "mixed(1+a|c)" => ("Mixed(1+A|c)", OutcomeModel::MixedSlope, Prediction::Blup, PropensityKind::MixedLogistic),
        "mixed(1+a|c)sam" => ("Mixed(1+A|c) Sam", OutcomeModel::MixedSlope, Prediction::Sampled, PropensityKind::MixedLogistic),
        _ => return Err(Error::Config(format!("unknown estimator `{name}`; expected one of {ROSTER_NAMES:?}"))),
    };
    Ok(RosterEntry { name: canonical.to_string(), adjusted, outcome, prediction, propensity })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RosterOptions {
    /// Outcome-model covariates used by adjusted entries.
    pub adjustment_columns: Vec<usize>,
    /// Covariates in the propensity model (all entries).
    pub propensity_columns: Vec<usize>,
    /// Propensity kind for the naive estimator.
    pub naive_propensity: PropensityKind,
    pub clamp: (f64, f64),
    pub draws: usize,
    pub couple_arm_draws: bool,
    pub glmm: GlmmOptions,
    /// Seed for sampled random-effect predictions.
    pub seed: u64,
}

impl Default for RosterOptions {
    fn default() -> Self {
        RosterOptions {
            adjustment_columns: Vec::new(),
            propensity_columns: Vec::new(),
            naive_propensity: PropensityKind::Marginal,
            clamp: default_clamp(),
            draws: 1000,
            couple_arm_draws: true,
            glmm: GlmmOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EstimatorOutput {
    pub entry: RosterEntry,
    pub centers: Vec<CenterEstimate>,
    /// Per-patient propensities and counterfactual predictions.
    pub p: Vec<f64>,
    pub m1: Vec<f64>,
    pub m0: Vec<f64>,
    pub n_clamped: usize,
    pub sigma2_v: Option<f64>,
    /// Outcome-model random-effect variances (mixed entries).
    pub variance_components: Option<Vec<f64>>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl EstimatorOutput {
    pub fn pooled(&self, scheme: WeightScheme, estimand: Estimand) -> Result<PooledEstimate> {
        if self.entry.is_naive() {
            let mut p = pool(self.centers.clone(), WeightScheme::EqualPatients, estimand)?;
            p.value = mean_in_order(&p.patient_if_values());
            Ok(p)
        } else {
            pool(self.centers.clone(), scheme, estimand)
        }
    }
}

enum OutcomeFit {
    Glm(GlmFit),
    Mixed(MixedFit),
}

/// Shares propensity and outcome fits between roster entries on one dataset.
/// Failed fits are not cached, so each dependent entry reports its own error.
pub struct RosterRunner<'a> {
    data: &'a TrialDataset,
    opts: RosterOptions,
    propensities: Vec<(PropensityKind, PropensityEstimate)>,
    fits: Vec<((OutcomeModel, bool), OutcomeFit)>,
}

impl<'a> RosterRunner<'a> {
    pub fn new(data: &'a TrialDataset, opts: RosterOptions) -> Self {
        RosterRunner { data, opts, propensities: Vec::new(), fits: Vec::new() }
    }

    fn propensity(&mut self, kind: PropensityKind) -> Result<&PropensityEstimate> {
        if let Some(pos) = self.propensities.iter().position(|(k, _)| *k == kind) {
            return Ok(&self.propensities[pos].1);
        }
        let columns = if kind == PropensityKind::Marginal { Vec::new() } else { self.opts.propensity_columns.clone() };
        let est = estimate_propensity(self.data, &PropensityPolicy { kind, covariate_columns: columns, clamp: self.opts.clamp })?;
        self.propensities.push((kind, est));
        Ok(&self.propensities.last().expect("just pushed").1)
    }

    fn outcome(&mut self, model: OutcomeModel, adjusted: bool) -> Result<&OutcomeFit> {
        if let Some(pos) = self.fits.iter().position(|(key, _)| *key == (model, adjusted)) {
            return Ok(&self.fits[pos].1);
        }
        let cols = if adjusted { self.opts.adjustment_columns.clone() } else { Vec::new() };
        let design = DesignSpec::treatment_only().with_covariates(cols);
        let fit = match model {
            OutcomeModel::Glm => OutcomeFit::Glm(fit_glm(self.data, &design)?),
            OutcomeModel::FixedCenters => OutcomeFit::Glm(fit_glm(self.data, &design.with_center_indicators())?),
            OutcomeModel::MixedIntercept | OutcomeModel::MixedSlope => {
                let re = if model == OutcomeModel::MixedSlope {
                    RandomEffectsSpec::intercept_and_slope()
                } else {
                    RandomEffectsSpec::intercept()
                };
                OutcomeFit::Mixed(match self.data.family() {
                    crate::dataset::OutcomeFamily::Gaussian => fit_lmm(self.data, &design, &re)?,
                    crate::dataset::OutcomeFamily::Binomial => fit_glmm_logit_with(self.data, &design, &re, &self.opts.glmm)?,
                })
            }
        };
        self.fits.push(((model, adjusted), fit));
        Ok(&self.fits.last().expect("just pushed").1)
    }

    pub fn run(&mut self, entry: &RosterEntry) -> Result<EstimatorOutput> {
        let propensity_kind = if entry.is_naive() { self.opts.naive_propensity } else { entry.propensity };
        let prop = self.propensity(propensity_kind)?.clone();
        let seed = derive_seed(self.opts.seed, &[entry.outcome as u64, u64::from(entry.adjusted)]);
        let draws = self.opts.draws;
        let couple = self.opts.couple_arm_draws;
        let data = self.data;
        let fit = self.outcome(entry.outcome, entry.adjusted)?;
        let (m1, m0, variance_components, converged, warnings) = match (fit, entry.prediction) {
            (OutcomeFit::Glm(g), Prediction::Plugin) => {
                (predict_counterfactual(g, data, 1)?, predict_counterfactual(g, data, 0)?, None, g.converged, g.warnings())
            }
            (OutcomeFit::Mixed(m), Prediction::Blup | Prediction::Sampled) => {
                let mode = if entry.prediction == Prediction::Blup {
                    PredictionMode::Blup
                } else {
                    PredictionMode::Sampled { draws, seed, couple_arms: couple }
                };
                (
                    predict_counterfactual_mixed(m, data, 1, mode)?,
                    predict_counterfactual_mixed(m, data, 0, mode)?,
                    Some(m.variance_components.clone()),
                    m.converged,
                    Vec::new(),
                )
            }
            _ => return Err(Error::Config(format!("inconsistent roster entry `{}`", entry.label()))),
        };
        let centers = aipw_by_center(data, &prop.p, &m1, &m0)?;
        Ok(EstimatorOutput {
            entry: entry.clone(),
            centers,
            p: prop.p,
            m1,
            m0,
            n_clamped: prop.n_clamped,
            sigma2_v: prop.sigma2_v,
            variance_components,
            converged,
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{OutcomeFamily, PatientRecord};
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn center_direct_evaluation() {
        let e = aipw_center("c", &[1.0, 0.0], &[2.0, 1.0], &[0.5, 0.5], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(e.tau1_hat, 2.0);
        assert_eq!(e.tau0_hat, 1.0);
        assert_eq!(e.tau_hat, 1.0);
    }

    #[test]
    fn perfect_model_leaves_prediction_mean() {
        let y = [1.5, 2.5, 0.5, 4.0];
        let a = [1.0, 1.0, 0.0, 1.0];
        let m1 = [1.5, 2.5, 3.0, 4.0];
        let e = aipw_center("c", &a, &y, &[0.3, 0.6, 0.5, 0.7], &m1, &[0.0; 4]).unwrap();
        assert!((e.tau1_hat - m1.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn six_patient_direct_sum() {
        let a = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let y = [3.1, 1.2, 2.2, 4.0, 0.3, 1.9];
        let p = [0.4, 0.55, 0.62, 0.35, 0.5, 0.45];
        let m1 = [2.8, 2.0, 2.5, 3.3, 1.9, 2.2];
        let m0 = [1.1, 1.0, 0.8, 1.6, 0.9, 1.3];
        let e = aipw_center("c", &a, &y, &p, &m1, &m0).unwrap();
        let mut s1 = 0.0;
        let mut s0 = 0.0;
        for i in 0..6 {
            s1 += if a[i] == 1.0 { (y[i] - m1[i]) / p[i] } else { 0.0 } + m1[i];
            s0 += if a[i] == 0.0 { (y[i] - m0[i]) / (1.0 - p[i]) } else { 0.0 } + m0[i];
        }
        assert!((e.tau1_hat - s1 / 6.0).abs() < 1e-14);
        assert!((e.tau0_hat - s0 / 6.0).abs() < 1e-14);
        assert_eq!(e.tau_hat, e.tau1_hat - e.tau0_hat);
        assert!((e.if_ate.iter().sum::<f64>() / 6.0 - e.tau_hat).abs() < 1e-14);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            aipw_center("c", &[1.0], &[1.0, 2.0], &[0.5], &[0.0], &[0.0]),
            Err(Error::Dimension(_))
        ));
    }

    fn stub(id: &str, n: usize, tau: f64) -> CenterEstimate {
        CenterEstimate {
            center_id: id.into(),
            n_c: n,
            n_treated: 1,
            tau1_hat: tau + 1.0,
            tau0_hat: 1.0,
            tau_hat: tau,
            if_treated: vec![],
            if_control: vec![],
            if_ate: vec![],
        }
    }

    #[test]
    fn pooling_examples() {
        let centers = vec![stub("a", 1, 1.0), stub("b", 3, 3.0)];
        let eq = pool(centers.clone(), WeightScheme::EqualCenters, Estimand::Ate).unwrap();
        assert_eq!(eq.value, 2.0);
        let pat = pool(centers, WeightScheme::EqualPatients, Estimand::Ate).unwrap();
        assert_eq!(pat.value, 2.5);
        assert!(pool(vec![], WeightScheme::EqualCenters, Estimand::Ate).is_err());
    }

    #[test]
    fn pooling_dot_product_and_additivity() {
        let taus = [0.3, -1.2, 2.5, 0.9, 1.1];
        let sizes = [4, 9, 2, 7, 5];
        let centers: Vec<_> = (0..5).map(|c| stub(&c.to_string(), sizes[c], taus[c])).collect();
        for scheme in [WeightScheme::EqualCenters, WeightScheme::EqualPatients] {
            let p = pool(centers.clone(), scheme, Estimand::Ate).unwrap();
            let dot: f64 = p.weights.iter().zip(&taus).map(|(w, t)| w * t).sum();
            assert!((p.value - dot).abs() < 1e-12);
            let p1 = pool(centers.clone(), scheme, Estimand::CounterfactualMeanTreated).unwrap();
            let p0 = pool(centers.clone(), scheme, Estimand::CounterfactualMeanControl).unwrap();
            assert!((p.value - (p1.value - p0.value)).abs() < 1e-12);
        }
    }

    fn random_data(seed: u64, k: usize, family: OutcomeFamily) -> TrialDataset {
        let mut rng = stream(seed, &[]);
        let mut records = Vec::new();
        for c in 0..k {
            let n = rng.random_range(2..9);
            let b: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5;
            for i in 0..n {
                let x: f64 = rng.sample(StandardNormal);
                let a = u8::from(rng.random_bool(0.5));
                let eta = 0.3 + b + 0.6 * f64::from(a) + 0.8 * x;
                let y = match family {
                    OutcomeFamily::Gaussian => eta + rng.sample::<f64, _>(StandardNormal),
                    OutcomeFamily::Binomial => f64::from(u8::from(rng.random_bool(crate::dataset::expit(eta)))),
                };
                records.push(PatientRecord {
                    patient_id: format!("{c}-{i}"),
                    center_id: format!("c{c}"),
                    cluster_id: None,
                    treatment: a,
                    covariates: vec![x],
                    outcome: y,
                });
            }
        }
        TrialDataset::new(records, family, vec!["x".into()]).unwrap()
    }

    #[test]
    fn naive_equals_equal_patient_pooling_and_gcomp() {
        for family in [OutcomeFamily::Gaussian, OutcomeFamily::Binomial] {
            for seed in 0..5 {
                let d = random_data(seed, 12, family);
                let fit = fit_glm(&d, &DesignSpec::treatment_only().with_covariates(vec![0])).unwrap();
                let naive = naive_aipw(&d, &fit, &PropensityPolicy::marginal(), Estimand::Ate).unwrap();
                let p = estimate_propensity(&d, &PropensityPolicy::marginal()).unwrap().p;
                let m1 = predict_counterfactual(&fit, &d, 1).unwrap();
                let m0 = predict_counterfactual(&fit, &d, 0).unwrap();
                let pooled = pool(aipw_by_center(&d, &p, &m1, &m0).unwrap(), WeightScheme::EqualPatients, Estimand::Ate).unwrap();
                assert!((naive.value - pooled.value).abs() < 1e-12);
                assert!((naive.value - gcomp_ate(&m1, &m0)).abs() < 1e-8, "{family:?} seed {seed}");
            }
        }
    }

    #[test]
    fn zero_model_gives_difference_in_means() {
        let d = random_data(9, 6, OutcomeFamily::Gaussian);
        let p = estimate_propensity(&d, &PropensityPolicy::marginal()).unwrap().p;
        let zero = vec![0.0; d.n()];
        let est = naive_from_predictions(&d, &p, &zero, &zero, Estimand::Ate).unwrap();
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..d.n() {
            if d.treatment(i) == 1.0 {
                s1 += d.outcome(i);
                n1 += 1.0;
            } else {
                s0 += d.outcome(i);
                n0 += 1.0;
            }
        }
        assert!((est.value - (s1 / n1 - s0 / n0)).abs() < 1e-12);
    }

    #[test]
    fn single_arm_center_uses_model_only() {
        let a = [1.0, 1.0, 1.0];
        let m0 = [0.2, 0.4, 0.9];
        let e = aipw_center("c", &a, &[1.0, 2.0, 3.0], &[0.5; 3], &[1.0; 3], &m0).unwrap();
        assert!((e.tau0_hat - 0.5).abs() < 1e-15);
        assert!(!e.has_required_arms(Estimand::Ate));
        assert!(e.has_required_arms(Estimand::CounterfactualMeanTreated));
    }

    fn clustered(seed: u64, j: usize) -> TrialDataset {
        let mut rng = stream(seed, &[]);
        let mut records = Vec::new();
        for c in 0..j {
            let a = u8::from(c % 2 == 0);
            for i in 0..3 {
                records.push(PatientRecord {
                    patient_id: format!("{c}-{i}"),
                    center_id: format!("s{}", c % 2),
                    cluster_id: Some(format!("k{c}")),
                    treatment: a,
                    covariates: vec![],
                    outcome: rng.random_range(0.0..4.0),
                });
            }
        }
        TrialDataset::new(records, OutcomeFamily::Gaussian, vec![]).unwrap()
    }

    #[test]
    fn cluster_mean_direct_evaluation() {
        let d = clustered(3, 2);
        let zero = vec![0.0; d.n()];
        let est = cluster_randomized_mean(&d, &[0.5, 0.5], &zero, &zero).unwrap();
        let rows = d.cluster_rows().unwrap();
        let ybar = |r: &Vec<usize>| r.iter().map(|&i| d.outcome(i)).sum::<f64>() / r.len() as f64;
        let expect: f64 = rows.iter().map(|r| d.treatment(r[0]) / 0.5 * ybar(r)).sum::<f64>() / 2.0;
        assert!((est.psi1 - expect).abs() < 1e-14);
    }

    #[test]
    fn cluster_mean_ten_cluster_oracle() {
        let d = clustered(5, 10);
        let p: Vec<f64> = (0..10).map(|j| 0.35 + 0.03 * j as f64).collect();
        let m1: Vec<f64> = (0..d.n()).map(|i| 1.0 + 0.1 * i as f64).collect();
        let m0: Vec<f64> = (0..d.n()).map(|i| 0.5 - 0.05 * i as f64).collect();
        let est = cluster_randomized_mean(&d, &p, &m1, &m0).unwrap();
        let mut total1 = 0.0;
        let mut total0 = 0.0;
        for (j, r) in d.cluster_rows().unwrap().iter().enumerate() {
            let a = d.treatment(r[0]);
            let mut s1 = 0.0;
            let mut s0 = 0.0;
            for &i in r {
                s1 += a * (d.outcome(i) - m1[i]) / p[j] + m1[i];
                s0 += (1.0 - a) * (d.outcome(i) - m0[i]) / (1.0 - p[j]) + m0[i];
            }
            total1 += s1 / r.len() as f64;
            total0 += s0 / r.len() as f64;
        }
        assert!((est.psi1 - total1 / 10.0).abs() < 1e-12);
        assert!((est.ate - (total1 - total0) / 10.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cluster_propensity_rejected() {
        let d = clustered(3, 2);
        let zero = vec![0.0; d.n()];
        assert!(cluster_randomized_mean(&d, &[1.0, 1.0], &zero, &zero).is_err());
        let mut records = d.records().to_vec();
        records[1].treatment = 0;
        let d2 = TrialDataset::new(records, OutcomeFamily::Gaussian, vec![]).unwrap();
        assert!(cluster_randomized_mean(&d2, &[0.5, 0.5], &zero, &zero).is_err());
    }

    #[test]
    fn roster_names_resolve() {
        for name in ROSTER_NAMES {
            let e = roster_entry(name, false).unwrap();
            assert_eq!(e.name, name);
        }
        assert_eq!(roster_entry("Mixed(1+A|c) Sam.", true).unwrap().label(), "Mixed(1+A|c) Sam adj");
        assert!(roster_entry("Random forest", false).is_err());
    }

    #[test]
    fn roster_runs_all_entries() {
        for family in [OutcomeFamily::Gaussian, OutcomeFamily::Binomial] {
            let d = random_data(17, 15, family);
            let opts = RosterOptions { adjustment_columns: vec![0], draws: 50, seed: 4, ..Default::default() };
            let mut runner = RosterRunner::new(&d, opts);
            for adjusted in [false, true] {
                for name in ROSTER_NAMES {
                    let entry = roster_entry(name, adjusted).unwrap();
                    let out = runner.run(&entry).unwrap();
                    let ate = out.pooled(WeightScheme::EqualCenters, Estimand::Ate).unwrap();
                    assert!(ate.value.is_finite() && ate.value.abs() < 3.0, "{} {}", entry.label(), ate.value);
                }
            }
        }
    }
}
