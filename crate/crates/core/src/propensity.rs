//! Randomization-probability estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{expit, TrialDataset};
use crate::design::DesignSpec;
use crate::error::{Error, Result};
use crate::glm::fit_logistic_matrix;
use crate::mixed::glmm::{logit_problem, Integration};
use crate::mixed::RandomEffectsSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityKind {
    Marginal,
    LogisticCovariates,
    MixedLogistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityPolicy {
    pub kind: PropensityKind,
    #[serde(default)]
    pub covariate_columns: Vec<usize>,
    #[serde(default = "default_clamp")]
    pub clamp: (f64, f64),
}

pub fn default_clamp() -> (f64, f64) {
    (0.01, 0.99)
}

impl PropensityPolicy {
    pub fn marginal() -> Self {
        PropensityPolicy { kind: PropensityKind::Marginal, covariate_columns: Vec::new(), clamp: default_clamp() }
    }

    pub fn mixed() -> Self {
        PropensityPolicy { kind: PropensityKind::MixedLogistic, ..Self::marginal() }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clamp;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!("propensity clamp must satisfy 0 < low < high < 1, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PropensityEstimate {
    pub p: Vec<f64>,
    /// How many probabilities were moved onto a clamp bound.
    pub n_clamped: usize,
    /// Estimated random center-intercept variance (mixed policy only).
    pub sigma2_v: Option<f64>,
}

fn clamp_all(raw: Vec<f64>, (lo, hi): (f64, f64)) -> (Vec<f64>, usize) {
    let mut n = 0;
    let p = raw
        .into_iter()
        .map(|v| {
            if v < lo {
                n += 1;
                lo
            } else if v > hi {
                n += 1;
                hi
            } else {
                v
            }
        })
        .collect();
    (p, n)
}

pub fn estimate_propensity(data: &TrialDataset, policy: &PropensityPolicy) -> Result<PropensityEstimate> {
    policy.validate()?;
    let a = data.treatments();
    let n_treated = a.iter().filter(|&&v| v == 1.0).count();
    if n_treated == 0 || n_treated == data.n() {
        return Err(Error::InvalidData("both arms must be present to estimate propensities".into()));
    }
    let design = DesignSpec::intercept_only().with_covariates(policy.covariate_columns.clone());
    design.validate(data)?;
    let (raw, sigma2_v) = match policy.kind {
        PropensityKind::Marginal => (vec![n_treated as f64 / data.n() as f64; data.n()], None),
        PropensityKind::LogisticCovariates => {
            let all: Vec<usize> = (0..data.n()).collect();
            let x = design.fixed_matrix(data, &all, None);
            let fit = fit_logistic_matrix(&x, &DVector::from_vec(a))?;
            let eta = &x * &fit.coefficients;
            (eta.iter().map(|&e| expit(e)).collect(), None)
        }
        PropensityKind::MixedLogistic => {
            let problem = logit_problem(data, &design, &RandomEffectsSpec::intercept(), &a)?;
            let sol = problem.fit(Integration::Laplace)?;
            let all: Vec<usize> = (0..data.n()).collect();
            let x = design.fixed_matrix(data, &all, None);
            let eta = &x * &sol.beta;
            let p = (0..data.n()).map(|i| expit(eta[i] + sol.blups[data.center_of(i)][0])).collect();
            (p, Some(sol.variances[0]))
        }
    };
    let (p, n_clamped) = clamp_all(raw, policy.clamp);
    Ok(PropensityEstimate { p, n_clamped, sigma2_v })
}

/// Cluster-level propensity for cluster-randomized data: plain logistic
/// regression of the cluster's arm on cluster means of `covariate_columns`.
/// Returns one probability per cluster, in cluster enumeration order.
pub fn cluster_propensity(data: &TrialDataset, covariate_columns: &[usize], clamp: (f64, f64)) -> Result<(Vec<f64>, usize)> {
    PropensityPolicy { kind: PropensityKind::LogisticCovariates, covariate_columns: covariate_columns.to_vec(), clamp }
        .validate()?;
    let rows = data.cluster_rows().ok_or_else(|| Error::InvalidData("cluster ids required".into()))?;
    let j = rows.len();
    let p = 1 + covariate_columns.len();
    let mut x = DMatrix::zeros(j, p);
    let mut a = DVector::zeros(j);
    for (c, r) in rows.iter().enumerate() {
        let a0 = data.treatment(r[0]);
        if r.iter().any(|&i| data.treatment(i) != a0) {
            return Err(Error::InvalidData(format!("treatment varies within cluster {c}")));
        }
        a[c] = a0;
        x[(c, 0)] = 1.0;
        for (k, &col) in covariate_columns.iter().enumerate() {
            x[(c, k + 1)] = r.iter().map(|&i| data.covariate(i, col)).sum::<f64>() / r.len() as f64;
        }
    }
    let treated = a.iter().filter(|&&v| v == 1.0).count();
    if treated == 0 || treated == j {
        return Err(Error::InvalidData("both arms must be present among clusters".into()));
    }
    let fit = fit_logistic_matrix(&x, &a)?;
    let eta = &x * &fit.coefficients;
    Ok(clamp_all(eta.iter().map(|&e| expit(e)).collect(), clamp))
}
