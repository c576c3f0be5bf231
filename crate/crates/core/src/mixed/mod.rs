//! Mixed-effects outcome models with independent center-level random effects.

pub mod glmm;
pub mod lmm;
pub mod predict;

use serde::{Deserialize, Serialize};

use crate::dataset::{OutcomeFamily, TrialDataset};
use crate::design::DesignSpec;
use crate::error::{Error, Result};

pub use glmm::{fit_glmm_logit, fit_glmm_logit_with, GlmmOptions, Integration};
pub use lmm::{fit_lmm, GroupedDesign, LmmSolution};
pub use predict::{predict_counterfactual_mixed, PredictionMode};

/// Variance floor on the optimizer scale; anything pinned there is reported as 0.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomEffectsSpec {
    #[serde(default = "yes")]
    pub random_intercept: bool,
    #[serde(default)]
    pub random_treatment_slope: bool,
    #[serde(default)]
    pub random_covariate_slopes: Vec<usize>,
}

fn yes() -> bool {
    true
}

impl RandomEffectsSpec {
    pub fn intercept() -> Self {
        RandomEffectsSpec { random_intercept: true, random_treatment_slope: false, random_covariate_slopes: Vec::new() }
    }

    pub fn intercept_and_slope() -> Self {
        RandomEffectsSpec { random_treatment_slope: true, ..Self::intercept() }
    }

    pub fn n_terms(&self) -> usize {
        usize::from(self.random_intercept) + usize::from(self.random_treatment_slope) + self.random_covariate_slopes.len()
    }

    pub fn term_names(&self, data: &TrialDataset) -> Vec<String> {
        let mut v = Vec::new();
        if self.random_intercept {
            v.push("(Intercept)".to_string());
        }
        if self.random_treatment_slope {
            v.push("A".into());
        }
        v.extend(self.random_covariate_slopes.iter().map(|&j| data.covariate_names()[j].clone()));
        v
    }

    /// Random-effect design values for patient `i`, treatment forced to `arm` if given.
    pub fn fill_z(&self, data: &TrialDataset, i: usize, arm: Option<f64>, out: &mut [f64]) {
        let mut j = 0;
        if self.random_intercept {
            out[j] = 1.0;
            j += 1;
        }
        if self.random_treatment_slope {
            out[j] = arm.unwrap_or_else(|| data.treatment(i));
            j += 1;
        }
        for &c in &self.random_covariate_slopes {
            out[j] = data.covariate(i, c);
            j += 1;
        }
    }

    fn validate(&self, data: &TrialDataset) -> Result<()> {
        if self.n_terms() == 0 {
            return Err(Error::Config("mixed model needs at least one random term".into()));
        }
        if self.random_covariate_slopes.iter().any(|&j| j >= data.n_covariates()) {
            return Err(Error::Config("random slope covariate out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoglikKind {
    Reml,
    LaplaceMl,
    /// Adaptive Gauss-Hermite with the given number of nodes.
    AgqMl(usize),
}

#[derive(Clone, Debug)]
pub struct MixedFit {
    pub family: OutcomeFamily,
    pub design: DesignSpec,
    pub re: RandomEffectsSpec,
    pub fixed_names: Vec<String>,
    pub fixed_coefficients: Vec<f64>,
    pub term_names: Vec<String>,
    /// One variance per random term, in `term_names` order.
    pub variance_components: Vec<f64>,
    /// Residual variance (gaussian only).
    pub residual_variance: Option<f64>,
    /// Per center (enumeration order), one predicted effect per random term.
    pub blups: Vec<Vec<f64>>,
    pub converged: bool,
    pub loglik_kind: LoglikKind,
    /// Maximized (restricted or approximate marginal) log-likelihood.
    pub loglik: f64,
    pub center_ids: Vec<String>,
}

fn check_common(data: &TrialDataset, design: &DesignSpec, re: &RandomEffectsSpec) -> Result<()> {
    if data.k() < 2 {
        return Err(Error::InvalidData("mixed model needs at least 2 centers".into()));
    }
    if design.center_indicators || design.fit_per_arm {
        return Err(Error::Config("mixed models take neither center indicators nor per-arm fits".into()));
    }
    design.validate(data)?;
    re.validate(data)
}
