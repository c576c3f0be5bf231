//! Fixed-effect design specification shared by GLM and mixed-model fits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::TrialDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(default = "yes")]
    pub include_treatment: bool,
    #[serde(default)]
    pub covariate_columns: Vec<usize>,
    #[serde(default)]
    pub center_indicators: bool,
    /// Fit treated and control patients separately; the treatment column is
    /// then omitted within each arm's fit.
    #[serde(default)]
    pub fit_per_arm: bool,
}

fn yes() -> bool {
    true
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self::treatment_only()
    }
}

impl DesignSpec {
    pub fn treatment_only() -> Self {
        DesignSpec { include_treatment: true, covariate_columns: Vec::new(), center_indicators: false, fit_per_arm: false }
    }

    pub fn intercept_only() -> Self {
        DesignSpec { include_treatment: false, ..Self::treatment_only() }
    }

    pub fn with_covariates(mut self, cols: Vec<usize>) -> Self {
        self.covariate_columns = cols;
        self
    }

    pub fn with_center_indicators(mut self) -> Self {
        self.center_indicators = true;
        self
    }

    pub fn validate(&self, data: &TrialDataset) -> Result<()> {
        if let Some(&j) = self.covariate_columns.iter().find(|&&j| j >= data.n_covariates()) {
            return Err(Error::Config(format!(
                "covariate column {j} out of range ({} covariates)",
                data.n_covariates()
            )));
        }
        Ok(())
    }

    fn has_treatment_column(&self) -> bool {
        self.include_treatment && !self.fit_per_arm
    }

    /// Number of columns excluding center indicators.
    pub fn n_fixed(&self) -> usize {
        1 + usize::from(self.has_treatment_column()) + self.covariate_columns.len()
    }

    /// Index of the treatment column, if any.
    pub fn treatment_column(&self) -> Option<usize> {
        self.has_treatment_column().then_some(1)
    }

    pub fn fixed_names(&self, data: &TrialDataset) -> Vec<String> {
        let mut names = vec!["(Intercept)".to_string()];
        if self.has_treatment_column() {
            names.push("A".into());
        }
        names.extend(self.covariate_columns.iter().map(|&j| data.covariate_names()[j].clone()));
        names
    }

    /// Intercept, treatment (optionally forced to `arm`) and covariates for patient `i`.
    pub fn fill_row(&self, data: &TrialDataset, i: usize, arm: Option<f64>, out: &mut [f64]) {
        out[0] = 1.0;
        let mut j = 1;
        if self.has_treatment_column() {
            out[j] = arm.unwrap_or_else(|| data.treatment(i));
            j += 1;
        }
        for &c in &self.covariate_columns {
            out[j] = data.covariate(i, c);
            j += 1;
        }
    }

    pub fn fixed_matrix(&self, data: &TrialDataset, rows: &[usize], arm: Option<f64>) -> DMatrix<f64> {
        let p = self.n_fixed();
        let mut x = DMatrix::zeros(rows.len(), p);
        let mut buf = vec![0.0; p];
        for (r, &i) in rows.iter().enumerate() {
            self.fill_row(data, i, arm, &mut buf);
            for j in 0..p {
                x[(r, j)] = buf[j];
            }
        }
        x
    }
}
