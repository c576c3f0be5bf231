//! Analysis of a trial dataset with the estimator roster.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{CsvSchema, OutcomeFamily, TrialDataset, WeightScheme};
use crate::error::{Error, Result};
use crate::estimators::{
    cluster_randomized_mean, gcomp_ate, roster_entry, Estimand, EstimatorOutput, RosterOptions, RosterRunner, ROSTER_NAMES,
};
use crate::mixed::glmm::GlmmOptions;
use crate::propensity::{cluster_propensity, default_clamp, PropensityKind};
use crate::stats::pearson;
use crate::variance::{
    cluster_ate_variance, cluster_variance, hierarchical_variance, naive_inference, total_inference, HeterogeneityMethod,
    HierarchicalVariance, IntervalKind, MethodInference,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub family: OutcomeFamily,
    pub columns: CsvSchema,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    #[serde(default = "default_blocks")]
    pub adjusted: Vec<bool>,
    /// Outcome-model covariates for adjusted entries; all schema covariates when absent.
    #[serde(default)]
    pub adjust_for: Option<Vec<String>>,
    #[serde(default)]
    pub propensity_covariates: Vec<String>,
    #[serde(default = "default_naive_propensity")]
    pub naive_propensity: PropensityKind,
    #[serde(default = "default_weights")]
    pub weights: WeightScheme,
    #[serde(default = "default_methods")]
    pub methods: Vec<HeterogeneityMethod>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_interval")]
    pub interval: IntervalKind,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_true")]
    pub couple_arm_draws: bool,
    #[serde(default = "default_clamp")]
    pub clamp: (f64, f64),
    #[serde(default)]
    pub glmm: GlmmOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cluster_randomized: bool,
    #[serde(default)]
    pub hierarchical: bool,
}

fn default_estimators() -> Vec<String> {
    ROSTER_NAMES.iter().map(|s| s.to_string()).collect()
}
fn default_blocks() -> Vec<bool> {
    vec![false]
}
fn default_naive_propensity() -> PropensityKind {
    PropensityKind::Marginal
}
fn default_weights() -> WeightScheme {
    WeightScheme::EqualCenters
}
fn default_methods() -> Vec<HeterogeneityMethod> {
    HeterogeneityMethod::ALL.to_vec()
}
fn default_level() -> f64 {
    0.95
}
fn default_interval() -> IntervalKind {
    IntervalKind::StudentT
}
fn default_draws() -> usize {
    1000
}
fn default_true() -> bool {
    true
}

impl AnalysisConfig {
    pub fn new(family: OutcomeFamily, columns: CsvSchema) -> Self {
        AnalysisConfig {
            family,
            columns,
            estimators: default_estimators(),
            adjusted: default_blocks(),
            adjust_for: None,
            propensity_covariates: Vec::new(),
            naive_propensity: default_naive_propensity(),
            weights: default_weights(),
            methods: default_methods(),
            level: default_level(),
            interval: default_interval(),
            draws: default_draws(),
            couple_arm_draws: true,
            clamp: default_clamp(),
            glmm: GlmmOptions::default(),
            seed: 0,
            cluster_randomized: false,
            hierarchical: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn columns_of(&self, names: &[String]) -> Result<Vec<usize>> {
        let all = &self.columns.covariates;
        names
            .iter()
            .map(|n| {
                all.iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Config(format!("covariate `{n}` is not among the mapped covariates {all:?}")))
            })
            .collect()
    }

    fn roster_options(&self) -> Result<RosterOptions> {
        let adjust = match &self.adjust_for {
            Some(names) => self.columns_of(names)?,
            None => (0..self.columns.covariates.len()).collect(),
        };
        Ok(RosterOptions {
            adjustment_columns: adjust,
            propensity_columns: self.columns_of(&self.propensity_covariates)?,
            naive_propensity: self.naive_propensity,
            clamp: self.clamp,
            draws: self.draws,
            couple_arm_draws: self.couple_arm_draws,
            glmm: self.glmm.clone(),
            seed: self.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimandReport {
    pub estimand: Estimand,
    pub estimate: f64,
    pub se_naive: Option<f64>,
    pub df_naive: Option<f64>,
    pub naive_interval: Option<(f64, f64)>,
    pub methods: Vec<MethodInference>,
    pub within_fallbacks: usize,
    pub hierarchical: Option<HierarchicalVariance>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CenterRow {
    pub center_id: String,
    pub n_c: usize,
    pub n_treated: usize,
    pub tau1_hat: f64,
    pub tau0_hat: f64,
    pub tau_hat: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GcompCheck {
    pub aipw: f64,
    pub gcomp: f64,
    pub difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimatorReport {
    pub label: String,
    pub estimands: Vec<EstimandReport>,
    pub centers: Vec<CenterRow>,
    pub n_clamped: usize,
    /// Correlation between center size and center ATE estimate.
    pub size_effect_correlation: f64,
    pub sigma2_v: Option<f64>,
    pub variance_components: Option<Vec<f64>>,
    pub gcomp_check: Option<GcompCheck>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterReport {
    pub label: String,
    pub n_clusters: usize,
    /// (estimand, estimate, SE, interval) with J − 1 degrees of freedom.
    pub rows: Vec<(Estimand, f64, f64, (f64, f64))>,
    pub n_clamped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub n: usize,
    pub k: usize,
    pub weights: WeightScheme,
    pub level: f64,
    pub estimators: Vec<EstimatorReport>,
    pub cluster_randomized: Vec<ClusterReport>,
    /// Estimators that could not be computed, with the reason.
    pub failures: Vec<(String, String)>,
}

fn t_interval(estimate: f64, se: f64, df: f64, level: f64) -> Result<(f64, f64)> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let q = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Numerical(e.to_string()))?
        .inverse_cdf(1.0 - (1.0 - level) / 2.0);
    Ok((estimate - q * se, estimate + q * se))
}

/// Per-patient influence values in dataset row order.
fn patient_ifs(data: &TrialDataset, out: &EstimatorOutput, estimand: Estimand) -> Vec<f64> {
    let mut v = vec![0.0; data.n()];
    for (c, center) in out.centers.iter().enumerate() {
        for (&i, &x) in data.center_rows(c).iter().zip(center.if_values(estimand)) {
            v[i] = x;
        }
    }
    v
}

fn estimator_report(data: &TrialDataset, out: &EstimatorOutput, cfg: &AnalysisConfig) -> Result<EstimatorReport> {
    let mut estimands = Vec::new();
    for est in Estimand::ALL {
        let pooled = out.pooled(cfg.weights, est)?;
        let hierarchical = if cfg.hierarchical {
            let omega: Vec<f64> = match cfg.weights {
                WeightScheme::EqualPatients => vec![1.0; data.k()],
                WeightScheme::EqualCenters => data.center_sizes().iter().map(|&n| 1.0 / n as f64).collect(),
            };
            Some(hierarchical_variance(data, &patient_ifs(data, out, est), &omega)?)
        } else {
            None
        };
        let report = if out.entry.is_naive() {
            let inf = naive_inference(&pooled, cfg.level, cfg.interval)?;
            EstimandReport {
                estimand: est,
                estimate: inf.estimate,
                se_naive: inf.se_naive,
                df_naive: Some(data.n() as f64 - 1.0),
                naive_interval: inf.naive_interval,
                methods: Vec::new(),
                within_fallbacks: 0,
                hierarchical,
            }
        } else {
            let inf = total_inference(&pooled, &cfg.methods, cfg.level, cfg.interval)?;
            EstimandReport {
                estimand: est,
                estimate: inf.estimate,
                se_naive: None,
                df_naive: None,
                naive_interval: None,
                within_fallbacks: inf.within.as_ref().map_or(0, |w| w.n_fallback()),
                methods: inf.by_method,
                hierarchical,
            }
        };
        estimands.push(report);
    }
    let weights = cfg.weights.weights_for_sizes(&data.center_sizes());
    let centers: Vec<CenterRow> = out
        .centers
        .iter()
        .zip(&weights)
        .map(|(c, &w)| CenterRow {
            center_id: c.center_id.clone(),
            n_c: c.n_c,
            n_treated: c.n_treated,
            tau1_hat: c.tau1_hat,
            tau0_hat: c.tau0_hat,
            tau_hat: c.tau_hat,
            weight: w,
        })
        .collect();
    let sizes: Vec<f64> = centers.iter().map(|c| c.n_c as f64).collect();
    let taus: Vec<f64> = centers.iter().map(|c| c.tau_hat).collect();
    let gcomp_check = (out.entry.is_naive() && cfg.naive_propensity == PropensityKind::Marginal).then(|| {
        let aipw = estimands[2].estimate;
        let g = gcomp_ate(&out.m1, &out.m0);
        GcompCheck { aipw, gcomp: g, difference: aipw - g }
    });
    Ok(EstimatorReport {
        label: out.entry.label(),
        estimands,
        centers,
        n_clamped: out.n_clamped,
        size_effect_correlation: pearson(&sizes, &taus),
        sigma2_v: out.sigma2_v,
        variance_components: out.variance_components.clone(),
        gcomp_check,
        warnings: out.warnings.clone(),
    })
}

fn cluster_report(data: &TrialDataset, out: &EstimatorOutput, cfg: &AnalysisConfig, cols: &[usize]) -> Result<ClusterReport> {
    let (p, n_clamped) = cluster_propensity(data, cols, cfg.clamp)?;
    let est = cluster_randomized_mean(data, &p, &out.m1, &out.m0)?;
    let j = est.psi1_by_cluster.len();
    let df = j as f64 - 1.0;
    let v1 = cluster_variance(&est.psi1_by_cluster)?;
    let v0 = cluster_variance(&est.psi0_by_cluster)?;
    let va = cluster_ate_variance(&est.psi1_by_cluster, &est.psi0_by_cluster)?;
    let mut rows = Vec::new();
    for (e, value, var) in [
        (Estimand::CounterfactualMeanTreated, est.psi1, v1),
        (Estimand::CounterfactualMeanControl, est.psi0, v0),
        (Estimand::Ate, est.ate, va),
    ] {
        let se = var.sqrt();
        rows.push((e, value, se, t_interval(value, se, df, cfg.level)?));
    }
    Ok(ClusterReport { label: out.entry.label(), n_clusters: j, rows, n_clamped })
}

/// Runs every configured roster entry. Estimator failures are recorded in
/// the report; an error is returned only when nothing could be computed.
pub fn analyze(data: &TrialDataset, cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::Config(format!("level must lie in (0, 1), got {}", cfg.level)));
    }
    if (cfg.cluster_randomized || cfg.hierarchical) && !data.has_clusters() {
        return Err(Error::Config("cluster-randomized and hierarchical modes need a cluster column".into()));
    }
    let opts = cfg.roster_options()?;
    let propensity_cols = opts.propensity_columns.clone();
    let mut entries = Vec::new();
    for &adj in &cfg.adjusted {
        for name in &cfg.estimators {
            entries.push(roster_entry(name, adj)?);
        }
    }
    let mut runner = RosterRunner::new(data, opts);
    let mut report = AnalysisReport {
        n: data.n(),
        k: data.k(),
        weights: cfg.weights,
        level: cfg.level,
        estimators: Vec::new(),
        cluster_randomized: Vec::new(),
        failures: Vec::new(),
    };
    for entry in &entries {
        let result = runner.run(entry).and_then(|out| {
            let r = estimator_report(data, &out, cfg)?;
            let c = if cfg.cluster_randomized { Some(cluster_report(data, &out, cfg, &propensity_cols)?) } else { None };
            Ok((r, c))
        });
        match result {
            Ok((r, c)) => {
                report.estimators.push(r);
                report.cluster_randomized.extend(c);
            }
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => {
                log::warn!("{} failed: {e}", entry.label());
                report.failures.push((entry.label(), e.to_string()));
            }
        }
    }
    if report.estimators.is_empty() {
        let reasons: Vec<String> = report.failures.iter().map(|(l, e)| format!("{l}: {e}")).collect();
        return Err(Error::Numerical(format!("no estimator could be computed ({})", reasons.join("; "))));
    }
    Ok(report)
}

impl AnalysisReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let pct = 100.0 * self.level;
        let _ = writeln!(out, "n = {}, k = {}, weights = {}, level = {pct}%", self.n, self.k, self.weights.as_str());
        for r in &self.estimators {
            let _ = writeln!(out, "\n== {} ==", r.label);
            for e in &r.estimands {
                let _ = write!(out, "{:<5} estimate {:>10.5}", e.estimand.as_str(), e.estimate);
                if let (Some(se), Some((lo, hi))) = (e.se_naive, e.naive_interval) {
                    let _ = write!(out, "  naive SE {se:.5} df {} CI [{lo:.5}, {hi:.5}]", e.df_naive.unwrap_or(f64::NAN));
                }
                let _ = writeln!(out);
                for m in &e.methods {
                    let _ = writeln!(
                        out,
                        "      {:<4} SE {:.5}  sigma2_u {:.6}  rho {:.4}  df {:.1}  CI [{:.5}, {:.5}]",
                        m.method.as_str(),
                        m.se,
                        m.heterogeneity.sigma2_u,
                        m.rho_hat,
                        m.df,
                        m.interval.0,
                        m.interval.1
                    );
                }
                if let Some(h) = &e.hierarchical {
                    let _ = writeln!(
                        out,
                        "      hierarchical SE {:.5}  (center {:.5}, cluster {:.5}, residual {:.5}{})",
                        h.variance.sqrt(),
                        h.var_center,
                        h.var_cluster,
                        h.var_residual,
                        if h.cluster_level_dropped { ", cluster level dropped" } else { "" }
                    );
                }
            }
            if let Some(g) = &r.gcomp_check {
                let _ = writeln!(out, "G-computation cross-check: AIPW {:.10} vs G-comp {:.10} (difference {:.3e})", g.aipw, g.gcomp, g.difference);
            }
            let fallbacks: Vec<String> =
                r.estimands.iter().map(|e| format!("{} {}", e.estimand.as_str(), e.within_fallbacks)).collect();
            let _ = writeln!(
                out,
                "diagnostics: clamped propensities {}, variance fallbacks [{}], corr(n_c, tau_c) {:.4}",
                r.n_clamped,
                fallbacks.join(", "),
                r.size_effect_correlation
            );
            if let Some(v) = r.sigma2_v {
                let _ = writeln!(out, "propensity random-intercept variance {v:.6}");
            }
            if let Some(vc) = &r.variance_components {
                let _ = writeln!(out, "outcome random-effect variances {vc:?}");
            }
            for w in &r.warnings {
                let _ = writeln!(out, "warning: {w}");
            }
            let _ = writeln!(out, "{:<12} {:>6} {:>6} {:>10} {:>10} {:>10} {:>8}", "center", "n_c", "n_trt", "tau1", "tau0", "tau", "weight");
            for c in &r.centers {
                let _ = writeln!(
                    out,
                    "{:<12} {:>6} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>8.4}",
                    c.center_id, c.n_c, c.n_treated, c.tau1_hat, c.tau0_hat, c.tau_hat, c.weight
                );
            }
        }
        for c in &self.cluster_randomized {
            let _ = writeln!(out, "\n== {} (cluster-randomized, J = {}) ==", c.label, c.n_clusters);
            for (e, v, se, (lo, hi)) in &c.rows {
                let _ = writeln!(out, "{:<5} estimate {v:>10.5}  SE {se:.5}  CI [{lo:.5}, {hi:.5}]", e.as_str());
            }
        }
        for (l, e) in &self.failures {
            let _ = writeln!(out, "\n{l}: failed ({e})");
        }
        out
    }

    pub fn per_center_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["estimator", "center_id", "n_c", "n_treated", "tau1_hat", "tau0_hat", "tau_hat", "weight"])?;
        for r in &self.estimators {
            for c in &r.centers {
                w.write_record([
                    r.label.clone(),
                    c.center_id.clone(),
                    c.n_c.to_string(),
                    c.n_treated.to_string(),
                    c.tau1_hat.to_string(),
                    c.tau0_hat.to_string(),
                    c.tau_hat.to_string(),
                    c.weight.to_string(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{generate, ClusterDgm, DgmSpec, Endpoint};

    fn config(data: &TrialDataset) -> AnalysisConfig {
        AnalysisConfig::new(data.family(), CsvSchema::canonical(data))
    }

    #[test]
    fn naive_report_carries_gcomp_check() {
        let data = generate(&DgmSpec::new(Endpoint::Binary, 2, (0.5, 0.0, 0.0)), 8).unwrap();
        let mut cfg = config(&data);
        cfg.estimators = vec!["Naive".into()];
        cfg.adjusted = vec![true];
        let rep = analyze(&data, &cfg).unwrap();
        let g = rep.estimators[0].gcomp_check.as_ref().unwrap();
        assert!(g.difference.abs() <= 1e-8, "{g:?}");
        assert!(rep.render().contains("G-computation cross-check"));
    }

    #[test]
    fn equal_sizes_make_schemes_agree() {
        let mut spec = DgmSpec::new(Endpoint::Continuous, 1, (0.1, 0.1, 0.0));
        spec.layout = Some(crate::simgen::CenterLayout { k: 12, avg: 8.0, min: 8, max: 8 });
        let data = generate(&spec, 4).unwrap();
        let mut cfg = config(&data);
        cfg.estimators = vec!["Mixed(1|c)".into(), "Fixed".into()];
        let a = analyze(&data, &cfg).unwrap();
        cfg.weights = WeightScheme::EqualPatients;
        let b = analyze(&data, &cfg).unwrap();
        for (x, y) in a.estimators.iter().zip(&b.estimators) {
            for (ex, ey) in x.estimands.iter().zip(&y.estimands) {
                assert!((ex.estimate - ey.estimate).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn analysis_recovers_generating_effect() {
        let spec = DgmSpec::new(Endpoint::Continuous, 5, (0.15, 0.15, 0.0));
        let data = generate(&spec, 21).unwrap();
        let mut cfg = config(&data);
        cfg.estimators = vec!["Mixed(1+A|c)".into()];
        cfg.adjusted = vec![true];
        let rep = analyze(&data, &cfg).unwrap();
        let ate = &rep.estimators[0].estimands[2];
        let se = ate.methods[0].se;
        assert!((ate.estimate - 0.29).abs() < 3.0 * se, "{} ± {se}", ate.estimate);
        assert_eq!(rep.estimators[0].centers.len(), 100);
    }

    #[test]
    fn cluster_and_hierarchical_modes() {
        let dgm = ClusterDgm {
            k: 8,
            clusters_per_center: 6,
            cluster_size_min: 4,
            cluster_size_max: 10,
            var_center: 0.2,
            var_cluster: 0.1,
            var_residual: 1.0,
            intercept: 1.0,
            effect: 0.5,
            slope: 0.4,
            treatment_prob: 0.5,
            layout_seed: None,
        };
        let data = crate::simgen::generate_cluster_trial(&dgm, 5).unwrap();
        let mut cfg = config(&data);
        cfg.estimators = vec!["Naive".into(), "Mixed(1|c)".into()];
        cfg.adjusted = vec![true];
        cfg.cluster_randomized = true;
        cfg.hierarchical = true;
        let rep = analyze(&data, &cfg).unwrap();
        assert_eq!(rep.cluster_randomized.len(), 2);
        assert_eq!(rep.cluster_randomized[0].n_clusters, 48);
        for e in &rep.estimators {
            assert!(e.estimands.iter().all(|x| x.hierarchical.as_ref().is_some_and(|h| h.variance > 0.0)));
        }
        let text = rep.render();
        assert!(text.contains("cluster-randomized, J = 48") && text.contains("hierarchical SE"));
    }

    #[test]
    fn cluster_modes_need_clusters() {
        let data = generate(&DgmSpec::new(Endpoint::Continuous, 2, (0.0, 0.0, 0.0)), 1).unwrap();
        let mut cfg = config(&data);
        cfg.hierarchical = true;
        assert!(matches!(analyze(&data, &cfg), Err(Error::Config(_))));
    }
}
