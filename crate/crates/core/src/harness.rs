//! Monte Carlo scenario runner and summary metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::WeightScheme;
use crate::error::{Error, Result};
use crate::estimators::{roster_entry, Estimand, EstimatorOutput, RosterEntry, RosterOptions, RosterRunner, ROSTER_NAMES};
use crate::mixed::glmm::GlmmOptions;
use crate::propensity::default_clamp;
use crate::rng::derive_seed;
use crate::simgen::{generate, true_estimands, DgmSpec, TrueEstimand, DEFAULT_TRUTH_DRAWS};
use crate::stats::anova_icc;
use crate::variance::{naive_inference, total_inference, HeterogeneityMethod, IntervalKind, PooledInference};

/// Seed-path tags keeping the data, estimator and truth streams apart.
const DATA_STREAM: u64 = 1;
const ESTIMATOR_STREAM: u64 = 2;
const TRUTH_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: String,
    pub dgm: DgmSpec,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    /// Analysis blocks: `false` for unadjusted, `true` for covariate-adjusted.
    #[serde(default = "default_blocks")]
    pub adjusted: Vec<bool>,
    /// Covariates in the adjusted outcome models; all generated covariates when absent.
    #[serde(default)]
    pub adjust_for: Option<Vec<String>>,
    #[serde(default)]
    pub propensity_covariates: Vec<String>,
    #[serde(default = "default_weights")]
    pub weights: Vec<WeightScheme>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// Largest tolerated per-estimator failure fraction.
    #[serde(default = "default_failure_limit")]
    pub failure_limit: f64,
    #[serde(default = "default_truth_draws")]
    pub truth_draws: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<HeterogeneityMethod>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_interval")]
    pub interval: IntervalKind,
    /// Random-effect draws for sampled predictions.
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_true")]
    pub couple_arm_draws: bool,
    #[serde(default = "default_clamp")]
    pub clamp: (f64, f64),
    #[serde(default)]
    pub glmm: GlmmOptions,
    /// Output directory for `<id>.csv` and `<id>.json`.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_estimators() -> Vec<String> {
    ROSTER_NAMES.iter().map(|s| s.to_string()).collect()
}
fn default_blocks() -> Vec<bool> {
    vec![false]
}
fn default_weights() -> Vec<WeightScheme> {
    vec![WeightScheme::EqualCenters]
}
fn default_replications() -> usize {
    1000
}
fn default_failure_limit() -> f64 {
    0.02
}
fn default_truth_draws() -> usize {
    DEFAULT_TRUTH_DRAWS
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

impl ScenarioConfig {
    pub fn new(id: impl Into<String>, dgm: DgmSpec) -> Self {
        ScenarioConfig {
            id: id.into(),
            dgm,
            estimators: default_estimators(),
            adjusted: default_blocks(),
            adjust_for: None,
            propensity_covariates: Vec::new(),
            weights: default_weights(),
            replications: default_replications(),
            seed: 0,
            failure_limit: default_failure_limit(),
            truth_draws: default_truth_draws(),
            methods: default_methods(),
            level: default_level(),
            interval: default_interval(),
            draws: default_draws(),
            couple_arm_draws: true,
            clamp: default_clamp(),
            glmm: GlmmOptions::default(),
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dgm.validate()?;
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(Error::Config(format!("scenario id `{}` must be a non-empty file stem", self.id)));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be positive".into()));
        }
        if self.estimators.is_empty() || self.adjusted.is_empty() || self.weights.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("estimators, adjusted blocks, weights and methods must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_limit) {
            return Err(Error::Config("failure_limit must lie in [0, 1]".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config("level must lie in (0, 1)".into()));
        }
        self.entries()?;
        self.roster_options()?;
        Ok(())
    }

    /// Roster entries, unadjusted block first.
    pub fn entries(&self) -> Result<Vec<RosterEntry>> {
        let mut out = Vec::new();
        for &adj in &self.adjusted {
            for name in &self.estimators {
                out.push(roster_entry(name, adj)?);
            }
        }
        Ok(out)
    }

    fn columns(&self, names: &[String]) -> Result<Vec<usize>> {
        let all = self.dgm.endpoint.covariate_names();
        names
            .iter()
            .map(|n| {
                all.iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Config(format!("unknown covariate `{n}`; generated covariates are {all:?}")))
            })
            .collect()
    }

    pub fn roster_options(&self) -> Result<RosterOptions> {
        let adjust = match &self.adjust_for {
            Some(names) => self.columns(names)?,
            None => (0..self.dgm.endpoint.covariate_names().len()).collect(),
        };
        Ok(RosterOptions {
            adjustment_columns: adjust,
            propensity_columns: self.columns(&self.propensity_covariates)?,
            clamp: self.clamp,
            draws: self.draws,
            couple_arm_draws: self.couple_arm_draws,
            glmm: self.glmm.clone(),
            ..RosterOptions::default()
        })
    }
}

/// One estimator's result on one replication for one (scheme, estimand).
#[derive(Clone, Debug, PartialEq)]
pub struct CellValue {
    pub estimate: f64,
    /// (SE, interval) per variance method, in the row's method order.
    pub se: Vec<f64>,
    pub intervals: Vec<(f64, f64)>,
    /// ANOVA ICC of the influence values across centers.
    pub icc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub estimator: String,
    pub adjusted: bool,
    pub weights: WeightScheme,
    pub estimand: Estimand,
    pub truth: f64,
    /// "naive" for the naive estimator, otherwise heterogeneity method names.
    pub methods: Vec<String>,
    pub completed: usize,
    pub failures: usize,
    pub bias: f64,
    pub mse: f64,
    pub mc_sd: f64,
    pub avg_se: Vec<f64>,
    pub coverage: Vec<f64>,
    pub mean_icc: f64,
}

/// Bias, MSE, Monte Carlo SD, average SE and coverage over the successful
/// replications. All fields are NaN when nothing succeeded.
pub fn summarize(truth: f64, values: &[CellValue], n_methods: usize) -> (f64, f64, f64, Vec<f64>, Vec<f64>, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN, vec![f64::NAN; n_methods], vec![f64::NAN; n_methods], f64::NAN);
    }
    let nf = n as f64;
    let mean_est = values.iter().map(|v| v.estimate).sum::<f64>() / nf;
    let bias = mean_est - truth;
    let mse = values.iter().map(|v| (v.estimate - truth).powi(2)).sum::<f64>() / nf;
    let mc_sd = if n > 1 {
        (values.iter().map(|v| (v.estimate - mean_est).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    let avg_se = (0..n_methods).map(|m| values.iter().map(|v| v.se[m]).sum::<f64>() / nf).collect();
    let coverage = (0..n_methods)
        .map(|m| {
            values
                .iter()
                .filter(|v| {
                    let (lo, hi) = v.intervals[m];
                    lo <= truth && truth <= hi
                })
                .count() as f64
                / nf
        })
        .collect();
    let icc = values.iter().map(|v| v.icc).sum::<f64>() / nf;
    (bias, mse, mc_sd, avg_se, coverage, icc)
}

/// ANOVA ICC of influence values grouped by center.
pub fn compute_if_icc(groups: &[Vec<f64>]) -> Result<f64> {
    if groups.iter().filter(|g| !g.is_empty()).count() < 2 {
        return Err(Error::InvalidData("influence ICC needs at least 2 centers".into()));
    }
    Ok(anova_icc(groups))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub id: String,
    pub replications: usize,
    pub truth: Vec<TrueEstimand>,
    pub rows: Vec<MetricRow>,
    /// Failure counts per estimator label and reason.
    pub failures: BTreeMap<String, BTreeMap<String, usize>>,
    pub failure_limit: f64,
}

impl ScenarioResult {
    pub fn row(&self, label: &str, scheme: WeightScheme, estimand: Estimand) -> Option<&MetricRow> {
        self.rows.iter().find(|r| {
            let l = if r.adjusted { format!("{} adj", r.estimator) } else { r.estimator.clone() };
            l == label && r.weights == scheme && r.estimand == estimand
        })
    }

    pub fn max_failure_fraction(&self) -> f64 {
        self.failures
            .values()
            .map(|m| m.values().sum::<usize>() as f64 / self.replications as f64)
            .fold(0.0, f64::max)
    }

    /// Error when any estimator failed on more than the configured fraction.
    pub fn check_failures(&self) -> Result<()> {
        let fraction = self.max_failure_fraction();
        if fraction > self.failure_limit {
            return Err(Error::FailureFraction { fraction, limit: self.failure_limit });
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let method_names: Vec<&str> = std::iter::once("naive")
            .chain(HeterogeneityMethod::ALL.iter().map(|m| m.as_str()))
            .collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "scenario", "estimator", "adjusted", "weights", "estimand", "truth", "completed", "failures", "bias", "mse", "mc_sd",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(method_names.iter().map(|m| format!("se_{m}")));
        header.extend(method_names.iter().map(|m| format!("coverage_{m}")));
        header.push("mean_icc".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                self.id.clone(),
                r.estimator.clone(),
                r.adjusted.to_string(),
                r.weights.as_str().to_string(),
                r.estimand.as_str().to_string(),
                fmt(r.truth),
                r.completed.to_string(),
                r.failures.to_string(),
                fmt(r.bias),
                fmt(r.mse),
                fmt(r.mc_sd),
            ];
            let lookup = |vals: &[f64], m: &str| r.methods.iter().position(|x| x == m).map(|i| fmt(vals[i])).unwrap_or_default();
            rec.extend(method_names.iter().map(|m| lookup(&r.avg_se, m)));
            rec.extend(method_names.iter().map(|m| lookup(&r.coverage, m)));
            rec.push(fmt(r.mean_icc));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<id>.csv` and `<id>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{}.csv", self.id));
        let json_path = dir.join(format!("{}.json", self.id));
        std::fs::write(&csv_path, self.to_csv()?)?;
        std::fs::write(&json_path, self.to_json()?)?;
        Ok((csv_path, json_path))
    }

    /// Human-readable table: SD, SE and coverage (%) per method.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {} ({} replications)", self.id, self.replications);
        for t in &self.truth {
            let _ = writeln!(out, "  truth {} {}: {:.6}", t.scheme.as_str(), t.estimand.as_str(), t.value);
        }
        let _ = writeln!(
            out,
            "{:<22} {:<15} {:<5} {:>9} {:>8} {:>8}  {}",
            "estimator", "weights", "est", "bias", "SD", "ICC", "SE / coverage(%) by method"
        );
        for r in &self.rows {
            let label = if r.adjusted { format!("{} adj", r.estimator) } else { r.estimator.clone() };
            let per: Vec<String> = r
                .methods
                .iter()
                .enumerate()
                .map(|(i, m)| format!("{m} {:.4} / {:.1}", r.avg_se[i], 100.0 * r.coverage[i]))
                .collect();
            let _ = writeln!(
                out,
                "{:<22} {:<15} {:<5} {:>9.5} {:>8.4} {:>8.4}  {}{}",
                label,
                r.weights.as_str(),
                r.estimand.as_str(),
                r.bias,
                r.mc_sd,
                r.mean_icc,
                per.join("  "),
                if r.failures > 0 { format!("  [{} failed]", r.failures) } else { String::new() }
            );
        }
        out
    }
}

/// Shortest round-trip float text; empty for NaN.
fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

type CellResult = std::result::Result<CellValue, String>;

fn infer(out: &EstimatorOutput, scheme: WeightScheme, estimand: Estimand, cfg: &ScenarioConfig) -> Result<CellValue> {
    let pooled = out.pooled(scheme, estimand)?;
    let inf: PooledInference = if out.entry.is_naive() {
        naive_inference(&pooled, cfg.level, cfg.interval)?
    } else {
        total_inference(&pooled, &cfg.methods, cfg.level, cfg.interval)?
    };
    let (se, intervals) = if out.entry.is_naive() {
        (vec![inf.se_naive.expect("naive se")], vec![inf.naive_interval.expect("naive interval")])
    } else {
        (inf.by_method.iter().map(|m| m.se).collect(), inf.by_method.iter().map(|m| m.interval).collect())
    };
    if !inf.estimate.is_finite() || se.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("non-finite estimate or standard error".into()));
    }
    let groups: Vec<Vec<f64>> = out.centers.iter().map(|c| c.if_values(estimand).to_vec()).collect();
    Ok(CellValue { estimate: inf.estimate, se, intervals, icc: compute_if_icc(&groups)? })
}

/// Runs every roster entry on replication `rep`. Cells are ordered by
/// (entry, scheme, estimand).
fn run_replication(cfg: &ScenarioConfig, entries: &[RosterEntry], opts: &RosterOptions, rep: usize) -> Result<Vec<CellResult>> {
    let data = generate(&cfg.dgm, derive_seed(cfg.seed, &[DATA_STREAM, rep as u64]))?;
    let mut runner = RosterRunner::new(&data, RosterOptions { seed: derive_seed(cfg.seed, &[ESTIMATOR_STREAM, rep as u64]), ..opts.clone() });
    let mut cells = Vec::with_capacity(entries.len() * cfg.weights.len() * 3);
    for entry in entries {
        let out = runner.run(entry);
        for &scheme in &cfg.weights {
            for est in Estimand::ALL {
                let cell = match &out {
                    Err(e) => Err(e.to_string()),
                    Ok(o) if !o.converged => Err("outcome model did not converge".to_string()),
                    Ok(o) => infer(o, scheme, est, cfg).map_err(|e| e.to_string()),
                };
                if let Err(reason) = &cell {
                    log::debug!("replication {rep}: {} failed: {reason}", entry.label());
                }
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    let entries = cfg.entries()?;
    let opts = cfg.roster_options()?;
    let truth_seed = derive_seed(cfg.seed, &[TRUTH_STREAM]);
    let mut truth = Vec::new();
    for &scheme in &cfg.weights {
        truth.extend(true_estimands(&cfg.dgm, scheme, cfg.truth_draws, truth_seed)?);
    }
    let reps: Vec<Vec<CellResult>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| run_replication(cfg, &entries, &opts, rep))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut failures: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut cell = 0;
    for entry in &entries {
        let methods: Vec<String> = if entry.is_naive() {
            vec!["naive".into()]
        } else {
            cfg.methods.iter().map(|m| m.as_str().to_string()).collect()
        };
        // a replication counts once per estimator, under its first failing cell
        let mut failed_reps = vec![None; cfg.replications];
        for &scheme in &cfg.weights {
            for est in Estimand::ALL {
                let t = truth
                    .iter()
                    .find(|t| t.scheme == scheme && t.estimand == est)
                    .expect("truth for each scheme and estimand")
                    .value;
                let mut ok = Vec::with_capacity(cfg.replications);
                for (rep, cells) in reps.iter().enumerate() {
                    match &cells[cell] {
                        Ok(v) => ok.push(v.clone()),
                        Err(reason) => {
                            failed_reps[rep].get_or_insert_with(|| reason.clone());
                        }
                    }
                }
                let (bias, mse, mc_sd, avg_se, coverage, mean_icc) = summarize(t, &ok, methods.len());
                rows.push(MetricRow {
                    estimator: entry.name.clone(),
                    adjusted: entry.adjusted,
                    weights: scheme,
                    estimand: est,
                    truth: t,
                    methods: methods.clone(),
                    completed: ok.len(),
                    failures: cfg.replications - ok.len(),
                    bias,
                    mse,
                    mc_sd,
                    avg_se,
                    coverage,
                    mean_icc,
                });
                cell += 1;
            }
        }
        for reason in failed_reps.into_iter().flatten() {
            *failures.entry(entry.label()).or_default().entry(reason).or_default() += 1;
        }
    }
    Ok(ScenarioResult { id: cfg.id.clone(), replications: cfg.replications, truth, rows, failures, failure_limit: cfg.failure_limit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::Endpoint;

    fn cell(estimate: f64, se: f64) -> CellValue {
        CellValue { estimate, se: vec![se], intervals: vec![(estimate - 2.0 * se, estimate + 2.0 * se)], icc: 0.0 }
    }

    #[test]
    fn infinite_se_always_covers() {
        let vals: Vec<CellValue> = (0..20).map(|i| cell(i as f64, f64::INFINITY)).collect();
        let (_, _, _, _, cov, _) = summarize(-100.0, &vals, 1);
        assert_eq!(cov, vec![1.0]);
    }

    #[test]
    fn oracle_estimator_has_no_error() {
        let vals: Vec<CellValue> = (0..20).map(|_| cell(0.29, 0.1)).collect();
        let (bias, mse, sd, se, cov, _) = summarize(0.29, &vals, 1);
        assert!(bias.abs() < 1e-15 && mse < 1e-28 && sd < 1e-15, "{bias} {mse} {sd}");
        assert!((se[0] - 0.1).abs() < 1e-15);
        assert_eq!(cov, vec![1.0]);
    }

    #[test]
    fn mse_decomposes() {
        let vals: Vec<CellValue> = [0.1, 0.5, -0.2, 0.9, 0.3].iter().map(|&e| cell(e, 0.2)).collect();
        let (bias, mse, sd, _, _, _) = summarize(0.2, &vals, 1);
        let n = 5.0;
        assert!((mse - (bias * bias + sd * sd * (n - 1.0) / n)).abs() < 1e-12);
        assert!(mse >= bias * bias - 1e-12);
    }

    #[test]
    fn if_icc_cases() {
        // constant within, varying across
        let pure: Vec<Vec<f64>> = (0..5).map(|c| vec![c as f64; 4]).collect();
        assert!((compute_if_icc(&pure).unwrap() - 1.0).abs() < 1e-12);
        // 2 centers x 2 points by the one-way ANOVA formulas
        let g = vec![vec![1.0, 3.0], vec![4.0, 6.0]];
        let (msb, msw) = (2.0 * (2.0f64 - 3.5).powi(2) + 2.0 * (5.0f64 - 3.5).powi(2), (1.0 + 1.0 + 1.0 + 1.0) / 2.0);
        assert!((compute_if_icc(&g).unwrap() - (msb - msw) / (msb + msw)).abs() < 1e-12);
        assert_eq!(compute_if_icc(&[vec![2.0; 3], vec![2.0; 3]]).unwrap(), 0.0);
        assert!(compute_if_icc(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn iid_influence_icc_near_zero() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, &[]);
        let groups: Vec<Vec<f64>> =
            (0..100).map(|_| (0..100).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()).collect();
        assert!(compute_if_icc(&groups).unwrap().abs() < 0.02);
    }

    #[test]
    fn config_defaults_from_json() {
        let cfg = ScenarioConfig::from_json(r#"{"id": "s1", "dgm": {"endpoint": "continuous", "sigma2": [0, 0, 0]}}"#).unwrap();
        assert_eq!(cfg.replications, 1000);
        assert_eq!(cfg.failure_limit, 0.02);
        assert_eq!(cfg.entries().unwrap().len(), 6);
        assert_eq!(cfg.roster_options().unwrap().adjustment_columns, vec![0, 1, 2, 3]);
        assert!(ScenarioConfig::from_json(r#"{"id": "s1", "dgm": {"endpoint": "continuous", "sigma2": [0, 0, 0]}, "estimators": ["Oracle"]}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"id": "s1", "dgm": {"endpoint": "binary", "sigma2": [0, 0, 0]}, "adjust_for": ["cd40"]}"#).is_err());
    }

    #[test]
    fn smoke_run_setting_one() {
        let mut cfg = ScenarioConfig::new("smoke", DgmSpec::new(Endpoint::Continuous, 1, (0.0, 0.0, 0.0)));
        cfg.replications = 10;
        cfg.seed = 17;
        cfg.estimators = vec!["Naive".into(), "Mixed(1|c)".into()];
        let res = run_scenario(&cfg).unwrap();
        assert_eq!(res.rows.len(), 6);
        for label in ["Naive", "Mixed(1|c)"] {
            let r = res.row(label, WeightScheme::EqualCenters, Estimand::Ate).unwrap();
            assert_eq!(r.truth, 0.29);
            assert!(r.completed >= 9);
            assert!(r.bias.abs() < 0.2, "{label}: {}", r.bias);
            assert!(r.coverage.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!(r.mse >= r.bias * r.bias - 1e-12);
        }
        let csv = res.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("scenario,estimator,adjusted,weights,estimand,truth,completed,failures,bias,mse,mc_sd,se_naive,se_reml"));
        res.check_failures().unwrap();
    }
}
