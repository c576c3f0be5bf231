//! Inference for the pooled estimators: naive and within-center variances,
//! between-center heterogeneity (DL, REML, DB), total variance with
//! approximate degrees of freedom, cluster-level and hierarchical variances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::dataset::TrialDataset;
use crate::error::{Error, Result};
use crate::estimators::{CenterEstimate, Estimand, PooledEstimate};
use crate::mixed::lmm::GroupSpec;
use crate::mixed::GroupedDesign;
use crate::stats::sample_variance;

pub const REML_TOL: f64 = 1e-8;
pub const REML_MAX_ITER: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeterogeneityMethod {
    Dl,
    Reml,
    Db,
}

impl HeterogeneityMethod {
    pub const ALL: [HeterogeneityMethod; 3] = [HeterogeneityMethod::Reml, HeterogeneityMethod::Dl, HeterogeneityMethod::Db];

    pub fn as_str(self) -> &'static str {
        match self {
            HeterogeneityMethod::Dl => "dl",
            HeterogeneityMethod::Reml => "reml",
            HeterogeneityMethod::Db => "db",
        }
    }
}

impl std::str::FromStr for HeterogeneityMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dl" => Ok(HeterogeneityMethod::Dl),
            "reml" => Ok(HeterogeneityMethod::Reml),
            "db" => Ok(HeterogeneityMethod::Db),
            other => Err(Error::Config(format!("unknown variance method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeterogeneityEstimate {
    pub method: HeterogeneityMethod,
    pub sigma2_u: f64,
    /// Untruncated value (DB only).
    pub pre_truncation: Option<f64>,
    /// Fixed-point cycles (REML only).
    pub iterations: Option<usize>,
    pub converged: bool,
}

/// (1/n) × sample variance of per-patient influence values.
pub fn naive_variance(if_values: &[f64]) -> Result<f64> {
    if if_values.len() < 2 {
        return Err(Error::InvalidData("naive variance needs at least 2 values".into()));
    }
    Ok(sample_variance(if_values) / if_values.len() as f64)
}

/// Variance of τ̂_c from the center's own influence values, or `None` when it
/// is not defined (a single patient or a missing arm). Spread at rounding
/// level, as left by a saturated outcome model, is reported as exactly 0.
pub fn within_center_variance(center: &CenterEstimate, estimand: Estimand) -> Option<f64> {
    if center.n_c < 2 || !center.has_required_arms(estimand) {
        return None;
    }
    let ifs = center.if_values(estimand);
    let v = sample_variance(ifs);
    let scale = ifs.iter().map(|x| x * x).sum::<f64>() / ifs.len() as f64;
    if v <= 1e-20 * scale {
        return Some(0.0);
    }
    Some(v / center.n_c as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WithinCenterVariances {
    /// σ̂²_c per center after substitution.
    pub sigma2: Vec<f64>,
    /// Centers whose value is the pooled fallback.
    pub fallback: Vec<bool>,
    pub fallback_value: f64,
}

impl WithinCenterVariances {
    pub fn n_fallback(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }
}

/// σ̂²_c for every center. Undefined or zero values are replaced by the mean
/// of the well-defined positive ones and flagged.
pub fn within_center_variances(centers: &[CenterEstimate], estimand: Estimand) -> Result<WithinCenterVariances> {
    let raw: Vec<Option<f64>> = centers
        .iter()
        .map(|c| within_center_variance(c, estimand).filter(|&v| v > 0.0 && v.is_finite()))
        .collect();
    let good: Vec<f64> = raw.iter().flatten().copied().collect();
    if good.is_empty() {
        return Err(Error::Numerical("no center has a usable within-center variance".into()));
    }
    let fallback_value = good.iter().sum::<f64>() / good.len() as f64;
    Ok(WithinCenterVariances {
        sigma2: raw.iter().map(|v| v.unwrap_or(fallback_value)).collect(),
        fallback: raw.iter().map(Option::is_none).collect(),
        fallback_value,
    })
}

fn check_meta(tau: &[f64], s2: &[f64]) -> Result<()> {
    if tau.len() < 2 {
        return Err(Error::InvalidData("heterogeneity estimation needs k >= 2 centers".into()));
    }
    if tau.len() != s2.len() {
        return Err(Error::Dimension(format!("{} estimates, {} variances", tau.len(), s2.len())));
    }
    if s2.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || tau.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numerical("non-finite or negative input to heterogeneity estimation".into()));
    }
    Ok(())
}

fn weighted_mean(tau: &[f64], w: &[f64]) -> f64 {
    tau.iter().zip(w).map(|(t, w)| t * w).sum::<f64>() / w.iter().sum::<f64>()
}

/// DerSimonian–Laird moment estimator, truncated at 0.
pub fn dl_heterogeneity(tau: &[f64], s2: &[f64]) -> Result<HeterogeneityEstimate> {
    check_meta(tau, s2)?;
    if s2.iter().any(|&v| v <= 0.0) {
        return Err(Error::Numerical("DL needs positive within-center variances".into()));
    }
    let k = tau.len() as f64;
    let w: Vec<f64> = s2.iter().map(|v| 1.0 / v).collect();
    let star = weighted_mean(tau, &w);
    let q: f64 = tau.iter().zip(&w).map(|(t, w)| w * (t - star).powi(2)).sum();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|w| w * w).sum();
    let value = (q - (k - 1.0)) / (sw - sw2 / sw);
    Ok(HeterogeneityEstimate {
        method: HeterogeneityMethod::Dl,
        sigma2_u: value.max(0.0),
        pre_truncation: None,
        iterations: None,
        converged: true,
    })
}

/// REML by fixed-point iteration started from the DL estimate.
pub fn reml_heterogeneity(tau: &[f64], s2: &[f64]) -> Result<HeterogeneityEstimate> {
    check_meta(tau, s2)?;
    let k = tau.len() as f64;
    let mut u = if s2.iter().all(|&v| v > 0.0) { dl_heterogeneity(tau, s2)?.sigma2_u } else { 0.0 };
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=REML_MAX_ITER {
        iterations = it;
        let w: Vec<f64> = s2.iter().map(|v| 1.0 / (v + u)).collect();
        if w.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("REML weights are infinite (zero total variance)".into()));
        }
        let star = weighted_mean(tau, &w);
        let num: f64 = tau
            .iter()
            .zip(s2)
            .zip(&w)
            .map(|((t, v), w)| (k / (k - 1.0) * (t - star).powi(2) - v) * w * w)
            .sum();
        let den: f64 = w.iter().map(|w| w * w).sum();
        let next = (num / den).max(0.0);
        let delta = (next - u).abs();
        u = next;
        if delta <= REML_TOL {
            converged = true;
            break;
        }
    }
    Ok(HeterogeneityEstimate {
        method: HeterogeneityMethod::Reml,
        sigma2_u: u,
        pre_truncation: None,
        iterations: Some(iterations),
        converged,
    })
}

/// Debiased sample heterogeneity around the pooled estimate actually reported.
pub fn db_heterogeneity(tau: &[f64], s2: &[f64], pooled_tau: f64) -> Result<HeterogeneityEstimate> {
    check_meta(tau, s2)?;
    let k = tau.len() as f64;
    let spread = tau.iter().map(|t| (t - pooled_tau).powi(2)).sum::<f64>() / k;
    let pre = spread - (k - 1.0) / (k * k) * s2.iter().sum::<f64>();
    Ok(HeterogeneityEstimate {
        method: HeterogeneityMethod::Db,
        sigma2_u: pre.max(0.0),
        pre_truncation: Some(pre),
        iterations: None,
        converged: true,
    })
}

/// Σ n_c / (1 + (n_c − 1) ρ) − 1.
pub fn approximate_df(sizes: &[usize], rho: f64) -> f64 {
    sizes.iter().map(|&n| n as f64 / (1.0 + (n as f64 - 1.0) * rho)).sum::<f64>() - 1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    StudentT,
    /// Normal quantiles; only offered for k >= 30.
    Normal,
}

fn quantile(kind: IntervalKind, df: f64, level: f64) -> Result<f64> {
    let prob = 1.0 - (1.0 - level) / 2.0;
    let q = match kind {
        IntervalKind::Normal => Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(prob),
        IntervalKind::StudentT => {
            if !(df > 0.0) {
                return Err(Error::Numerical(format!("degrees of freedom {df} must be positive")));
            }
            if df > 1e7 {
                Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(prob)
            } else {
                StudentsT::new(0.0, 1.0, df)
                    .map_err(|e| Error::Numerical(e.to_string()))?
                    .inverse_cdf(prob)
            }
        }
    };
    Ok(q)
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodInference {
    pub method: HeterogeneityMethod,
    pub heterogeneity: HeterogeneityEstimate,
    pub se: f64,
    pub rho_hat: f64,
    pub df: f64,
    pub interval: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PooledInference {
    pub estimand: Estimand,
    pub estimate: f64,
    pub level: f64,
    pub se_naive: Option<f64>,
    pub naive_interval: Option<(f64, f64)>,
    pub by_method: Vec<MethodInference>,
    pub within: Option<WithinCenterVariances>,
}

impl PooledInference {
    pub fn method(&self, m: HeterogeneityMethod) -> Option<&MethodInference> {
        self.by_method.iter().find(|x| x.method == m)
    }
}

/// SE, ρ̂, df and interval for each heterogeneity method. Counterfactual
/// means and the ATE each use their own influence values, so each gets its
/// own ρ̂ and df.
pub fn total_inference(
    pooled: &PooledEstimate,
    methods: &[HeterogeneityMethod],
    level: f64,
    kind: IntervalKind,
) -> Result<PooledInference> {
    if methods.is_empty() {
        return Err(Error::Config("at least one variance method is required".into()));
    }
    check_level(level)?;
    let k = pooled.per_center.len();
    if kind == IntervalKind::Normal && k < 30 {
        return Err(Error::Config(format!("normal intervals need k >= 30 centers (k = {k})")));
    }
    let within = within_center_variances(&pooled.per_center, pooled.estimand)?;
    let tau = pooled.center_values();
    let sizes = pooled.center_sizes();
    let sigma2_bar = within.sigma2.iter().sum::<f64>() / k as f64;
    let mut by_method = Vec::with_capacity(methods.len());
    for &m in methods {
        let het = match m {
            HeterogeneityMethod::Dl => dl_heterogeneity(&tau, &within.sigma2)?,
            HeterogeneityMethod::Reml => reml_heterogeneity(&tau, &within.sigma2)?,
            HeterogeneityMethod::Db => db_heterogeneity(&tau, &within.sigma2, pooled.value)?,
        };
        let var: f64 = pooled.weights.iter().zip(&within.sigma2).map(|(w, s)| w * w * (s + het.sigma2_u)).sum();
        let se = var.sqrt();
        let rho_hat = het.sigma2_u / (het.sigma2_u + sigma2_bar);
        let df = approximate_df(&sizes, rho_hat);
        let half = quantile(kind, df, level)? * se;
        by_method.push(MethodInference {
            method: m,
            heterogeneity: het,
            se,
            rho_hat,
            df,
            interval: (pooled.value - half, pooled.value + half),
        });
    }
    Ok(PooledInference {
        estimand: pooled.estimand,
        estimate: pooled.value,
        level,
        se_naive: None,
        naive_interval: None,
        by_method,
        within: Some(within),
    })
}

/// Inference ignoring clustering: naive SE with n − 1 degrees of freedom.
pub fn naive_inference(pooled: &PooledEstimate, level: f64, kind: IntervalKind) -> Result<PooledInference> {
    check_level(level)?;
    let ifs = pooled.patient_if_values();
    let se = naive_variance(&ifs)?.sqrt();
    let half = quantile(kind, ifs.len() as f64 - 1.0, level)? * se;
    Ok(PooledInference {
        estimand: pooled.estimand,
        estimate: pooled.value,
        level,
        se_naive: Some(se),
        naive_interval: Some((pooled.value - half, pooled.value + half)),
        by_method: Vec::new(),
        within: None,
    })
}

/// (1/J) × sample variance of cluster-level influence values.
pub fn cluster_variance(cluster_if: &[f64]) -> Result<f64> {
    if cluster_if.len() < 2 {
        return Err(Error::InvalidData("cluster variance needs J >= 2".into()));
    }
    Ok(sample_variance(cluster_if) / cluster_if.len() as f64)
}

/// ATE variance for cluster randomization: the two arms' variances added,
/// treating the counterfactual means as independent.
pub fn cluster_ate_variance(psi1: &[f64], psi0: &[f64]) -> Result<f64> {
    Ok(cluster_variance(psi1)? + cluster_variance(psi0)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HierarchicalVariance {
    pub estimate: f64,
    pub variance: f64,
    pub var_center: f64,
    pub var_cluster: f64,
    pub var_residual: f64,
    /// The cluster level was dropped because no center has two clusters.
    pub cluster_level_dropped: bool,
}

/// Closed-form variance of Σ ω_c IF / Σ ω_c n_c given variance components.
pub fn hierarchical_closed_form(
    omega: &[f64],
    cluster_sizes: &[Vec<usize>],
    var_center: f64,
    var_cluster: f64,
    var_residual: f64,
) -> f64 {
    let mut wn = 0.0;
    let mut w2n2 = 0.0;
    let mut w2nt2 = 0.0;
    let mut w2n = 0.0;
    for (w, js) in omega.iter().zip(cluster_sizes) {
        let n: usize = js.iter().sum();
        let n = n as f64;
        wn += w * n;
        w2n2 += w * w * n * n;
        w2nt2 += w * w * js.iter().map(|&m| (m * m) as f64).sum::<f64>();
        w2n += w * w * n;
    }
    (var_center * w2n2 + var_cluster * w2nt2 + var_residual * w2n) / (wn * wn)
}

/// Weighted mean of per-patient influence values with its variance from a
/// center + cluster-in-center variance-components model fitted by REML.
/// `omega` holds one weight per center.
pub fn hierarchical_variance(data: &TrialDataset, if_values: &[f64], omega: &[f64]) -> Result<HierarchicalVariance> {
    let clusters = data.cluster_rows().ok_or_else(|| Error::InvalidData("cluster ids required".into()))?;
    let cluster_center = data.cluster_centers().expect("clusters present");
    if if_values.len() != data.n() {
        return Err(Error::Dimension(format!("{} influence values for {} patients", if_values.len(), data.n())));
    }
    if omega.len() != data.k() {
        return Err(Error::Dimension(format!("{} weights for {} centers", omega.len(), data.k())));
    }
    let k = data.k();
    let mut by_center: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (j, &c) in cluster_center.iter().enumerate() {
        by_center[c].push(j);
    }
    let dropped = by_center.iter().all(|js| js.len() < 2);
    if dropped {
        log::warn!("no center has two clusters; the cluster variance component is dropped");
    }
    let n_components = if dropped { 1 } else { 2 };
    let groups = (0..k)
        .map(|c| {
            let mut rows = Vec::new();
            let mut col = Vec::new();
            for (m, &j) in by_center[c].iter().enumerate() {
                for &i in &clusters[j] {
                    rows.push(i);
                    col.push(m);
                }
            }
            let q = if dropped { 1 } else { 1 + by_center[c].len() };
            let mut z = DMatrix::zeros(rows.len(), q);
            for (r, &m) in col.iter().enumerate() {
                z[(r, 0)] = 1.0;
                if !dropped {
                    z[(r, 1 + m)] = 1.0;
                }
            }
            let mut components = vec![0];
            components.extend(std::iter::repeat_n(1, q - 1));
            GroupSpec { rows, z, components }
        })
        .collect();
    let x = DMatrix::from_element(data.n(), 1, 1.0);
    let y = DVector::from_column_slice(if_values);
    let sol = GroupedDesign::new(&x, &y, groups, n_components)?.fit()?;
    let v = sol.variances();
    let var_center = v[0];
    let var_cluster = if dropped { 0.0 } else { v[1] };
    let sizes: Vec<Vec<usize>> = by_center.iter().map(|js| js.iter().map(|&j| clusters[j].len()).collect()).collect();
    let num: f64 = (0..data.n()).map(|i| omega[data.center_of(i)] * if_values[i]).sum();
    let den: f64 = (0..data.n()).map(|i| omega[data.center_of(i)]).sum();
    Ok(HierarchicalVariance {
        estimate: num / den,
        variance: hierarchical_closed_form(omega, &sizes, var_center, var_cluster, sol.sigma2),
        var_center,
        var_cluster,
        var_residual: sol.sigma2,
        cluster_level_dropped: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{OutcomeFamily, PatientRecord, WeightScheme};
    use crate::estimators::pool;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut impl Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    #[test]
    fn naive_variance_examples() {
        assert_eq!(naive_variance(&[0.0; 4]).unwrap(), 0.0);
        assert_eq!(naive_variance(&[1.0, 3.0]).unwrap(), 1.0);
        assert!(naive_variance(&[1.0]).is_err());
        let mut rng = stream(3, &[]);
        let v: Vec<f64> = (0..50).map(|_| 5.0 + normal(&mut rng)).collect();
        let m = v.iter().sum::<f64>() / 50.0;
        let two_pass = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 49.0 / 50.0;
        assert!((naive_variance(&v).unwrap() - two_pass).abs() < 1e-14);
    }

    fn center(id: &str, a: &[f64], if1: &[f64]) -> CenterEstimate {
        let n = a.len();
        let tau1 = if1.iter().sum::<f64>() / n as f64;
        CenterEstimate {
            center_id: id.into(),
            n_c: n,
            n_treated: a.iter().filter(|&&x| x == 1.0).count(),
            tau1_hat: tau1,
            tau0_hat: 0.0,
            tau_hat: tau1,
            if_treated: if1.to_vec(),
            if_control: vec![0.0; n],
            if_ate: if1.to_vec(),
        }
    }

    #[test]
    fn within_center_examples() {
        let c = center("a", &[1.0, 0.0, 1.0], &[2.0, 2.0, 2.0]);
        assert_eq!(within_center_variance(&c, Estimand::CounterfactualMeanTreated), Some(0.0));
        // values equal up to rounding count as zero spread
        let r = center("r", &[1.0, 0.0], &[-3.6873502976488703, -3.6873502976488708]);
        assert_eq!(within_center_variance(&r, Estimand::CounterfactualMeanTreated), Some(0.0));
        let vals = [1.0, 4.0, 2.5, 3.0, 0.5, 2.0, 6.0, 1.5];
        let c8 = center("b", &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &vals);
        let m = vals.iter().sum::<f64>() / 8.0;
        let oracle = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 7.0 / 8.0;
        let got = within_center_variance(&c8, Estimand::CounterfactualMeanTreated).unwrap();
        assert!((got - oracle).abs() < 1e-14);
        let single = center("s", &[1.0], &[3.0]);
        let c2 = center("c", &[1.0, 0.0, 1.0, 0.0], &[1.0, 3.0, 2.0, 0.0]);
        let w = within_center_variances(&[c8.clone(), single, c2.clone()], Estimand::CounterfactualMeanTreated).unwrap();
        let v2 = within_center_variance(&c2, Estimand::CounterfactualMeanTreated).unwrap();
        assert_eq!(w.fallback, vec![false, true, false]);
        assert!((w.sigma2[1] - (got + v2) / 2.0).abs() < 1e-15);
        // no treated patients: treated-arm variance is undefined
        let control_only = center("d", &[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(within_center_variance(&control_only, Estimand::CounterfactualMeanTreated), None);
    }

    #[test]
    fn dl_examples() {
        let e = dl_heterogeneity(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((e.sigma2_u - 1.0).abs() < 1e-12);
        // independent re-derivation: Q = Σ w (τ − τ*)², C = Σw − Σw²/Σw
        let (w1, w2) = (1.0f64, 1.0f64);
        let star = (w1 * 0.0 + w2 * 2.0) / (w1 + w2);
        let q = w1 * (0.0 - star).powi(2) + w2 * (2.0 - star).powi(2);
        let c = (w1 + w2) - (w1 * w1 + w2 * w2) / (w1 + w2);
        assert!((e.sigma2_u - (q - 1.0) / c).abs() < 1e-12);
        assert_eq!(dl_heterogeneity(&[1.5; 4], &[0.2, 0.3, 0.1, 0.4]).unwrap().sigma2_u, 0.0);
        assert!(dl_heterogeneity(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn db_examples() {
        let e = db_heterogeneity(&[0.0, 2.0], &[1.0, 1.0], 1.0).unwrap();
        assert!((e.sigma2_u - 0.5).abs() < 1e-12);
        assert_eq!(e.pre_truncation, Some(0.5));
        let z = db_heterogeneity(&[0.7; 3], &[0.0; 3], 0.7).unwrap();
        assert_eq!((z.sigma2_u, z.pre_truncation), (0.0, Some(0.0)));
        let neg = db_heterogeneity(&[0.0, 0.1], &[1.0, 1.0], 0.05).unwrap();
        assert!(neg.pre_truncation.unwrap() < 0.0 && neg.sigma2_u == 0.0);
    }

    /// Restricted log-likelihood of the normal random-effects model (the
    /// weighted residual enters squared).
    fn reml_loglik(tau: &[f64], s2: &[f64], u: f64) -> f64 {
        let w: Vec<f64> = s2.iter().map(|v| 1.0 / (v + u)).collect();
        let sw: f64 = w.iter().sum();
        let star = tau.iter().zip(&w).map(|(t, w)| t * w).sum::<f64>() / sw;
        -0.5 * (s2.iter().map(|v| (v + u).ln()).sum::<f64>()
            + sw.ln()
            + tau.iter().zip(&w).map(|(t, w)| w * (t - star).powi(2)).sum::<f64>())
    }

    #[test]
    fn reml_maximizes_criterion_on_grid() {
        let mut rng = stream(12, &[]);
        for fixture in 0..20 {
            let k = 3 + fixture % 9;
            let s: f64 = rng.random_range(0.05..0.5);
            let su: f64 = if fixture % 4 == 0 { 0.0 } else { rng.random_range(0.0..0.6) };
            let tau: Vec<f64> = (0..k).map(|_| su.sqrt() * normal(&mut rng) + s.sqrt() * normal(&mut rng)).collect();
            let s2 = vec![s; k];
            let e = reml_heterogeneity(&tau, &s2).unwrap();
            assert!(e.converged);
            let best = reml_loglik(&tau, &s2, e.sigma2_u);
            let hi = 4.0 * (e.sigma2_u + s);
            for g in 0..400 {
                let u = hi * g as f64 / 399.0;
                assert!(reml_loglik(&tau, &s2, u) <= best + 1e-8, "fixture {fixture} u {u}");
            }
        }
        assert_eq!(reml_heterogeneity(&[2.0; 5], &[0.3; 5]).unwrap().sigma2_u, 0.0);
    }

    #[test]
    fn equal_variance_estimators_agree_when_heterogeneity_dominates() {
        let tau = [0.0, 3.0, -2.5, 4.0, 1.0, -3.5];
        let s2 = [0.01; 6];
        let k = 6.0;
        let dl = dl_heterogeneity(&tau, &s2).unwrap().sigma2_u;
        let reml = reml_heterogeneity(&tau, &s2).unwrap().sigma2_u;
        let m = tau.iter().sum::<f64>() / k;
        let s = tau.iter().map(|t| (t - m).powi(2)).sum::<f64>();
        assert!((dl - (s / (k - 1.0) - 0.01)).abs() < 1e-9);
        assert!((reml - dl).abs() < 1e-6);
    }

    #[test]
    fn monte_carlo_heterogeneity_means() {
        let k = 200;
        let reps = 200;
        let s: f64 = 0.1;
        let (mut dl, mut reml) = (0.0, 0.0);
        for r in 0..reps {
            let mut rng = stream(77, &[r]);
            let tau: Vec<f64> = (0..k).map(|_| 0.15f64.sqrt() * normal(&mut rng) + s.sqrt() * normal(&mut rng)).collect();
            let s2 = vec![s; k];
            dl += dl_heterogeneity(&tau, &s2).unwrap().sigma2_u;
            reml += reml_heterogeneity(&tau, &s2).unwrap().sigma2_u;
        }
        assert!((dl / reps as f64 - 0.15).abs() < 0.02);
        assert!((reml / reps as f64 - 0.15).abs() < 0.02);
    }

    #[test]
    fn db_pre_truncation_is_centered_on_truth() {
        let k = 100;
        let reps = 2000;
        let s: f64 = 0.4;
        let mut vals = Vec::with_capacity(reps);
        for r in 0..reps {
            let mut rng = stream(5, &[r as u64]);
            let tau: Vec<f64> = (0..k).map(|_| 0.15f64.sqrt() * normal(&mut rng) + s.sqrt() * normal(&mut rng)).collect();
            let pooled = tau.iter().sum::<f64>() / k as f64;
            vals.push(db_heterogeneity(&tau, &vec![s; k], pooled).unwrap().pre_truncation.unwrap());
        }
        let m = vals.iter().sum::<f64>() / reps as f64;
        let se = (sample_variance(&vals) / reps as f64).sqrt();
        assert!((m - 0.15).abs() < 3.0 * se, "mean {m}, se {se}");
    }

    #[test]
    fn df_boundaries_and_monotonicity() {
        let sizes = [3, 7, 1, 12];
        assert_eq!(approximate_df(&sizes, 0.0), 22.0);
        assert_eq!(approximate_df(&sizes, 1.0), 3.0);
        assert!((approximate_df(&[4, 4], 0.5) - 2.2).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let df = approximate_df(&sizes, i as f64 / 100.0);
            assert!(df < last);
            last = df;
        }
    }

    fn pooled_fixture(scheme: WeightScheme) -> PooledEstimate {
        let mut rng = stream(8, &[]);
        let centers: Vec<CenterEstimate> = (0..6)
            .map(|c| {
                let n = 3 + c;
                let a: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
                let v: Vec<f64> = (0..n).map(|_| 1.0 + 0.3 * c as f64 + normal(&mut rng)).collect();
                center(&c.to_string(), &a, &v)
            })
            .collect();
        pool(centers, scheme, Estimand::Ate).unwrap()
    }

    #[test]
    fn se_grows_with_heterogeneity_and_matches_formula() {
        let p = pooled_fixture(WeightScheme::EqualCenters);
        let inf = total_inference(&p, &HeterogeneityMethod::ALL, 0.95, IntervalKind::StudentT).unwrap();
        let w = within_center_variances(&p.per_center, Estimand::Ate).unwrap();
        for m in &inf.by_method {
            let var: f64 = p.weights.iter().zip(&w.sigma2).map(|(wc, s)| wc * wc * (s + m.heterogeneity.sigma2_u)).sum();
            assert!((m.se - var.sqrt()).abs() < 1e-14);
            let q = StudentsT::new(0.0, 1.0, m.df).unwrap().inverse_cdf(0.975);
            assert!(((m.interval.1 - m.interval.0) / 2.0 - q * m.se).abs() < 1e-12);
            let s_bar = w.sigma2.iter().sum::<f64>() / 6.0;
            assert!((m.rho_hat - m.heterogeneity.sigma2_u / (m.heterogeneity.sigma2_u + s_bar)).abs() < 1e-15);
        }
        // SE is nondecreasing in σ²_u
        let se_at = |u: f64| -> f64 { p.weights.iter().zip(&w.sigma2).map(|(wc, s)| wc * wc * (s + u)).sum::<f64>().sqrt() };
        assert!(se_at(0.0) <= se_at(0.1) && se_at(0.1) <= se_at(1.0));
        assert!(total_inference(&p, &[], 0.95, IntervalKind::StudentT).is_err());
        assert!(total_inference(&p, &[HeterogeneityMethod::Dl], 0.95, IntervalKind::Normal).is_err());
    }

    #[test]
    fn zero_heterogeneity_patient_weights_match_naive_se() {
        // equal means and equal spreads so σ̂²_u = 0, equal sizes so the pooled
        // within-center variance equals the naive one up to the n−1 factors
        let centers: Vec<CenterEstimate> = (0..4)
            .map(|c| center(&c.to_string(), &[1.0, 0.0, 1.0, 0.0], &[1.0, 2.0, 3.0, 2.0]))
            .collect();
        let p = pool(centers, WeightScheme::EqualPatients, Estimand::Ate).unwrap();
        let inf = total_inference(&p, &[HeterogeneityMethod::Dl], 0.95, IntervalKind::StudentT).unwrap();
        assert_eq!(inf.by_method[0].heterogeneity.sigma2_u, 0.0);
        let ifs = p.patient_if_values();
        let n = ifs.len() as f64;
        let m = ifs.iter().sum::<f64>() / n;
        let ss = ifs.iter().map(|x| (x - m).powi(2)).sum::<f64>();
        // Σ w² σ̂²_c with σ̂²_c = SS_c/((n_c−1)n_c), SS_c = SS/4 here
        let within = 4.0 * (1.0 / 16.0) * (ss / 4.0) / (3.0 * 4.0);
        assert!((inf.by_method[0].se.powi(2) - within).abs() < 1e-14);
        let naive = naive_variance(&ifs).unwrap();
        assert!((naive - ss / ((n - 1.0) * n)).abs() < 1e-14);
        assert!((inf.by_method[0].se.powi(2) * 3.0 / 4.0 - naive * 15.0 / 16.0).abs() < 1e-14);
    }

    #[test]
    fn cluster_variance_examples() {
        assert_eq!(cluster_variance(&[2.0; 5]).unwrap(), 0.0);
        assert_eq!(cluster_variance(&[0.0, 2.0]).unwrap(), 1.0);
        assert!(cluster_variance(&[1.0]).is_err());
        let v: Vec<f64> = (0..12).map(|j| (j as f64 * 0.7).sin() * 3.0).collect();
        let m = v.iter().sum::<f64>() / 12.0;
        let oracle = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 11.0 / 12.0;
        assert!((cluster_variance(&v).unwrap() - oracle).abs() < 1e-14);
        assert!((cluster_ate_variance(&v, &[0.0, 2.0]).unwrap() - oracle - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hierarchical_iid_reduction() {
        let sizes = vec![vec![3, 2], vec![4, 1], vec![2, 3]];
        let omega = vec![1.0 / 15.0; 3];
        let v = hierarchical_closed_form(&omega, &sizes, 0.0, 0.0, 2.0);
        assert!((v - 2.0 / 15.0).abs() < 1e-14);
    }

    fn three_level(seed: u64, k: usize, clusters: usize, m: usize, comps: (f64, f64, f64)) -> (TrialDataset, Vec<f64>) {
        let mut rng = stream(seed, &[]);
        let mut records = Vec::new();
        let mut values = Vec::new();
        for c in 0..k {
            let a = comps.0.sqrt() * normal(&mut rng);
            for j in 0..clusters {
                let b = comps.1.sqrt() * normal(&mut rng);
                let size = m + (c + j) % 3;
                for i in 0..size {
                    values.push(1.0 + a + b + comps.2.sqrt() * normal(&mut rng));
                    records.push(PatientRecord {
                        patient_id: format!("{c}-{j}-{i}"),
                        center_id: format!("c{c}"),
                        cluster_id: Some(format!("c{c}-k{j}")),
                        treatment: (i % 2) as u8,
                        covariates: vec![],
                        outcome: 0.0,
                    });
                }
            }
        }
        (TrialDataset::new(records, OutcomeFamily::Gaussian, vec![]).unwrap(), values)
    }

    #[test]
    fn hierarchical_closed_form_matches_monte_carlo() {
        let comps = (0.3, 0.2, 1.0);
        let (d, _) = three_level(0, 8, 3, 4, comps);
        let cl = d.cluster_rows().unwrap();
        let cc = d.cluster_centers().unwrap();
        let sizes: Vec<Vec<usize>> =
            (0..d.k()).map(|c| (0..cl.len()).filter(|&j| cc[j] == c).map(|j| cl[j].len()).collect()).collect();
        for scheme in [WeightScheme::EqualCenters, WeightScheme::EqualPatients] {
            let omega: Vec<f64> = match scheme {
                WeightScheme::EqualPatients => vec![1.0 / d.n() as f64; d.k()],
                WeightScheme::EqualCenters => d.center_sizes().iter().map(|&n| 1.0 / (d.k() * n) as f64).collect(),
            };
            let closed = hierarchical_closed_form(&omega, &sizes, comps.0, comps.1, comps.2);
            let est: Vec<f64> = (0..10000)
                .map(|r| {
                    let (_, v) = three_level(1000 + r, 8, 3, 4, comps);
                    let num: f64 = (0..d.n()).map(|i| omega[d.center_of(i)] * v[i]).sum();
                    let den: f64 = (0..d.n()).map(|i| omega[d.center_of(i)]).sum();
                    num / den
                })
                .collect();
            let mc = sample_variance(&est);
            assert!((closed / mc - 1.0).abs() < 0.05, "{scheme:?}: closed {closed} vs mc {mc}");
        }
    }

    #[test]
    fn hierarchical_fit_recovers_components() {
        let reps = 10;
        let mut sums = (0.0, 0.0, 0.0);
        for r in 0..reps {
            let (d, v) = three_level(100 + r, 40, 4, 6, (0.5, 0.3, 1.0));
            let h = hierarchical_variance(&d, &v, &vec![1.0 / d.n() as f64; d.k()]).unwrap();
            assert!(!h.cluster_level_dropped);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            assert!((h.estimate - mean).abs() < 1e-12);
            sums.0 += h.var_center;
            sums.1 += h.var_cluster;
            sums.2 += h.var_residual;
        }
        let n = reps as f64;
        assert!((sums.0 / n - 0.5).abs() < 0.15, "{sums:?}");
        assert!((sums.1 / n - 0.3).abs() < 0.06, "{sums:?}");
        assert!((sums.2 / n - 1.0).abs() < 0.04, "{sums:?}");
    }

    #[test]
    fn single_cluster_per_center_drops_cluster_level() {
        let (d, v) = three_level(2, 10, 1, 5, (0.4, 0.0, 1.0));
        let h = hierarchical_variance(&d, &v, &vec![1.0 / d.n() as f64; d.k()]).unwrap();
        assert!(h.cluster_level_dropped);
        assert_eq!(h.var_cluster, 0.0);
    }
}
