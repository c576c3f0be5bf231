//! Linear mixed model by profiled REML.
//!
//! With V = σ²(I + ZΛΛZ'), every quantity the restricted likelihood needs is
//! accumulated per block from Z'Z, Z'X and Z'y through the Woodbury identity,
//! so one evaluation costs O(Σ q_c³) regardless of the number of patients.

use nalgebra::{DMatrix, DVector};

use super::{check_common, LoglikKind, MixedFit, RandomEffectsSpec, VARIANCE_FLOOR};
use crate::dataset::{OutcomeFamily, TrialDataset};
use crate::design::DesignSpec;
use crate::error::{Error, Result};
use crate::linalg::{aliased_columns, cholesky, logdet_spd};
use crate::optim::{brent, minimize_scalar, nelder_mead, NmOptions};

const LOG_RATIO_MAX: f64 = 13.8; // ratio 1e6

struct Block {
    comp: Vec<usize>,
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
}

/// Sufficient statistics of a linear mixed model with independent blocks.
pub struct GroupedDesign {
    n: usize,
    p: usize,
    n_components: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    blocks: Vec<Block>,
}

/// A group of rows, its random-effect design and the variance component of each Z column.
pub struct GroupSpec {
    pub rows: Vec<usize>,
    pub z: DMatrix<f64>,
    pub components: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Profile {
    pub loglik: f64,
    pub beta: DVector<f64>,
    pub sigma2: f64,
}

#[derive(Clone, Debug)]
pub struct LmmSolution {
    /// Variance ratios σ²_j / σ².
    pub ratios: Vec<f64>,
    pub sigma2: f64,
    pub beta: DVector<f64>,
    pub blups: Vec<DVector<f64>>,
    pub loglik: f64,
    pub converged: bool,
}

impl LmmSolution {
    pub fn variances(&self) -> Vec<f64> {
        self.ratios.iter().map(|r| r * self.sigma2).collect()
    }
}

impl GroupedDesign {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, groups: Vec<GroupSpec>, n_components: usize) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n {
            return Err(Error::Dimension(format!("y has {} rows, X has {n}", y.len())));
        }
        if n <= p {
            return Err(Error::InvalidData(format!("REML needs n > p (n={n}, p={p})")));
        }
        let blocks = groups
            .into_iter()
            .map(|g| {
                let q = g.z.ncols();
                if g.components.len() != q || g.z.nrows() != g.rows.len() {
                    return Err(Error::Dimension("group Z does not match its rows/components".into()));
                }
                if g.components.iter().any(|&c| c >= n_components) {
                    return Err(Error::Dimension("component index out of range".into()));
                }
                let xg = x.select_rows(&g.rows);
                let yg = DVector::from_iterator(g.rows.len(), g.rows.iter().map(|&i| y[i]));
                let zt = g.z.transpose();
                Ok(Block { comp: g.components, ztz: &zt * &g.z, ztx: &zt * xg, zty: &zt * yg })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupedDesign { n, p, n_components, xtx: x.transpose() * x, xty: x.transpose() * y, yty: y.dot(y), blocks })
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    fn lambda(&self, b: &Block, ratios: &[f64]) -> DVector<f64> {
        DVector::from_iterator(b.comp.len(), b.comp.iter().map(|&c| ratios[c].max(0.0).sqrt()))
    }

    /// Restricted log-likelihood with β and σ² profiled out.
    pub fn profile(&self, ratios: &[f64]) -> Result<Profile> {
        let mut a = self.xtx.clone();
        let mut bv = self.xty.clone();
        let mut c = self.yty;
        let mut logdet_h = 0.0;
        for b in &self.blocks {
            let lam = self.lambda(b, ratios);
            let q = lam.len();
            let mut m = DMatrix::identity(q, q);
            for i in 0..q {
                for j in 0..q {
                    m[(i, j)] += lam[i] * b.ztz[(i, j)] * lam[j];
                }
            }
            let mut lzx = b.ztx.clone();
            for i in 0..q {
                lzx.row_mut(i).scale_mut(lam[i]);
            }
            let lzy = b.zty.component_mul(&lam);
            let ch = cholesky(m)?;
            logdet_h += logdet_spd(&ch);
            let w = ch.solve(&lzx);
            let wy = ch.solve(&lzy);
            a -= lzx.transpose() * &w;
            bv -= lzx.transpose() * &wy;
            c -= lzy.dot(&wy);
        }
        let ch = cholesky(a)?;
        let beta = ch.solve(&bv);
        let rss = (c - bv.dot(&beta)).max(1e-300);
        let dof = (self.n - self.p) as f64;
        let sigma2 = rss / dof;
        let loglik = -0.5
            * (dof * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) + logdet_h + logdet_spd(&ch));
        Ok(Profile { loglik, beta, sigma2 })
    }

    /// REML log-likelihood at the given variance ratios (−∞ if the system is singular).
    pub fn reml_loglik(&self, ratios: &[f64]) -> f64 {
        self.profile(ratios).map(|p| p.loglik).unwrap_or(f64::NEG_INFINITY)
    }

    /// Conditional modes Λ M⁻¹ Λ Z'(y − Xβ) for every block, on the variance scale of b.
    pub fn blups(&self, ratios: &[f64], beta: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.blocks
            .iter()
            .map(|b| {
                let lam = self.lambda(b, ratios);
                let q = lam.len();
                let mut m = DMatrix::identity(q, q);
                for i in 0..q {
                    for j in 0..q {
                        m[(i, j)] += lam[i] * b.ztz[(i, j)] * lam[j];
                    }
                }
                let r = (&b.zty - &b.ztx * beta).component_mul(&lam);
                Ok(cholesky(m)?.solve(&r).component_mul(&lam))
            })
            .collect()
    }

    pub fn fit(&self) -> Result<LmmSolution> {
        let active: Vec<bool> = vec![true; self.n_components];
        let (ratios, converged) = self.optimize(active)?;
        let prof = self.profile(&ratios)?;
        let blups = self.blups(&ratios, &prof.beta)?;
        Ok(LmmSolution { ratios, sigma2: prof.sigma2, beta: prof.beta, blups, loglik: prof.loglik, converged })
    }

    fn optimize(&self, active: Vec<bool>) -> Result<(Vec<f64>, bool)> {
        let d = self.n_components;
        let idx: Vec<usize> = (0..d).filter(|&j| active[j]).collect();
        let lo = VARIANCE_FLOOR.ln();
        let expand = |t: &[f64]| -> Vec<f64> {
            let mut r = vec![0.0; d];
            for (k, &j) in idx.iter().enumerate() {
                r[j] = t[k].clamp(lo, LOG_RATIO_MAX).exp();
            }
            r
        };
        let objective = |t: &[f64]| -> f64 { -self.reml_loglik(&expand(t)) };
        let mut converged = true;
        let mut ratios = if idx.is_empty() {
            vec![0.0; d]
        } else if idx.len() == 1 {
            let (t, _) = minimize_scalar(|t| objective(&[t]), lo, LOG_RATIO_MAX, 48);
            expand(&[t])
        } else {
            let start = vec![(0.1f64).ln(); idx.len()];
            let m = nelder_mead(objective, &start, &NmOptions::default());
            converged = m.converged;
            let mut t = m.x;
            // coordinate polish
            for _ in 0..2 {
                for k in 0..t.len() {
                    let center = t[k].clamp(lo, LOG_RATIO_MAX);
                    let (tk, _) = brent(
                        |v| {
                            let mut tt = t.clone();
                            tt[k] = v;
                            objective(&tt)
                        },
                        (center - 2.0).max(lo),
                        (center + 2.0).min(LOG_RATIO_MAX),
                        1e-10,
                    );
                    let mut tt = t.clone();
                    tt[k] = tk;
                    if objective(&tt) <= objective(&t) {
                        t = tt;
                    }
                }
            }
            expand(&t)
        };
        // boundary: report exactly 0 when the criterion does not prefer a positive value
        let best = self.reml_loglik(&ratios);
        for &j in &idx {
            let mut z = ratios.clone();
            z[j] = 0.0;
            if self.reml_loglik(&z) >= best - 1e-9 * (1.0 + best.abs()) {
                if idx.len() > 1 {
                    let mut act = active.clone();
                    act[j] = false;
                    return self.optimize(act);
                }
                ratios = z;
            }
        }
        Ok((ratios, converged))
    }
}

pub fn fit_lmm(data: &TrialDataset, design: &DesignSpec, re: &RandomEffectsSpec) -> Result<MixedFit> {
    if data.family() != OutcomeFamily::Gaussian {
        return Err(Error::Config("fit_lmm requires a gaussian outcome".into()));
    }
    check_common(data, design, re)?;
    let all: Vec<usize> = (0..data.n()).collect();
    let x = design.fixed_matrix(data, &all, None);
    let aliased = aliased_columns(&x);
    if !aliased.is_empty() {
        let names = design.fixed_names(data);
        return Err(Error::RankDeficient(aliased.iter().map(|&j| names[j].clone()).collect()));
    }
    let y = DVector::from_vec(data.outcomes());
    let q = re.n_terms();
    let mut zbuf = vec![0.0; q];
    let groups = (0..data.k())
        .map(|c| {
            let rows = data.center_rows(c).to_vec();
            let mut z = DMatrix::zeros(rows.len(), q);
            for (r, &i) in rows.iter().enumerate() {
                re.fill_z(data, i, None, &mut zbuf);
                for j in 0..q {
                    z[(r, j)] = zbuf[j];
                }
            }
            GroupSpec { rows, z, components: (0..q).collect() }
        })
        .collect();
    let gd = GroupedDesign::new(&x, &y, groups, q)?;
    let sol = gd.fit()?;
    Ok(MixedFit {
        family: OutcomeFamily::Gaussian,
        design: design.clone(),
        re: re.clone(),
        fixed_names: design.fixed_names(data),
        fixed_coefficients: sol.beta.iter().copied().collect(),
        term_names: re.term_names(data),
        variance_components: sol.variances(),
        residual_variance: Some(sol.sigma2),
        blups: sol.blups.iter().map(|b| b.iter().copied().collect()).collect(),
        converged: sol.converged,
        loglik_kind: LoglikKind::Reml,
        loglik: sol.loglik,
        center_ids: data.center_ids().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PatientRecord;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn one_way(sizes: &[usize], sd_b: f64, seed: u64) -> TrialDataset {
        let mut rng = stream(seed, &[]);
        let mut records = Vec::new();
        for (c, &m) in sizes.iter().enumerate() {
            let b: f64 = sd_b * rng.sample::<f64, _>(StandardNormal);
            for i in 0..m {
                let e: f64 = rng.sample(StandardNormal);
                let x = (i as f64 * 0.37 + c as f64).sin();
                records.push(PatientRecord {
                    patient_id: format!("{c}-{i}"),
                    center_id: format!("c{c}"),
                    cluster_id: None,
                    treatment: (i % 2) as u8,
                    covariates: vec![x],
                    outcome: 1.0 + 0.5 * x + b + e,
                });
            }
        }
        TrialDataset::new(records, OutcomeFamily::Gaussian, vec!["x".into()]).unwrap()
    }

    #[test]
    fn balanced_one_way_matches_anova_reml() {
        for seed in 0..5 {
            let d = one_way(&[6; 8], 1.0, seed);
            let fit = fit_lmm(&d, &DesignSpec::intercept_only(), &RandomEffectsSpec::intercept()).unwrap();
            // ANOVA mean squares
            let groups: Vec<Vec<f64>> = (0..d.k()).map(|c| d.center_rows(c).iter().map(|&i| d.outcome(i)).collect()).collect();
            let m = 6.0;
            let grand: f64 = groups.iter().flatten().sum::<f64>() / 48.0;
            let msb = groups.iter().map(|g| m * (g.iter().sum::<f64>() / m - grand).powi(2)).sum::<f64>() / 7.0;
            let msw = groups
                .iter()
                .map(|g| {
                    let gm = g.iter().sum::<f64>() / m;
                    g.iter().map(|v| (v - gm).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                / 40.0;
            if msb > msw {
                let sb = (msb - msw) / m;
                assert!((fit.variance_components[0] - sb).abs() < 1e-6 * (1.0 + sb), "seed {seed}");
                assert!((fit.residual_variance.unwrap() - msw).abs() < 1e-6 * msw);
            } else {
                assert_eq!(fit.variance_components[0], 0.0);
            }
        }
    }

    #[test]
    fn reml_dominates_grid() {
        let d = one_way(&[3, 7, 5], 0.8, 11);
        let design = DesignSpec::intercept_only().with_covariates(vec![0]);
        let fit = fit_lmm(&d, &design, &RandomEffectsSpec::intercept()).unwrap();
        let all: Vec<usize> = (0..d.n()).collect();
        let x = design.fixed_matrix(&d, &all, None);
        let y = DVector::from_vec(d.outcomes());
        let groups = (0..d.k())
            .map(|c| GroupSpec { rows: d.center_rows(c).to_vec(), z: DMatrix::from_element(d.center_rows(c).len(), 1, 1.0), components: vec![0] })
            .collect();
        let gd = GroupedDesign::new(&x, &y, groups, 1).unwrap();
        let at = fit.loglik;
        for i in 0..200 {
            let r = 10f64.powf(-4.0 + 7.0 * i as f64 / 199.0);
            assert!(at >= gd.reml_loglik(&[r]) - 1e-10);
        }
        assert!(at >= gd.reml_loglik(&[0.0]) - 1e-10);
    }

    #[test]
    fn zero_variance_data_gives_small_component_and_ols() {
        let design = DesignSpec::intercept_only().with_covariates(vec![0]);
        let mut small = 0;
        for seed in 0..20 {
            let d = one_way(&[5; 40], 0.0, seed);
            let fit = fit_lmm(&d, &design, &RandomEffectsSpec::intercept()).unwrap();
            if fit.variance_components[0] <= 0.05 {
                small += 1;
            }
            if fit.variance_components[0] == 0.0 {
                let g = crate::glm::fit_glm(&d, &design).unwrap();
                for (a, b) in fit.fixed_coefficients.iter().zip(g.coefficients()) {
                    assert!((a - b).abs() < 1e-3);
                }
            }
        }
        assert!(small >= 15, "{small} of 20 fits had a small center variance");
    }
}
