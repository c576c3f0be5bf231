//! Logistic mixed model by approximate marginal maximum likelihood.
//!
//! Random effects are written b_c = Λ u_c with u_c ~ N(0, I). For each center
//! the integrand's mode û_c is found by Newton's method; the Laplace
//! contribution is f(û_c) − ½ log|H_c| with H_c = I + ΛZ'WZΛ. Fixed effects
//! are profiled by Newton steps on the approximate marginal likelihood and
//! the log-variances by a derivative-free outer search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_common, LoglikKind, MixedFit, RandomEffectsSpec, VARIANCE_FLOOR};
use crate::dataset::{expit, OutcomeFamily, TrialDataset};
use crate::design::DesignSpec;
use crate::error::{Error, Result};
use crate::glm::fit_logistic_matrix;
use crate::linalg::{aliased_columns, cholesky, logdet_spd};
use crate::optim::{brent, minimize_scalar, nelder_mead, NmOptions};
use crate::quadrature::gauss_hermite;

const LOG_VAR_MAX: f64 = 6.9; // variance 1e3 on the logit scale
const MODE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    Laplace,
    /// Adaptive Gauss-Hermite; random-intercept-only models.
    Agq(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlmmOptions {
    pub integration: Integration,
}

impl Default for GlmmOptions {
    fn default() -> Self {
        GlmmOptions { integration: Integration::Laplace }
    }
}

#[inline]
fn softplus(e: f64) -> f64 {
    if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() }
}

struct Group {
    id: String,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    y: Vec<f64>,
}

/// Bernoulli outcomes grouped into independent blocks with a logit link.
pub struct LogitMixedProblem {
    p: usize,
    q: usize,
    groups: Vec<Group>,
    x_all: DMatrix<f64>,
    y_all: DVector<f64>,
}

#[derive(Default)]
struct Derivs {
    grad: Option<DVector<f64>>,
    info: Option<DMatrix<f64>>,
}

impl LogitMixedProblem {
    /// `groups` gives, per block, (id, row indices into `x`/`y`, Z rows).
    pub fn new(x: &DMatrix<f64>, y: &[f64], groups: Vec<(String, Vec<usize>, DMatrix<f64>)>) -> Result<Self> {
        let p = x.ncols();
        let q = groups.first().map(|g| g.2.ncols()).unwrap_or(0);
        let groups = groups
            .into_iter()
            .map(|(id, rows, z)| {
                if z.nrows() != rows.len() || z.ncols() != q {
                    return Err(Error::Dimension("group Z does not match its rows".into()));
                }
                Ok(Group { id, x: x.select_rows(&rows), y: rows.iter().map(|&i| y[i]).collect(), z })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LogitMixedProblem { p, q, groups, x_all: x.clone(), y_all: DVector::from_column_slice(y) })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Newton search for the mode of f(u) = Σ ℓ(η + ZΛu) − ½|u|².
    fn mode(&self, g: &Group, eta0: &DVector<f64>, lam: &[f64], u: &mut DVector<f64>) -> Result<f64> {
        let q = self.q;
        let n = g.y.len();
        let f_at = |u: &DVector<f64>| -> f64 {
            let mut s = -0.5 * u.norm_squared();
            for i in 0..n {
                let mut e = eta0[i];
                for k in 0..q {
                    e += g.z[(i, k)] * lam[k] * u[k];
                }
                s += g.y[i] * e - softplus(e);
            }
            s
        };
        if lam.iter().all(|&l| l == 0.0) {
            u.fill(0.0);
            return Ok(f_at(u));
        }
        let mut fu = f_at(u);
        for _ in 0..100 {
            let mut grad = -u.clone();
            let mut h = DMatrix::identity(q, q);
            for i in 0..n {
                let mut e = eta0[i];
                for k in 0..q {
                    e += g.z[(i, k)] * lam[k] * u[k];
                }
                let mu = expit(e);
                let w = mu * (1.0 - mu);
                for a in 0..q {
                    let za = g.z[(i, a)] * lam[a];
                    grad[a] += za * (g.y[i] - mu);
                    for b in 0..q {
                        h[(a, b)] += w * za * g.z[(i, b)] * lam[b];
                    }
                }
            }
            let delta = cholesky(h)
                .map_err(|_| Error::InnerMode { center: g.id.clone() })?
                .solve(&grad);
            let mut step = 1.0;
            let mut moved = false;
            for _ in 0..50 {
                let cand = &*u + &delta * step;
                let fc = f_at(&cand);
                if fc >= fu - 1e-13 * fu.abs().max(1.0) {
                    *u = cand;
                    fu = fc;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved || delta.amax() * step <= MODE_TOL {
                return Ok(fu);
            }
        }
        Err(Error::InnerMode { center: g.id.clone() })
    }

    /// Curvature H = I + ΛZ'WZΛ, plus per-row μ at u.
    fn curvature(&self, g: &Group, eta0: &DVector<f64>, lam: &[f64], u: &DVector<f64>) -> (DMatrix<f64>, Vec<f64>) {
        let q = self.q;
        let mut h = DMatrix::identity(q, q);
        let mut mus = Vec::with_capacity(g.y.len());
        for i in 0..g.y.len() {
            let mut e = eta0[i];
            for k in 0..q {
                e += g.z[(i, k)] * lam[k] * u[k];
            }
            let mu = expit(e);
            let w = mu * (1.0 - mu);
            for a in 0..q {
                for b in 0..q {
                    h[(a, b)] += w * g.z[(i, a)] * lam[a] * g.z[(i, b)] * lam[b];
                }
            }
            mus.push(mu);
        }
        (h, mus)
    }

    fn evaluate(
        &self,
        beta: &DVector<f64>,
        lam: &[f64],
        integration: Integration,
        modes: &mut [DVector<f64>],
        derivs: &mut Derivs,
    ) -> Result<f64> {
        let p = self.p;
        let q = self.q;
        let mut total = 0.0;
        let mut grad = derivs.grad.as_ref().map(|_| DVector::zeros(p));
        let mut info = derivs.info.as_ref().map(|_| DMatrix::zeros(p, p));
        let lam_v = DVector::from_column_slice(lam);
        for (g, u) in self.groups.iter().zip(modes.iter_mut()) {
            let eta0 = &g.x * beta;
            let fu = self.mode(g, &eta0, lam, u)?;
            let (h, mus) = self.curvature(g, &eta0, lam, u);
            let ch = cholesky(h).map_err(|_| Error::InnerMode { center: g.id.clone() })?;
            let logdet = logdet_spd(&ch);
            total += match integration {
                Integration::Laplace => fu - 0.5 * logdet,
                Integration::Agq(nodes) => {
                    if q != 1 {
                        return Err(Error::Config("adaptive quadrature supports random intercepts only".into()));
                    }
                    let s = (2.0 / logdet.exp()).sqrt();
                    let (xs, ws) = gauss_hermite(nodes);
                    let mut acc = 0.0;
                    for (xk, wk) in xs.iter().zip(&ws) {
                        let uk = DVector::from_element(1, u[0] + s * xk);
                        let mut fk = -0.5 * uk[0] * uk[0];
                        for i in 0..g.y.len() {
                            let e = eta0[i] + g.z[(i, 0)] * lam[0] * uk[0];
                            fk += g.y[i] * e - softplus(e);
                        }
                        acc += wk / std::f64::consts::PI.sqrt() * (xk * xk + fk - fu).exp();
                    }
                    fu - 0.5 * logdet + acc.ln()
                }
            };
            if grad.is_some() || info.is_some() {
                // B = ΛZ'WX, D = dη/dβ = X − ZΛ H⁻¹ B
                let mut lz = g.z.clone();
                for k in 0..q {
                    lz.column_mut(k).scale_mut(lam_v[k]);
                }
                let mut wx = g.x.clone();
                for (i, &mu) in mus.iter().enumerate() {
                    wx.row_mut(i).scale_mut(mu * (1.0 - mu));
                }
                let b = lz.transpose() * &wx;
                let hib = ch.solve(&b);
                if let Some(info) = info.as_mut() {
                    *info += g.x.transpose() * &wx - b.transpose() * &hib;
                }
                if let Some(grad) = grad.as_mut() {
                    let d = &g.x - &lz * &hib;
                    let hinv = ch.inverse();
                    for (i, &mu) in mus.iter().enumerate() {
                        let r = g.y[i] - mu;
                        let zi = lz.row(i).transpose();
                        let lev = (zi.transpose() * &hinv * &zi)[(0, 0)];
                        let wprime = mu * (1.0 - mu) * (1.0 - 2.0 * mu);
                        for j in 0..p {
                            grad[j] += g.x[(i, j)] * r - 0.5 * wprime * lev * d[(i, j)];
                        }
                    }
                }
            }
        }
        derivs.grad = grad;
        derivs.info = info;
        Ok(total)
    }

    /// Approximate marginal log-likelihood at fixed effects `beta` and random-effect variances.
    pub fn marginal_loglik(&self, beta: &[f64], variances: &[f64], integration: Integration) -> Result<f64> {
        let lam: Vec<f64> = variances.iter().map(|v| v.max(0.0).sqrt()).collect();
        let mut modes = vec![DVector::zeros(self.q); self.groups.len()];
        self.evaluate(&DVector::from_column_slice(beta), &lam, integration, &mut modes, &mut Derivs::default())
    }

    fn numeric_grad(
        &self,
        beta: &DVector<f64>,
        lam: &[f64],
        integration: Integration,
        modes: &mut [DVector<f64>],
    ) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.p);
        for j in 0..self.p {
            let h = 1e-5 * beta[j].abs().max(1.0);
            let mut bp = beta.clone();
            bp[j] += h;
            let mut bm = beta.clone();
            bm[j] -= h;
            let mut m1 = modes.to_vec();
            let mut m2 = modes.to_vec();
            let fp = self.evaluate(&bp, lam, integration, &mut m1, &mut Derivs::default())?;
            let fm = self.evaluate(&bm, lam, integration, &mut m2, &mut Derivs::default())?;
            g[j] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    }

    /// Maximize over β at fixed variances; returns the profiled log-likelihood.
    fn profile_beta(
        &self,
        beta: &mut DVector<f64>,
        lam: &[f64],
        integration: Integration,
        modes: &mut Vec<DVector<f64>>,
    ) -> Result<(f64, bool)> {
        let want_analytic = integration == Integration::Laplace;
        let mut d = Derivs { grad: want_analytic.then(|| DVector::zeros(0)), info: Some(DMatrix::zeros(0, 0)) };
        let mut ll = self.evaluate(beta, lam, integration, modes, &mut d)?;
        for _ in 0..50 {
            let grad = match d.grad.take() {
                Some(g) => g,
                None => self.numeric_grad(beta, lam, integration, modes)?,
            };
            let info = d.info.take().unwrap_or_else(|| DMatrix::identity(self.p, self.p));
            let delta = match cholesky(info) {
                Ok(ch) => ch.solve(&grad),
                Err(_) => grad.clone(),
            };
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand = &*beta + &delta * step;
                let mut m = modes.clone();
                let mut dc = Derivs { grad: want_analytic.then(|| DVector::zeros(0)), info: Some(DMatrix::zeros(0, 0)) };
                if let Ok(lc) = self.evaluate(&cand, lam, integration, &mut m, &mut dc) {
                    if lc >= ll - 1e-12 * ll.abs().max(1.0) {
                        *beta = cand;
                        *modes = m;
                        ll = lc;
                        d = dc;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                return Ok((ll, delta.amax() < 1e-6));
            }
            if (&delta * step).amax() < 1e-9 {
                return Ok((ll, true));
            }
        }
        Ok((ll, false))
    }

    /// Full fit: returns (β, variances, modes on the b scale, loglik, converged).
    pub fn fit(&self, integration: Integration) -> Result<GlmmSolution> {
        let q = self.q;
        let start = fit_logistic_matrix(&self.x_all, &self.y_all)?;
        let beta0 = start.coefficients.clone();
        let state = std::cell::RefCell::new((beta0.clone(), vec![DVector::zeros(q); self.groups.len()]));
        let lo = VARIANCE_FLOOR.ln();
        let to_lam = |t: &[f64], active: &[bool]| -> Vec<f64> {
            let mut k = 0;
            (0..q)
                .map(|j| {
                    if active[j] {
                        let v = t[k].clamp(lo, LOG_VAR_MAX).exp();
                        k += 1;
                        v.sqrt()
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let eval_lam = |lam: &[f64]| -> f64 {
            let mut st = state.borrow_mut();
            let (ref mut beta, ref mut modes) = *st;
            let mut b = beta.clone();
            let mut m = modes.clone();
            match self.profile_beta(&mut b, lam, integration, &mut m) {
                Ok((ll, _)) if ll.is_finite() => {
                    *beta = b;
                    *modes = m;
                    -ll
                }
                _ => f64::INFINITY,
            }
        };

        let mut active = vec![true; q];
        let mut converged = true;
        let mut lam;
        loop {
            let idx: Vec<usize> = (0..q).filter(|&j| active[j]).collect();
            let obj = |t: &[f64]| eval_lam(&to_lam(t, &active));
            lam = if idx.is_empty() {
                vec![0.0; q]
            } else if idx.len() == 1 {
                let (t, _) = minimize_scalar(|t| obj(&[t]), lo, LOG_VAR_MAX, 30);
                to_lam(&[t], &active)
            } else {
                let m = nelder_mead(obj, &vec![(0.1f64).ln(); idx.len()], &NmOptions { max_evals: 1500, ..NmOptions::default() });
                converged = m.converged;
                let mut t = m.x;
                for k in 0..t.len() {
                    let c = t[k].clamp(lo, LOG_VAR_MAX);
                    let (tk, fk) = brent(
                        |v| {
                            let mut tt = t.clone();
                            tt[k] = v;
                            obj(&tt)
                        },
                        (c - 1.5).max(lo),
                        (c + 1.5).min(LOG_VAR_MAX),
                        1e-8,
                    );
                    if fk <= m.f {
                        t[k] = tk;
                    }
                }
                to_lam(&t, &active)
            };
            let best = eval_lam(&lam);
            let mut dropped = false;
            for &j in &idx {
                let mut z = lam.clone();
                z[j] = 0.0;
                if eval_lam(&z) <= best + 1e-9 * (1.0 + best.abs()) {
                    if idx.len() > 1 {
                        active[j] = false;
                        dropped = true;
                        break;
                    }
                    lam = z;
                }
            }
            if !dropped {
                break;
            }
        }
        // final evaluation at the chosen variances
        let (mut beta, mut modes) = state.into_inner();
        let (ll, conv_beta) = self.profile_beta(&mut beta, &lam, integration, &mut modes)?;
        let blups = modes
            .iter()
            .map(|u| DVector::from_iterator(q, (0..q).map(|k| u[k] * lam[k])))
            .collect();
        Ok(GlmmSolution {
            beta,
            variances: lam.iter().map(|l| l * l).collect(),
            blups,
            loglik: ll,
            converged: converged && conv_beta,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GlmmSolution {
    pub beta: DVector<f64>,
    pub variances: Vec<f64>,
    pub blups: Vec<DVector<f64>>,
    pub loglik: f64,
    pub converged: bool,
}

pub fn fit_glmm_logit(data: &TrialDataset, design: &DesignSpec, re: &RandomEffectsSpec) -> Result<MixedFit> {
    fit_glmm_logit_with(data, design, re, &GlmmOptions::default())
}

/// Build the grouped logistic problem for `data` with an arbitrary 0/1 response.
pub fn logit_problem(
    data: &TrialDataset,
    design: &DesignSpec,
    re: &RandomEffectsSpec,
    response: &[f64],
) -> Result<LogitMixedProblem> {
    let all: Vec<usize> = (0..data.n()).collect();
    let x = design.fixed_matrix(data, &all, None);
    let aliased = aliased_columns(&x);
    if !aliased.is_empty() {
        let names = design.fixed_names(data);
        return Err(Error::RankDeficient(aliased.iter().map(|&j| names[j].clone()).collect()));
    }
    let q = re.n_terms();
    let mut buf = vec![0.0; q];
    let groups = (0..data.k())
        .map(|c| {
            let rows = data.center_rows(c).to_vec();
            let mut z = DMatrix::zeros(rows.len(), q);
            for (r, &i) in rows.iter().enumerate() {
                re.fill_z(data, i, None, &mut buf);
                for j in 0..q {
                    z[(r, j)] = buf[j];
                }
            }
            (data.center_ids()[c].clone(), rows, z)
        })
        .collect();
    LogitMixedProblem::new(&x, response, groups)
}

pub fn fit_glmm_logit_with(
    data: &TrialDataset,
    design: &DesignSpec,
    re: &RandomEffectsSpec,
    opts: &GlmmOptions,
) -> Result<MixedFit> {
    if data.family() != OutcomeFamily::Binomial {
        return Err(Error::Config("fit_glmm_logit requires a binomial outcome".into()));
    }
    check_common(data, design, re)?;
    if let Integration::Agq(_) = opts.integration {
        if re.n_terms() != 1 || !re.random_intercept {
            return Err(Error::Config("adaptive quadrature supports random intercepts only".into()));
        }
    }
    let problem = logit_problem(data, design, re, &data.outcomes())?;
    let sol = problem.fit(opts.integration)?;
    Ok(MixedFit {
        family: OutcomeFamily::Binomial,
        design: design.clone(),
        re: re.clone(),
        fixed_names: design.fixed_names(data),
        fixed_coefficients: sol.beta.iter().copied().collect(),
        term_names: re.term_names(data),
        variance_components: sol.variances,
        residual_variance: None,
        blups: sol.blups.iter().map(|b| b.iter().copied().collect()).collect(),
        converged: sol.converged,
        loglik_kind: match opts.integration {
            Integration::Laplace => LoglikKind::LaplaceMl,
            Integration::Agq(n) => LoglikKind::AgqMl(n),
        },
        loglik: sol.loglik,
        center_ids: data.center_ids().to_vec(),
    })
}
