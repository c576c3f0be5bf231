//! Canonical-link GLMs: least squares for gaussian, IRLS for logistic.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::dataset::{expit, OutcomeFamily, TrialDataset};
use crate::design::DesignSpec;
use crate::error::{Error, Result};
use crate::linalg::{aliased_columns, cholesky, least_squares};

pub const IRLS_MAX_ITER: usize = 100;
pub const COEF_TOL: f64 = 1e-10;
pub const SCORE_TOL: f64 = 1e-8;

/// Result of fitting a plain model matrix.
#[derive(Clone, Debug)]
pub struct MatrixFit {
    pub coefficients: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_score: f64,
}

pub fn fit_gaussian_matrix(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<MatrixFit> {
    let b = least_squares(x, y)?;
    let score = x.transpose() * (y - x * &b);
    Ok(MatrixFit { coefficients: b, converged: true, iterations: 1, max_score: score.amax() })
}

fn bernoulli_loglik(y: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    y.iter()
        .zip(eta.iter())
        .map(|(&y, &e)| {
            // log(1 + exp(e)) computed stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            y * e - softplus
        })
        .sum()
}

/// Newton-Raphson / IRLS for logistic regression with step halving.
pub fn fit_logistic_matrix(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<MatrixFit> {
    let (n, p) = x.shape();
    let mut beta = DVector::zeros(p);
    let ybar = y.mean().clamp(1e-6, 1.0 - 1e-6);
    if p > 0 && x.column(0).iter().all(|&v| v == 1.0) {
        beta[0] = (ybar / (1.0 - ybar)).ln();
    }
    let mut eta = x * &beta;
    let mut ll = bernoulli_loglik(y, &eta);
    let mut last_step = f64::INFINITY;
    for it in 0..IRLS_MAX_ITER {
        let mu = eta.map(expit);
        let score = x.transpose() * (y - &mu);
        let max_score = score.amax();
        if max_score <= SCORE_TOL && last_step <= COEF_TOL {
            return Ok(MatrixFit { coefficients: beta, converged: true, iterations: it, max_score });
        }
        let mut xw = x.clone();
        for i in 0..n {
            let w = (mu[i] * (1.0 - mu[i])).max(1e-300).sqrt();
            xw.row_mut(i).scale_mut(w);
        }
        let info = xw.transpose() * &xw;
        let delta = match cholesky(info) {
            Ok(ch) => ch.solve(&score),
            Err(_) => {
                return Ok(MatrixFit { coefficients: beta, converged: false, iterations: it, max_score });
            }
        };
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &delta * step;
            let eta_c = x * &cand;
            let ll_c = bernoulli_loglik(y, &eta_c);
            if ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                last_step = (&delta * step).amax();
                beta = cand;
                eta = eta_c;
                ll = ll_c;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            last_step = 0.0;
        }
    }
    let mu = eta.map(expit);
    let max_score = (x.transpose() * (y - &mu)).amax();
    let converged = max_score <= SCORE_TOL && last_step <= COEF_TOL;
    Ok(MatrixFit { coefficients: beta, converged, iterations: IRLS_MAX_ITER, max_score })
}

/// One fitted linear predictor: the whole sample or one treatment arm.
#[derive(Clone, Debug)]
pub struct GlmPart {
    pub arm: Option<u8>,
    pub column_names: Vec<String>,
    /// Aligned with `column_names`; aliased columns hold 0.
    pub coefficients: Vec<f64>,
    pub aliased: Vec<String>,
    /// Per center (fit-time enumeration), the indicator column if one was estimated.
    pub center_columns: Vec<Option<usize>>,
    /// Centers whose outcomes were all 0 or all 1 in a center-indicator
    /// logistic fit; the MLE sends their indicator to ±∞, so their fitted
    /// mean is the constant outcome.
    pub boundary_centers: Vec<(usize, f64)>,
    pub converged: bool,
    pub iterations: usize,
    pub max_score: f64,
}

#[derive(Clone, Debug)]
pub struct GlmFit {
    pub family: OutcomeFamily,
    pub design: DesignSpec,
    /// One part, or (control, treated) when `fit_per_arm`.
    pub parts: Vec<GlmPart>,
    pub converged: bool,
    pub iterations: usize,
    center_ids: Vec<String>,
}

impl GlmFit {
    pub fn coefficients(&self) -> Vec<f64> {
        self.parts.iter().flat_map(|p| p.coefficients.iter().copied()).collect()
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        for part in &self.parts {
            let tag = match part.arm {
                Some(a) => format!("arm {a}: "),
                None => String::new(),
            };
            if !part.aliased.is_empty() {
                w.push(format!("{tag}dropped aliased columns {:?}", part.aliased));
            }
            if !part.boundary_centers.is_empty() {
                let ids: Vec<&str> = part.boundary_centers.iter().map(|(c, _)| self.center_ids[*c].as_str()).collect();
                w.push(format!("{tag}centers with constant outcome fitted at the boundary: {ids:?}"));
            }
            if !part.converged {
                w.push(format!("{tag}fit did not converge (max score {:.3e})", part.max_score));
            }
        }
        w
    }
}

pub fn fit_glm(data: &TrialDataset, design: &DesignSpec) -> Result<GlmFit> {
    design.validate(data)?;
    let mut parts = Vec::new();
    if design.fit_per_arm {
        for arm in [0u8, 1] {
            let rows: Vec<usize> = (0..data.n()).filter(|&i| data.records()[i].treatment == arm).collect();
            if rows.is_empty() {
                return Err(Error::InvalidData(format!("no patients in arm {arm}")));
            }
            parts.push(fit_part(data, design, &rows, Some(arm))?);
        }
    } else {
        let rows: Vec<usize> = (0..data.n()).collect();
        parts.push(fit_part(data, design, &rows, None)?);
    }
    let converged = parts.iter().all(|p| p.converged);
    let iterations = parts.iter().map(|p| p.iterations).max().unwrap_or(0);
    if !converged {
        log::debug!("GLM fit did not converge");
    }
    Ok(GlmFit {
        family: data.family(),
        design: design.clone(),
        parts,
        converged,
        iterations,
        center_ids: data.center_ids().to_vec(),
    })
}

fn fit_part(data: &TrialDataset, design: &DesignSpec, rows: &[usize], arm: Option<u8>) -> Result<GlmPart> {
    let k = data.k();
    let family = data.family();
    let mut fit_rows: Vec<usize> = rows.to_vec();
    let mut boundary = Vec::new();
    let mut indicator_centers: Vec<usize> = Vec::new();
    let mut absent: Vec<usize> = Vec::new();

    if design.center_indicators {
        let mut by_center: Vec<Vec<usize>> = vec![Vec::new(); k];
        for &i in rows {
            by_center[data.center_of(i)].push(i);
        }
        let mut live = Vec::new();
        for (c, r) in by_center.iter().enumerate() {
            if r.is_empty() {
                absent.push(c);
                continue;
            }
            if family == OutcomeFamily::Binomial {
                let first = data.outcome(r[0]);
                if r.iter().all(|&i| data.outcome(i) == first) {
                    boundary.push((c, first));
                    continue;
                }
            }
            live.push(c);
        }
        if !boundary.is_empty() {
            let sep: Vec<bool> = (0..k).map(|c| boundary.iter().any(|b| b.0 == c)).collect();
            fit_rows.retain(|&i| !sep[data.center_of(i)]);
        }
        // the first live center is the reference level
        indicator_centers = live.into_iter().skip(1).collect();
    }

    let p_fixed = design.n_fixed();
    let mut names = design.fixed_names(data);
    let mut center_columns = vec![None; k];
    for (j, &c) in indicator_centers.iter().enumerate() {
        names.push(format!("center[{}]", data.center_ids()[c]));
        center_columns[c] = Some(p_fixed + j);
    }
    let p = names.len();
    let mut x = DMatrix::zeros(fit_rows.len(), p);
    let mut buf = vec![0.0; p_fixed];
    for (r, &i) in fit_rows.iter().enumerate() {
        design.fill_row(data, i, None, &mut buf);
        for j in 0..p_fixed {
            x[(r, j)] = buf[j];
        }
        if let Some(col) = center_columns[data.center_of(i)] {
            x[(r, col)] = 1.0;
        }
    }
    let y = DVector::from_iterator(fit_rows.len(), fit_rows.iter().map(|&i| data.outcome(i)));

    let mut aliased_names: Vec<String> = absent
        .iter()
        .filter(|_| design.center_indicators)
        .map(|&c| format!("center[{}]", data.center_ids()[c]))
        .collect();

    if fit_rows.is_empty() {
        // every center sits at the boundary
        return Ok(GlmPart {
            arm,
            column_names: names,
            coefficients: vec![0.0; p],
            aliased: aliased_names,
            center_columns,
            boundary_centers: boundary,
            converged: true,
            iterations: 0,
            max_score: 0.0,
        });
    }

    let aliased = aliased_columns(&x);
    let bad: Vec<String> = aliased.iter().filter(|&&j| j < p_fixed).map(|&j| names[j].clone()).collect();
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }
    let keep: Vec<usize> = (0..p).filter(|j| !aliased.contains(j)).collect();
    for &j in &aliased {
        aliased_names.push(names[j].clone());
        if let Some(c) = center_columns.iter().position(|&col| col == Some(j)) {
            center_columns[c] = None;
        }
    }
    if !aliased.is_empty() {
        log::debug!("dropping aliased columns {aliased_names:?}");
    }
    let xk = x.select_columns(&keep);
    let mf = match family {
        OutcomeFamily::Gaussian => fit_gaussian_matrix(&xk, &y)?,
        OutcomeFamily::Binomial => fit_logistic_matrix(&xk, &y)?,
    };
    let mut coefficients = vec![0.0; p];
    for (m, &j) in keep.iter().enumerate() {
        coefficients[j] = mf.coefficients[m];
    }
    Ok(GlmPart {
        arm,
        column_names: names,
        coefficients,
        aliased: aliased_names,
        center_columns,
        boundary_centers: boundary,
        converged: mf.converged,
        iterations: mf.iterations,
        max_score: mf.max_score,
    })
}

/// Per-patient predicted mean with treatment forced to `arm`.
pub fn predict_counterfactual(fit: &GlmFit, data: &TrialDataset, arm: u8) -> Result<Vec<f64>> {
    if arm > 1 {
        return Err(Error::InvalidData(format!("arm must be 0 or 1, got {arm}")));
    }
    let part = if fit.design.fit_per_arm { &fit.parts[arm as usize] } else { &fit.parts[0] };
    let lookup: HashMap<&str, usize> = fit.center_ids.iter().enumerate().map(|(c, id)| (id.as_str(), c)).collect();
    let center_map = data
        .center_ids()
        .iter()
        .map(|id| {
            lookup
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidData(format!("center `{id}` was not present when the model was fitted")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut boundary: Vec<Option<f64>> = vec![None; fit.center_ids.len()];
    for &(c, v) in &part.boundary_centers {
        boundary[c] = Some(v);
    }
    let p_fixed = fit.design.n_fixed();
    let mut buf = vec![0.0; p_fixed];
    let mut out = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let c = center_map[data.center_of(i)];
        if let Some(v) = boundary[c] {
            out.push(v);
            continue;
        }
        fit.design.fill_row(data, i, Some(f64::from(arm)), &mut buf);
        let mut eta: f64 = buf.iter().zip(&part.coefficients).map(|(a, b)| a * b).sum();
        if let Some(col) = part.center_columns[c] {
            eta += part.coefficients[col];
        }
        out.push(fit.family.inverse_link(eta));
    }
    Ok(out)
}
