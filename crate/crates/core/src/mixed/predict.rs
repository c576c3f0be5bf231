use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::MixedFit;
use crate::dataset::{OutcomeFamily, TrialDataset};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictionMode {
    /// Plug in each center's empirical BLUPs.
    Blup,
    /// Average over `draws` center effects drawn from N(0, σ̂²). With
    /// `couple_arms` both counterfactual arms see the same draw sequence.
    Sampled { draws: usize, seed: u64, couple_arms: bool },
}

/// Per-patient counterfactual mean under `arm`.
pub fn predict_counterfactual_mixed(fit: &MixedFit, data: &TrialDataset, arm: u8, mode: PredictionMode) -> Result<Vec<f64>> {
    if arm > 1 {
        return Err(Error::InvalidData(format!("arm must be 0 or 1, got {arm}")));
    }
    let a = f64::from(arm);
    let p = fit.design.n_fixed();
    let q = fit.re.n_terms();
    let mut xbuf = vec![0.0; p];
    let mut zbuf = vec![0.0; q];
    let fixed_eta = |i: usize, xbuf: &mut [f64]| -> f64 {
        fit.design.fill_row(data, i, Some(a), xbuf);
        xbuf.iter().zip(&fit.fixed_coefficients).map(|(x, b)| x * b).sum()
    };
    let mut out = vec![0.0; data.n()];
    match mode {
        PredictionMode::Blup => {
            let lookup: HashMap<&str, usize> =
                fit.center_ids.iter().enumerate().map(|(c, id)| (id.as_str(), c)).collect();
            for c in 0..data.k() {
                let id = &data.center_ids()[c];
                let fc = *lookup
                    .get(id.as_str())
                    .ok_or_else(|| Error::InvalidData(format!("center `{id}` was not present when the model was fitted")))?;
                let b = &fit.blups[fc];
                for &i in data.center_rows(c) {
                    fit.re.fill_z(data, i, Some(a), &mut zbuf);
                    let eta = fixed_eta(i, &mut xbuf) + zbuf.iter().zip(b).map(|(z, b)| z * b).sum::<f64>();
                    out[i] = fit.family.inverse_link(eta);
                }
            }
        }
        PredictionMode::Sampled { draws, seed, couple_arms } => {
            if draws == 0 {
                return Err(Error::Config("draws must be at least 1".into()));
            }
            let sd: Vec<f64> = fit.variance_components.iter().map(|v| v.max(0.0).sqrt()).collect();
            let mut rng = stream(seed, &[if couple_arms { 0 } else { 1 + u64::from(arm) }]);
            let mut b = vec![0.0; draws * q];
            for c in 0..data.k() {
                for v in b.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v.1 = z * sd[v.0 % q];
                }
                match fit.family {
                    OutcomeFamily::Gaussian => {
                        // linear link: the draw average passes through
                        let mut mean_b = vec![0.0; q];
                        for d in 0..draws {
                            for j in 0..q {
                                mean_b[j] += b[d * q + j];
                            }
                        }
                        mean_b.iter_mut().for_each(|m| *m /= draws as f64);
                        for &i in data.center_rows(c) {
                            fit.re.fill_z(data, i, Some(a), &mut zbuf);
                            out[i] = fixed_eta(i, &mut xbuf) + zbuf.iter().zip(&mean_b).map(|(z, m)| z * m).sum::<f64>();
                        }
                    }
                    OutcomeFamily::Binomial => {
                        for &i in data.center_rows(c) {
                            fit.re.fill_z(data, i, Some(a), &mut zbuf);
                            let eta = fixed_eta(i, &mut xbuf);
                            let mut acc = 0.0;
                            for d in 0..draws {
                                let shift: f64 = (0..q).map(|j| zbuf[j] * b[d * q + j]).sum();
                                acc += crate::dataset::expit(eta + shift);
                            }
                            out[i] = acc / draws as f64;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
