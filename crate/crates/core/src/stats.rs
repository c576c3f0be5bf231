//! Small descriptive-statistics helpers.

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with denominator n - 1 (Welford update).
pub fn sample_variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let mut m = 0.0;
    let mut s = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let d = v - m;
        m += d / (i + 1) as f64;
        s += d * (v - m);
    }
    s / (x.len() - 1) as f64
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// One-way ANOVA intraclass correlation.
///
/// Uses the unbalanced-design group size n0 = (N - Σn_g²/N)/(g - 1) and may be
/// negative. Returns 0 when every value is identical.
pub fn anova_icc(groups: &[Vec<f64>]) -> f64 {
    let groups: Vec<&Vec<f64>> = groups.iter().filter(|g| !g.is_empty()).collect();
    let g = groups.len();
    let n: usize = groups.iter().map(|v| v.len()).sum();
    if g < 2 || n <= g {
        return 0.0;
    }
    let grand = groups.iter().flat_map(|v| v.iter()).sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for v in &groups {
        let m = mean(v);
        ssb += v.len() as f64 * (m - grand).powi(2);
        ssw += v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let msb = ssb / (g - 1) as f64;
    let msw = ssw / (n - g) as f64;
    let sum_sq: f64 = groups.iter().map(|v| (v.len() as f64).powi(2)).sum();
    let n0 = (n as f64 - sum_sq / n as f64) / (g - 1) as f64;
    let den = msb + (n0 - 1.0) * msw;
    if den <= 0.0 || !den.is_finite() {
        return 0.0;
    }
    (msb - msw) / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_pass(x: &[f64]) -> f64 {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
    }

    #[test]
    fn variance_matches_two_pass() {
        let x: Vec<f64> = (0..50).map(|i| ((i * 37 % 11) as f64).sin() * 3.0 + 1e3).collect();
        assert_relative_eq!(sample_variance(&x), two_pass(&x), max_relative = 1e-10);
        assert_eq!(sample_variance(&[2.0, 2.0, 2.0]), 0.0);
    }

    #[test]
    fn icc_hand_fixture() {
        // groups (1,3) and (5,7): grand 4, MSB = 2*(1+1)*... computed by hand
        // group means 2, 6; SSB = 2*4 + 2*4 = 16, MSB = 16; SSW = 2 + 2 = 4, MSW = 2
        // n0 = (4 - 8/4)/1 = 2; icc = (16 - 2)/(16 + 2) = 7/9
        let icc = anova_icc(&[vec![1.0, 3.0], vec![5.0, 7.0]]);
        assert_relative_eq!(icc, 7.0 / 9.0, epsilon = 1e-14);
    }

    #[test]
    fn icc_degenerate_cases() {
        assert_eq!(anova_icc(&[vec![1.0, 1.0], vec![1.0, 1.0]]), 0.0);
        let icc = anova_icc(&[vec![1.0; 5], vec![2.0; 5], vec![4.0; 5]]);
        assert_relative_eq!(icc, 1.0, epsilon = 1e-12);
    }
}
