//! Derivative-free minimizers for the variance-parameter searches.

#[derive(Clone, Debug)]
pub struct NmOptions {
    pub ftol: f64,
    pub xtol: f64,
    pub max_evals: usize,
    pub restarts: usize,
    pub step: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        NmOptions { ftol: 1e-9, xtol: 1e-7, max_evals: 4000, restarts: 3, step: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn eval(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64]) -> f64 {
    let v = f(x);
    if v.is_nan() { f64::INFINITY } else { v }
}

/// Nelder-Mead simplex search, restarted from the incumbent until a restart
/// no longer improves the criterion by more than `ftol`.
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], opts: &NmOptions) -> Minimum {
    let mut best = x0.to_vec();
    let mut fbest = eval(&mut f, &best);
    let mut evals = 1;
    let mut converged = false;
    let mut step = opts.step;
    for round in 0..=opts.restarts {
        let (x, fx, used, conv) = nm_run(&mut f, &best, step, opts, opts.max_evals.saturating_sub(evals));
        evals += used;
        let improved = fbest - fx;
        if fx <= fbest {
            best = x;
            fbest = fx;
        }
        converged = conv;
        if round > 0 && improved.abs() <= opts.ftol * (1.0 + fbest.abs()) && conv {
            break;
        }
        if evals >= opts.max_evals {
            break;
        }
        step = (step * 0.5).max(1e-3);
    }
    Minimum { x: best, f: fbest, evals, converged }
}

fn nm_run(
    f: &mut impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    opts: &NmOptions,
    budget: usize,
) -> (Vec<f64>, f64, usize, bool) {
    let d = x0.len();
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for j in 0..d {
        let mut p = x0.to_vec();
        p[j] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(f, p)).collect();
    let mut used = d + 1;
    let mut conv = false;
    while used < budget {
        let mut idx: Vec<usize> = (0..=d).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = idx.iter().map(|&i| pts[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();

        let fspread = vals[d] - vals[0];
        let xspread = pts[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if fspread.abs() <= opts.ftol * (1.0 + vals[0].abs()) && xspread <= opts.xtol {
            conv = true;
            break;
        }

        let centroid: Vec<f64> = (0..d).map(|j| pts[..d].iter().map(|p| p[j]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..d).map(|j| centroid[j] + t * (pts[d][j] - centroid[j])).collect() };

        let xr = along(-1.0);
        let fr = eval(f, &xr);
        used += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = eval(f, &xe);
            used += 1;
            if fe < fr {
                pts[d] = xe;
                vals[d] = fe;
            } else {
                pts[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            pts[d] = xr;
            vals[d] = fr;
        } else {
            let (xc, fc) = if fr < vals[d] {
                let xc = along(-0.5);
                (xc.clone(), eval(f, &xc))
            } else {
                let xc = along(0.5);
                (xc.clone(), eval(f, &xc))
            };
            used += 1;
            if fc < vals[d].min(fr) {
                pts[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    for j in 0..d {
                        pts[i][j] = pts[0][j] + 0.5 * (pts[i][j] - pts[0][j]);
                    }
                    vals[i] = eval(f, &pts[i]);
                }
                used += d;
            }
        }
    }
    let i = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    (pts[i].clone(), vals[i], used, conv)
}

/// Brent's parabolic-interpolation minimizer on `[a, b]`.
pub fn brent(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    if fx.is_nan() {
        fx = f64::INFINITY;
    }
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-14;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let mut fu = f(u);
        if fu.is_nan() {
            fu = f64::INFINITY;
        }
        if fu <= fx {
            if u < x { b = x } else { a = x }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x { a = u } else { b = u }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Scan a grid over `[lo, hi]`, then polish the best cell with Brent.
pub fn minimize_scalar(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, grid: usize) -> (f64, f64) {
    let h = (hi - lo) / grid as f64;
    let mut best = (lo, f64::INFINITY);
    for i in 0..=grid {
        let x = lo + h * i as f64;
        let v = f(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    let a = (best.0 - h).max(lo);
    let b = (best.0 + h).min(hi);
    let r = brent(&mut f, a, b, 1e-10);
    if r.1 <= best.1 { r } else { best }
}
