//! Nelder–Mead simplex search on box constraints, with restarts.
//!
//! Finite bounds are removed by a logistic map, half-open ones by an
//! exponential map, so the simplex moves in an unconstrained space.

use serde::{Deserialize, Serialize};

const INNER_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
}

impl Bound {
    pub fn new(lo: f64, hi: f64) -> Self {
        Bound { lo, hi }
    }

    pub fn free() -> Self {
        Bound { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    fn to_inner(&self, x: f64) -> f64 {
        match (self.lo.is_finite(), self.hi.is_finite()) {
            (true, true) => {
                let w = self.hi - self.lo;
                let p = ((x - self.lo) / w).clamp(1e-12, 1.0 - 1e-12);
                (p / (1.0 - p)).ln()
            }
            (true, false) => (x - self.lo).max(1e-300).ln(),
            (false, true) => (self.hi - x).max(1e-300).ln(),
            (false, false) => x,
        }
    }

    fn to_outer(&self, u: f64) -> f64 {
        match (self.lo.is_finite(), self.hi.is_finite()) {
            (true, true) => self.lo + (self.hi - self.lo) / (1.0 + (-u).exp()),
            (true, false) => self.lo + u.exp(),
            (false, true) => self.hi - u.exp(),
            (false, false) => u,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Simplex diameter in the inner space.
    pub xtol: f64,
    pub ftol_abs: f64,
    pub ftol_rel: f64,
    /// Initial simplex edge in the inner space.
    pub step: f64,
    pub restarts: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead { max_evals: 2000, xtol: 1e-8, ftol_abs: 1e-12, ftol_rel: 1e-10, step: 0.25, restarts: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub eval: usize,
    pub x: Vec<f64>,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
    /// Every improvement of the incumbent.
    pub trace: Vec<TracePoint>,
}

struct Counter<'a, F> {
    f: F,
    bounds: &'a [Bound],
    evals: usize,
    best: Option<(Vec<f64>, f64)>,
    trace: Vec<TracePoint>,
}

impl<F: FnMut(&[f64]) -> f64> Counter<'_, F> {
    fn outer(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(self.bounds).map(|(u, b)| b.to_outer(*u)).collect()
    }

    /// Keeps bounded coordinates off the flat tails of their maps.
    fn eval(&mut self, u: &mut [f64]) -> f64 {
        for (u, b) in u.iter_mut().zip(self.bounds) {
            if b.lo.is_finite() || b.hi.is_finite() {
                *u = u.clamp(-INNER_LIMIT, INNER_LIMIT);
            }
        }
        let x = self.outer(u);
        let mut v = (self.f)(&x);
        if !v.is_finite() {
            v = f64::INFINITY;
        }
        self.evals += 1;
        if self.best.as_ref().is_none_or(|(_, b)| v < *b) {
            self.trace.push(TracePoint { eval: self.evals, x: x.clone(), f: v });
            self.best = Some((x, v));
        }
        v
    }
}

impl NelderMead {
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, f: F, x0: &[f64], bounds: &[Bound]) -> Minimum {
        assert_eq!(x0.len(), bounds.len(), "one bound per coordinate");
        let mut c = Counter { f, bounds, evals: 0, best: None, trace: Vec::new() };
        let mut u: Vec<f64> = x0.iter().zip(bounds).map(|(x, b)| b.to_inner(*x)).collect();
        let mut converged = false;
        let mut last = f64::INFINITY;
        for round in 0..=self.restarts {
            let (best_u, fb, ok) = self.run(&mut c, &u);
            u = best_u;
            converged = ok;
            let improved = last - fb > self.ftol_abs + self.ftol_rel * fb.abs();
            last = fb;
            if !ok || c.evals >= self.max_evals || (round > 0 && !improved) {
                break;
            }
        }
        let (x, f) = c.best.clone().unwrap_or((x0.to_vec(), f64::INFINITY));
        Minimum { x, f, evals: c.evals, converged, trace: c.trace }
    }

    fn run<F: FnMut(&[f64]) -> f64>(&self, c: &mut Counter<'_, F>, start: &[f64]) -> (Vec<f64>, f64, bool) {
        let n = start.len();
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let mut s0 = start.to_vec();
        let f0 = c.eval(&mut s0);
        simplex.push((s0, f0));
        for i in 0..n {
            let mut p = start.to_vec();
            p[i] += self.step;
            let fp = c.eval(&mut p);
            simplex.push((p, fp));
        }
        loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let fbest = simplex[0].1;
            let fworst = simplex[n].1;
            let diam = simplex[1..]
                .iter()
                .map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            let fspread = fworst - fbest;
            if fbest.is_finite()
                && fspread.is_finite()
                && fspread <= self.ftol_abs + self.ftol_rel * fbest.abs()
                && diam <= self.xtol.max(1e-3 * self.step)
                || diam <= self.xtol
            {
                return (simplex[0].0.clone(), fbest, fbest.is_finite());
            }
            if c.evals >= self.max_evals {
                return (simplex[0].0.clone(), fbest, false);
            }
            let centroid: Vec<f64> =
                (0..n).map(|k| simplex[..n].iter().map(|(p, _)| p[k]).sum::<f64>() / n as f64).collect();
            let along = |t: f64| -> Vec<f64> {
                centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + t * (w - c)).collect()
            };
            let mut xr = along(-1.0);
            let fr = c.eval(&mut xr);
            if fr < simplex[0].1 {
                let mut xe = along(-2.0);
                let fe = c.eval(&mut xe);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
                continue;
            }
            let (xc, fc) = if fr < fworst {
                let mut x = along(-0.5);
                let f = c.eval(&mut x);
                (x, f)
            } else {
                let mut x = along(0.5);
                let f = c.eval(&mut x);
                (x, f)
            };
            if fc < fr.min(fworst) {
                simplex[n] = (xc, fc);
                continue;
            }
            let best = simplex[0].0.clone();
            for item in simplex.iter_mut().skip(1) {
                let mut p: Vec<f64> = best.iter().zip(&item.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                let fp = c.eval(&mut p);
                *item = (p, fp);
            }
        }
    }
}

/// Levenberg–Marquardt on a residual vector with a forward-difference Jacobian.
/// Iterates are clamped to the box; used to polish zero-residual fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LevenbergMarquardt {
    pub max_iter: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
    pub xtol: f64,
    pub ftol: f64,
}

impl Default for LevenbergMarquardt {
    fn default() -> Self {
        LevenbergMarquardt { max_iter: 100, fd_step: 1e-7, xtol: 1e-14, ftol: 1e-30 }
    }
}

impl LevenbergMarquardt {
    /// Returns the best point and its sum of squares. `resid` returns `None`
    /// where the model is undefined.
    pub fn minimize<F: FnMut(&[f64]) -> Option<Vec<f64>>>(
        &self,
        mut resid: F,
        x0: &[f64],
        bounds: &[Bound],
        scale: &[f64],
    ) -> (Vec<f64>, f64) {
        let clamp = |x: &mut Vec<f64>| {
            for (v, b) in x.iter_mut().zip(bounds) {
                *v = v.clamp(b.lo, b.hi);
            }
        };
        let ss = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
        let mut x = x0.to_vec();
        let Some(mut r) = resid(&x) else {
            return (x, f64::INFINITY);
        };
        let mut f = ss(&r);
        let mut mu = 1e-3;
        let n = x.len();
        for _ in 0..self.max_iter {
            if f <= self.ftol {
                break;
            }
            let m = r.len();
            let mut jac = nalgebra::DMatrix::<f64>::zeros(m, n);
            let mut ok = true;
            for k in 0..n {
                let h = self.fd_step * x[k].abs().max(scale[k]);
                let mut xp = x.clone();
                xp[k] += h;
                match resid(&xp) {
                    Some(rp) => {
                        for i in 0..m {
                            jac[(i, k)] = (rp[i] - r[i]) / h;
                        }
                    }
                    None => ok = false,
                }
            }
            if !ok {
                break;
            }
            let rv = nalgebra::DVector::from_column_slice(&r);
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * rv;
            let mut accepted = false;
            for _ in 0..30 {
                let mut a = jtj.clone();
                for k in 0..n {
                    a[(k, k)] += mu * jtj[(k, k)].max(1e-300);
                }
                let Some(step) = a.lu().solve(&(-&jtr)) else {
                    mu *= 10.0;
                    continue;
                };
                let mut xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                clamp(&mut xn);
                if let Some(rn) = resid(&xn) {
                    let fnew = ss(&rn);
                    if fnew < f {
                        let moved = xn.iter().zip(&x).zip(scale).all(|((a, b), s)| (a - b).abs() <= self.xtol * b.abs().max(*s));
                        x = xn;
                        r = rn;
                        f = fnew;
                        mu = (mu / 10.0).max(1e-15);
                        accepted = true;
                        if moved {
                            return (x, f);
                        }
                        break;
                    }
                }
                mu *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        (x, f)
    }
}
