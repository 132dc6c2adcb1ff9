//! Euler full-truncation simulation of the two-factor square-root volatility
//! model with compound-Poisson lognormal price jumps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DriftMode {
    /// No drift in the log price.
    #[default]
    Zero,
    /// Constant mu minus the convexity correction of the diffusive variance.
    Explicit { mu: f64 },
}

/// Historical-measure parameters, daily units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuralParams {
    pub kappa1: f64,
    pub kappa2: f64,
    /// Long-run level of each factor.
    pub omega: f64,
    pub vol1: f64,
    pub vol2: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub lambda: f64,
    pub mu_j: f64,
    pub sigma_j: f64,
    #[serde(default = "yes")]
    pub two_factor: bool,
    #[serde(default)]
    pub drift: DriftMode,
}

fn yes() -> bool {
    true
}

impl StructuralParams {
    /// Two-factor model without jumps or leverage (the 2-SV estimates).
    pub fn two_sv() -> Self {
        StructuralParams {
            kappa1: 5.14e-2,
            kappa2: 2.63,
            omega: 4.32e-4,
            vol1: 9.72e-3,
            vol2: 3.29e-2,
            rho1: 0.0,
            rho2: 0.0,
            lambda: 0.0,
            mu_j: 0.0,
            sigma_j: 0.0,
            two_factor: true,
            drift: DriftMode::Zero,
        }
    }

    /// Two-factor model with leverage and jumps (the 2-SVJ estimates).
    pub fn two_svj() -> Self {
        StructuralParams {
            kappa1: 3.93e-2,
            kappa2: 2.03,
            omega: 4.31e-4,
            vol1: 8.28e-3,
            vol2: 3.20e-2,
            rho1: -0.82,
            rho2: -0.11,
            lambda: 0.72,
            mu_j: -7.9e-3,
            sigma_j: 8.5e-3,
            two_factor: true,
            drift: DriftMode::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kappa1 > 0.0
            && (!self.two_factor || self.kappa2 > 0.0)
            && self.omega >= 0.0
            && self.vol1 >= 0.0
            && self.vol2 >= 0.0
            && self.rho1.abs() <= 1.0
            && self.rho2.abs() <= 1.0
            && self.lambda >= 0.0
            && self.sigma_j >= 0.0;
        let finite = [
            self.kappa1, self.kappa2, self.omega, self.vol1, self.vol2, self.rho1, self.rho2, self.lambda, self.mu_j,
            self.sigma_j,
        ]
        .iter()
        .all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid structural parameters {self:?}")))
        }
    }

    pub fn factors(&self) -> Vec<Factor> {
        let mut f = vec![Factor { kappa: self.kappa1, omega: self.omega, vol: self.vol1, rho: self.rho1 }];
        if self.two_factor {
            f.push(Factor { kappa: self.kappa2, omega: self.omega, vol: self.vol2, rho: self.rho2 });
        }
        f
    }
}

/// One square-root variance factor: dv = κ(ω − v)dt + Λ√v dB, corr(dB, dW) = ρ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub kappa: f64,
    pub omega: f64,
    pub vol: f64,
    pub rho: f64,
}

impl Factor {
    /// Gamma stationary law of the factor, if non-degenerate.
    fn stationary(&self) -> Option<Gamma> {
        if self.vol == 0.0 || self.omega == 0.0 {
            return None;
        }
        let shape = 2.0 * self.kappa * self.omega / (self.vol * self.vol);
        let rate = 2.0 * self.kappa / (self.vol * self.vol);
        Gamma::new(shape, rate).ok()
    }
}

/// Stationary mean and variance of σ²₁ + σ²₂.
pub fn stationary_moments(p: &StructuralParams) -> (f64, f64) {
    p.factors().iter().fold((0.0, 0.0), |(m, v), f| (m + f.omega, v + f.omega * f.vol * f.vol / (2.0 * f.kappa)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialVariance {
    /// Draw each factor from its stationary Gamma law.
    Stationary,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub days: usize,
    pub intervals: usize,
    pub substeps: usize,
    pub replicas: usize,
    pub seed: u64,
    pub initial: InitialVariance,
    /// Only "euler-full-truncation" is implemented.
    pub scheme: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            days: 1283,
            intervals: 120,
            substeps: 5,
            replicas: 1,
            seed: 42,
            initial: InitialVariance::Stationary,
            scheme: "euler-full-truncation".into(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.days == 0 || self.intervals == 0 || self.substeps == 0 || self.replicas == 0 {
            return Err(Error::InvalidInput("days, intervals, substeps and replicas must be positive".into()));
        }
        if self.scheme != "euler-full-truncation" {
            return Err(Error::InvalidInput(format!("unknown scheme `{}`", self.scheme)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueJump {
    pub day: usize,
    pub interval: usize,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaPath {
    pub replica: usize,
    pub intervals: usize,
    /// Row-major days × intervals log returns.
    pub returns: Vec<f64>,
    /// ∫ (σ²₁ + σ²₂) dt per day.
    pub integrated_variance: Vec<f64>,
    /// Σ c² per day.
    pub jump_variation: Vec<f64>,
    pub jumps: Vec<TrueJump>,
    /// Factor variances at the end of each day (truncated at zero).
    pub end_variance: Vec<Vec<f64>>,
}

impl ReplicaPath {
    pub fn days(&self) -> usize {
        self.integrated_variance.len()
    }

    pub fn day(&self, d: usize) -> &[f64] {
        &self.returns[d * self.intervals..(d + 1) * self.intervals]
    }

    pub fn daily_returns(&self) -> Vec<f64> {
        self.returns.chunks(self.intervals).map(|c| c.iter().sum()).collect()
    }
}

/// Diffusion, jump and initial-state streams 3s, 3s + 1, 3s + 2 of replica s.
pub fn replica_rngs(seed: u64, replica: usize) -> (ChaCha8Rng, ChaCha8Rng, ChaCha8Rng) {
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(3 * replica as u64 + k);
        r
    };
    (stream(0), stream(1), stream(2))
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let u: f64 = rng.random();
    let mut p = (-mean).exp();
    let mut cdf = p;
    let mut k = 0;
    while u > cdf && k < 1000 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

pub fn simulate_replica(p: &StructuralParams, cfg: &SimConfig, replica: usize) -> Result<ReplicaPath> {
    let factors = p.factors();
    let (mut rng, mut jrng, mut irng) = replica_rngs(cfg.seed, replica);
    let mut v: Vec<f64> = match &cfg.initial {
        InitialVariance::Fixed(v0) => {
            if v0.len() < factors.len() {
                return Err(Error::InvalidInput("one initial variance per factor required".into()));
            }
            v0[..factors.len()].to_vec()
        }
        // inverse-CDF draws keep the initial state continuous in the parameters
        InitialVariance::Stationary => factors
            .iter()
            .map(|f| {
                let u: f64 = irng.random();
                f.stationary().map(|g| g.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12))).unwrap_or(f.omega)
            })
            .collect(),
    };
    let dt = 1.0 / (cfg.intervals * cfg.substeps) as f64;
    let sdt = dt.sqrt();
    let jump_mean = p.lambda * dt;
    let shifted: Vec<(f64, f64)> = factors.iter().map(|f| (f.rho, (1.0 - f.rho * f.rho).max(0.0).sqrt())).collect();
    let n = cfg.days * cfg.intervals;
    let mut out = ReplicaPath {
        replica,
        intervals: cfg.intervals,
        returns: Vec::with_capacity(n),
        integrated_variance: Vec::with_capacity(cfg.days),
        jump_variation: Vec::with_capacity(cfg.days),
        jumps: Vec::new(),
        end_variance: Vec::with_capacity(cfg.days),
    };
    for day in 0..cfg.days {
        let mut iv = 0.0;
        let mut jv = 0.0;
        for interval in 0..cfg.intervals {
            let mut dx = 0.0;
            for _ in 0..cfg.substeps {
                let mut vtot = 0.0;
                for (k, f) in factors.iter().enumerate() {
                    let vp = v[k].max(0.0);
                    let zx: f64 = StandardNormal.sample(&mut rng);
                    let zp: f64 = StandardNormal.sample(&mut rng);
                    let zv = shifted[k].0 * zx + shifted[k].1 * zp;
                    let s = (vp).sqrt() * sdt;
                    dx += s * zx;
                    v[k] += f.kappa * (f.omega - vp) * dt + f.vol * s * zv;
                    vtot += vp;
                }
                iv += vtot * dt;
                if let DriftMode::Explicit { mu } = p.drift {
                    dx += (mu - 0.5 * vtot) * dt;
                }
                if jump_mean > 0.0 {
                    for _ in 0..poisson_count(&mut jrng, jump_mean) {
                        let z: f64 = StandardNormal.sample(&mut jrng);
                        let c = p.mu_j + p.sigma_j * z;
                        dx += c;
                        jv += c * c;
                        out.jumps.push(TrueJump { day, interval, size: c });
                    }
                }
            }
            if !dx.is_finite() || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("replica {replica}: non-finite state on day {day}")));
            }
            out.returns.push(dx);
        }
        out.integrated_variance.push(iv);
        out.jump_variation.push(jv);
        out.end_variance.push(v.iter().map(|x| x.max(0.0)).collect());
    }
    Ok(out)
}

/// All replicas; failed replicas are reported as errors in place.
pub fn simulate(p: &StructuralParams, cfg: &SimConfig) -> Result<Vec<Result<ReplicaPath>>> {
    p.validate()?;
    cfg.validate()?;
    Ok((0..cfg.replicas).into_par_iter().map(|s| simulate_replica(p, cfg, s)).collect())
}

/// Risk-neutral dynamics for Monte Carlo pricing checks.
#[derive(Debug, Clone, PartialEq)]
pub struct QDynamics {
    pub factors: Vec<Factor>,
    pub lambda: f64,
    pub mu_j: f64,
    pub sigma_j: f64,
    /// r − q per day.
    pub carry: f64,
}

/// Terminal log prices at each maturity (model days), `paths` draws.
///
/// Variance factors follow full-truncation Euler; given their path, the log
/// price is sampled exactly from its conditional Gaussian law:
/// X_T = x₀ + (carry − λk)T − ½∫v + Σ ρ_j ∫√v_j dB_j + √(Σ(1−ρ_j²)∫v_j) Z + jumps.
pub fn simulate_q_terminal(
    q: &QDynamics,
    x0: f64,
    v0: &[f64],
    maturities: &[f64],
    steps_per_day: usize,
    paths: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let dt = 1.0 / steps_per_day as f64;
    let sdt = dt.sqrt();
    let k = (q.mu_j + 0.5 * q.sigma_j * q.sigma_j).exp() - 1.0;
    let steps: Vec<usize> = maturities.iter().map(|t| (t * steps_per_day as f64).round() as usize).collect();
    let last = *steps.iter().max().unwrap_or(&0);
    let chunk = 4096;
    let blocks: Vec<Vec<Vec<f64>>> = (0..paths.div_ceil(chunk))
        .into_par_iter()
        .map(|b| {
            let (mut rng, mut jrng, _) = replica_rngs(seed, b);
            let n = chunk.min(paths - b * chunk);
            let mut out = vec![Vec::with_capacity(n); maturities.len()];
            let nf = q.factors.len();
            let mut v = vec![0.0; nf];
            let mut iv = vec![0.0; nf];
            let mut m = vec![0.0; nf];
            for _ in 0..n {
                v.copy_from_slice(&v0[..nf]);
                iv.iter_mut().for_each(|x| *x = 0.0);
                m.iter_mut().for_each(|x| *x = 0.0);
                let mut step = 0;
                let mut jumps = 0.0;
                for (mi, &target) in steps.iter().enumerate() {
                    while step < target {
                        for (j, f) in q.factors.iter().enumerate() {
                            let vp = v[j].max(0.0);
                            let z: f64 = StandardNormal.sample(&mut rng);
                            let s = vp.sqrt() * sdt;
                            m[j] += s * z;
                            iv[j] += vp * dt;
                            v[j] += f.kappa * (f.omega - vp) * dt + f.vol * s * z;
                        }
                        step += 1;
                    }
                    let _ = last;
                    let t = target as f64 * dt;
                    // jumps on [previous maturity, this maturity]
                    let prev_t = if mi == 0 { 0.0 } else { steps[mi - 1] as f64 * dt };
                    let nj = poisson_count(&mut jrng, q.lambda * (t - prev_t));
                    for _ in 0..nj {
                        let z: f64 = StandardNormal.sample(&mut jrng);
                        jumps += q.mu_j + q.sigma_j * z;
                    }
                    let mut drift = x0 + (q.carry - q.lambda * k) * t;
                    let mut cvar = 0.0;
                    for (j, f) in q.factors.iter().enumerate() {
                        drift += -0.5 * iv[j] + f.rho * m[j];
                        cvar += (1.0 - f.rho * f.rho) * iv[j];
                    }
                    let z: f64 = StandardNormal.sample(&mut jrng);
                    out[mi].push(drift + cvar.sqrt() * z + jumps);
                }
            }
            out
        })
        .collect();
    let mut merged = vec![Vec::with_capacity(paths); maturities.len()];
    for b in blocks {
        for (dst, src) in merged.iter_mut().zip(b) {
            dst.extend(src);
        }
    }
    merged
}
