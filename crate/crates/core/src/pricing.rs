//! Risk-neutral parameter map, closed-form characteristic function, COS
//! Fourier pricing, Black-76 implied volatility and risk-premium calibration.
//!
//! Model time is measured in trading days (the unit of the structural
//! parameters). A quote with `tau_days` calendar days to expiry has model
//! maturity `tau_days * 252 / 365` and Black-76 year fraction `tau_days / 365`.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Bound, LevenbergMarquardt, NelderMead};
use crate::sim::{Factor, QDynamics, StructuralParams};
use crate::special::{norm_cdf, norm_pdf};

pub const TRADING_DAYS: f64 = 252.0;
pub const CALENDAR_DAYS: f64 = 365.0;

/// Scale in which premia are quoted. Natural premia act on log returns and
/// variances in decimal daily units; daily-percent premia act on returns in
/// percent and variances in percent squared, so φ scales by 100 and ψ by 1e4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PremiaScale {
    #[default]
    Natural,
    DailyPercent,
}

impl PremiaScale {
    fn factors(self) -> (f64, f64) {
        match self {
            PremiaScale::Natural => (1.0, 1.0),
            PremiaScale::DailyPercent => (100.0, 1e4),
        }
    }
}

/// Equity premium φ and variance premia ψ₁, ψ₂, natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RiskPremia {
    pub phi: f64,
    pub psi1: f64,
    pub psi2: f64,
}

impl RiskPremia {
    pub fn zero() -> Self {
        RiskPremia::default()
    }

    pub fn from_scaled(phi: f64, psi1: f64, psi2: f64, scale: PremiaScale) -> Self {
        let (a, b) = scale.factors();
        RiskPremia { phi: phi * a, psi1: psi1 * b, psi2: psi2 * b }
    }

    pub fn to_scaled(&self, scale: PremiaScale) -> (f64, f64, f64) {
        let (a, b) = scale.factors();
        (self.phi / a, self.psi1 / b, self.psi2 / b)
    }

    fn psi(&self, j: usize) -> f64 {
        if j == 0 {
            self.psi1
        } else {
            self.psi2
        }
    }
}

/// Risk-neutral dynamics. Rates are per trading day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskNeutralParams {
    pub factors: Vec<Factor>,
    pub lambda: f64,
    pub mu_j: f64,
    pub sigma_j: f64,
    pub r: f64,
    pub q: f64,
}

impl RiskNeutralParams {
    pub fn with_rates(mut self, r_annual: f64, q_annual: f64) -> Self {
        self.r = r_annual / TRADING_DAYS;
        self.q = q_annual / TRADING_DAYS;
        self
    }

    /// E[e^c] − 1 under the risk-neutral jump law.
    pub fn jump_compensator(&self) -> f64 {
        (self.mu_j + 0.5 * self.sigma_j * self.sigma_j).exp() - 1.0
    }

    pub fn q_dynamics(&self) -> QDynamics {
        QDynamics {
            factors: self.factors.clone(),
            lambda: self.lambda,
            mu_j: self.mu_j,
            sigma_j: self.sigma_j,
            carry: self.r - self.q,
        }
    }
}

pub fn risk_neutralize(p: &StructuralParams, premia: &RiskPremia) -> Result<RiskNeutralParams> {
    let mut factors = Vec::new();
    for (j, f) in p.factors().into_iter().enumerate() {
        let kappa_star = f.kappa - premia.phi * f.rho * f.vol - premia.psi(j) * f.vol * f.vol;
        if !(kappa_star > 0.0) {
            return Err(Error::InadmissiblePremia { factor: j + 1, kappa_star });
        }
        factors.push(Factor { kappa: kappa_star, omega: f.omega * (f.kappa / kappa_star), vol: f.vol, rho: f.rho });
    }
    let phi = premia.phi;
    Ok(RiskNeutralParams {
        factors,
        lambda: p.lambda * (phi * p.mu_j + 0.5 * phi * phi * p.sigma_j * p.sigma_j).exp(),
        mu_j: p.mu_j + phi * p.sigma_j * p.sigma_j,
        sigma_j: p.sigma_j,
        r: 0.0,
        q: 0.0,
    })
}

fn log1p(w: Complex64) -> Complex64 {
    // ln|1 + w| = ½ log1p(2 Re w + |w|²)
    let re = 0.5 * (2.0 * w.re + w.norm_sqr()).ln_1p();
    Complex64::new(re, w.im.atan2(1.0 + w.re))
}

/// A_j + B_j v for one factor.
fn factor_exponent(z: Complex64, f: &Factor, v: f64, tau: f64) -> Complex64 {
    let i = Complex64::i();
    let q = i * z + z * z;
    let l2 = f.vol * f.vol;
    let c = f.kappa - i * z * f.rho * f.vol;
    let d = (c * c + q * l2).sqrt();
    let cpd = c + d;
    // (c − d)/Λ² and g/Λ² without cancellation
    let cmd_l2 = -q / cpd;
    let g_l2 = cmd_l2 / cpd;
    let e = (-d * tau).exp();
    let (b, log_term) = if l2 == 0.0 {
        (cmd_l2 * (1.0 - e), g_l2 * (1.0 - e))
    } else {
        let g = g_l2 * l2;
        let b = cmd_l2 * (1.0 - e) / (1.0 - g * e);
        (b, (log1p(-g * e) - log1p(-g)) / l2)
    };
    let a = f.kappa * f.omega * (cmd_l2 * tau - 2.0 * log_term);
    a + b * v
}

/// Conditional CF of the log price at horizon `tau` (trading days).
pub fn char_fn(z: Complex64, x: f64, v: &[f64], q: &RiskNeutralParams, tau: f64) -> Result<Complex64> {
    let i = Complex64::i();
    let mut expo = i * z * (x + (q.r - q.q) * tau);
    for (f, &vj) in q.factors.iter().zip(v) {
        expo += factor_exponent(z, f, vj, tau);
    }
    if q.lambda > 0.0 {
        let theta = (i * z * q.mu_j - 0.5 * z * z * q.sigma_j * q.sigma_j).exp();
        expo += q.lambda * tau * (theta - 1.0 - i * q.jump_compensator() * z);
    }
    let out = expo.exp();
    if out.re.is_finite() && out.im.is_finite() {
        Ok(out)
    } else {
        Err(Error::CfOverflow { re: z.re, im: z.im })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

impl std::str::FromStr for OptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "c" | "call" => Ok(OptionKind::Call),
            "p" | "put" => Ok(OptionKind::Put),
            other => Err(Error::InvalidInput(format!("unknown option type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionQuote {
    pub date: Option<NaiveDate>,
    pub kind: OptionKind,
    pub strike: f64,
    pub futures: f64,
    /// Calendar days to expiry.
    pub tau_days: f64,
    pub price: f64,
    /// Market implied volatility; filled from the price when absent.
    #[serde(default)]
    pub iv: Option<f64>,
}

impl OptionQuote {
    pub fn moneyness(&self) -> f64 {
        self.strike / self.futures
    }

    pub fn model_tau(&self) -> f64 {
        self.tau_days * TRADING_DAYS / CALENDAR_DAYS
    }

    pub fn year_fraction(&self) -> f64 {
        self.tau_days / CALENDAR_DAYS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PricerConfig {
    /// Number of cosine terms, a power of two.
    pub n_terms: usize,
    /// Half-width of the truncation range in standard deviations.
    pub truncation: f64,
    /// Largest admissible probability mass outside the range.
    pub tail_tol: f64,
    /// Price tolerance of the implied-volatility solver, relative to F.
    pub iv_tol: f64,
    pub iv_bracket: (f64, f64),
    /// Annual rates.
    pub r: f64,
    pub q: f64,
}

impl Default for PricerConfig {
    fn default() -> Self {
        PricerConfig { n_terms: 4096, truncation: 12.0, tail_tol: 1e-10, iv_tol: 1e-10, iv_bracket: (1e-6, 10.0), r: 0.0, q: 0.0 }
    }
}

impl PricerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.n_terms.is_power_of_two() || self.n_terms < 16 {
            return Err(Error::InvalidInput("n_terms must be a power of two ≥ 16".into()));
        }
        if !(self.iv_tol > 0.0) || !(self.truncation > 0.0) || !(self.iv_bracket.0 > 0.0 && self.iv_bracket.1 > self.iv_bracket.0)
        {
            return Err(Error::InvalidInput("invalid pricer tolerances".into()));
        }
        Ok(())
    }
}

/// Cosine-series pricer for one (state, maturity); strikes are cheap.
pub struct CosPricer {
    /// Range of the log return.
    lo: f64,
    hi: f64,
    coef: Vec<Complex64>,
    discount: f64,
    growth: f64,
}

impl CosPricer {
    pub fn new(q: &RiskNeutralParams, v: &[f64], tau: f64, cfg: &PricerConfig) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidInput(format!("maturity must be positive, got {tau}")));
        }
        // cumulant generating function of the log return
        let k = |s: f64| -> Option<f64> {
            let z = char_fn(Complex64::new(0.0, -s), 0.0, v, q, tau).ok()?;
            let out = z.re.ln();
            (out.is_finite() && z.re > 0.0).then_some(out)
        };
        let mut c2a: f64 = q
            .factors
            .iter()
            .zip(v)
            .map(|(f, &vj)| f.omega * tau + (vj - f.omega) * (1.0 - (-f.kappa * tau).exp()) / f.kappa)
            .sum::<f64>()
            + q.lambda * tau * (q.mu_j * q.mu_j + q.sigma_j * q.sigma_j);
        c2a = c2a.max(1e-16);
        let h = 0.1 / c2a.sqrt();
        let (c1, c2) = match (k(h), k(-h)) {
            (Some(kp), Some(km)) => ((kp - km) / (2.0 * h), ((kp + km) / (h * h)).max(c2a * 1e-6)),
            _ => ((q.r - q.q) * tau - 0.5 * c2a, c2a),
        };
        let sd = c2.max(1e-16).sqrt();
        // widen the range until Chernoff bounds on the outside mass are small
        let mut range = None;
        let mut last_bound = f64::INFINITY;
        for widen in [1.0, 1.5, 2.0, 3.0, 4.0] {
            let half = cfg.truncation * widen * sd;
            let (lo, hi) = (c1 - half, c1 + half);
            let s_star = cfg.truncation * widen / sd;
            let mut upper = f64::INFINITY;
            let mut lower = f64::INFINITY;
            for m in 0..16 {
                let s = s_star / 2f64.powi(m);
                if let Some(kp) = k(s) {
                    upper = upper.min((kp - s * hi).exp());
                }
                if let Some(km) = k(-s) {
                    lower = lower.min((km + s * lo).exp());
                }
            }
            last_bound = upper + lower;
            if last_bound <= cfg.tail_tol {
                range = Some((lo, hi));
                break;
            }
        }
        let Some((lo, hi)) = range else {
            return Err(Error::NotConverged(format!(
                "tail mass bound {last_bound:e} outside ±{} sd exceeds {:e}; widen the truncation range",
                4.0 * cfg.truncation,
                cfg.tail_tol
            )));
        };
        let w = hi - lo;
        // the series is cut once the CF has decayed below rounding level
        let mut coef = Vec::with_capacity(cfg.n_terms);
        let mut quiet = 0;
        for j in 0..cfg.n_terms {
            let u = j as f64 * std::f64::consts::PI / w;
            let c = char_fn(Complex64::new(u, 0.0), 0.0, v, q, tau)?;
            quiet = if c.norm() < 1e-17 { quiet + 1 } else { 0 };
            coef.push(c * Complex64::from_polar(1.0, -u * lo));
            if quiet == 16 {
                break;
            }
        }
        let tail = coef.last().map(|c| c.norm()).unwrap_or(0.0);
        if coef.len() == cfg.n_terms && tail > 1e-6 {
            return Err(Error::NotConverged(format!("cosine coefficients still {tail:e} at N = {}", cfg.n_terms)));
        }
        Ok(CosPricer { lo, hi, coef, discount: (-q.r * tau).exp(), growth: ((q.r - q.q) * tau).exp() })
    }

    /// Undiscounted E[(K − F e^{R})⁺] via cosine coefficients of the put payoff.
    fn put_expectation(&self, f: f64, k: f64) -> f64 {
        // payoff in the return variable y: K (1 − e^{x + y})⁺ with x = ln(F/K)
        let x = (f / k).ln();
        let (a, b) = (self.lo, self.hi);
        let w = b - a;
        let top = (-x).clamp(a, b);
        if top <= a {
            return 0.0;
        }
        let mut sum = 0.0;
        for (j, c) in self.coef.iter().enumerate() {
            let u = j as f64 * std::f64::consts::PI / w;
            // ∫_a^top cos(u(y − a)) dy and ∫_a^top e^{x+y} cos(u(y − a)) dy
            let psi = if j == 0 { top - a } else { (u * (top - a)).sin() / u };
            let (st, ct) = (u * (top - a)).sin_cos();
            let chi = ((x + top).exp() * (ct + u * st) - (x + a).exp()) / (1.0 + u * u);
            let vk = 2.0 / w * (psi - chi);
            let term = c.re * vk;
            sum += if j == 0 { 0.5 * term } else { term };
        }
        k * sum
    }

    pub fn price(&self, kind: OptionKind, f: f64, k: f64) -> f64 {
        let put = self.discount * self.put_expectation(f, k).max(0.0);
        match kind {
            OptionKind::Put => put,
            OptionKind::Call => (put + self.discount * (f * self.growth - k)).max(0.0),
        }
    }
}

pub fn fourier_price(quote: &OptionQuote, q: &RiskNeutralParams, v: &[f64], cfg: &PricerConfig) -> Result<f64> {
    let pricer = CosPricer::new(q, v, quote.model_tau(), cfg)?;
    Ok(pricer.price(quote.kind, quote.futures, quote.strike))
}

/// Black-76 price; `tau` in years, `r` annual.
pub fn black76_price(kind: OptionKind, f: f64, k: f64, tau: f64, r: f64, sigma: f64) -> f64 {
    let df = (-r * tau).exp();
    let sd = sigma * tau.sqrt();
    if sd <= 0.0 {
        return df
            * match kind {
                OptionKind::Call => (f - k).max(0.0),
                OptionKind::Put => (k - f).max(0.0),
            };
    }
    let d1 = ((f / k).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    df * match kind {
        OptionKind::Call => f * norm_cdf(d1) - k * norm_cdf(d2),
        OptionKind::Put => k * norm_cdf(-d2) - f * norm_cdf(-d1),
    }
}

pub fn black76_vega(f: f64, k: f64, tau: f64, r: f64, sigma: f64) -> f64 {
    let sd = sigma * tau.sqrt();
    let d1 = ((f / k).ln() + 0.5 * sd * sd) / sd;
    (-r * tau).exp() * f * norm_pdf(d1) * tau.sqrt()
}

pub fn black76_bounds(kind: OptionKind, f: f64, k: f64, tau: f64, r: f64) -> (f64, f64) {
    let df = (-r * tau).exp();
    match kind {
        OptionKind::Call => (df * (f - k).max(0.0), df * f),
        OptionKind::Put => (df * (k - f).max(0.0), df * k),
    }
}

/// Black-76 implied volatility by safeguarded Newton with bisection fallback.
pub fn implied_vol(price: f64, kind: OptionKind, f: f64, k: f64, tau: f64, r: f64, cfg: &PricerConfig) -> Result<f64> {
    if !(f > 0.0 && k > 0.0 && tau > 0.0) {
        return Err(Error::InvalidInput(format!("implied vol needs F, K, tau > 0 (F={f}, K={k}, tau={tau})")));
    }
    let (lb, ub) = black76_bounds(kind, f, k, tau, r);
    if !(price > lb) {
        return Err(Error::BoundViolation { bound: "lower", price, value: lb });
    }
    if !(price < ub) {
        return Err(Error::BoundViolation { bound: "upper", price, value: ub });
    }
    let (mut lo, mut hi) = cfg.iv_bracket;
    let gap = |s: f64| black76_price(kind, f, k, tau, r, s) - price;
    if gap(lo) > 0.0 || gap(hi) < 0.0 {
        return Err(Error::NotConverged(format!("implied vol outside bracket [{lo}, {hi}]")));
    }
    let tol = cfg.iv_tol * f;
    let mut s = {
        // Brenner–Subrahmanyam start, clamped into the bracket
        let guess = (2.0 * std::f64::consts::PI / tau).sqrt() * price / f;
        guess.clamp(lo * 1.01, hi * 0.99)
    };
    for _ in 0..200 {
        let g = gap(s);
        if g > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        if g.abs() < tol {
            // one more Newton step for full precision
            let v = black76_vega(f, k, tau, r, s);
            if v > 0.0 {
                let next = s - g / v;
                if next > lo && next < hi {
                    return Ok(next);
                }
            }
            return Ok(s);
        }
        let v = black76_vega(f, k, tau, r, s);
        let next = s - g / v;
        s = if v > 0.0 && next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-15 * hi {
            return Ok(s);
        }
    }
    Err(Error::NotConverged("implied vol iteration limit".into()))
}

pub fn market_iv(quote: &OptionQuote, cfg: &PricerConfig) -> Result<f64> {
    match quote.iv {
        Some(v) => Ok(v),
        None => implied_vol(quote.price, quote.kind, quote.futures, quote.strike, quote.year_fraction(), cfg.r, cfg),
    }
}

/// Split a day's continuous variance across factors in proportion to
/// their long-run levels.
pub fn split_state(c_hat: f64, factors: &[Factor]) -> Vec<f64> {
    let total: f64 = factors.iter().map(|f| f.omega).sum();
    factors
        .iter()
        .map(|f| if total > 0.0 { c_hat * f.omega / total } else { c_hat / factors.len() as f64 })
        .collect()
}

type GroupKey = (u64, Vec<u64>);

fn group_quotes(quotes: &[OptionQuote], states: &[Vec<f64>]) -> BTreeMap<GroupKey, Vec<usize>> {
    let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, q) in quotes.iter().enumerate() {
        let key = (q.model_tau().to_bits(), states[i].iter().map(|v| v.to_bits()).collect());
        groups.entry(key).or_default().push(i);
    }
    groups
}

/// Model prices for every quote; quotes sharing maturity and state share a pricer.
pub fn model_prices(
    quotes: &[OptionQuote],
    q: &RiskNeutralParams,
    states: &[Vec<f64>],
    cfg: &PricerConfig,
) -> Result<Vec<f64>> {
    if states.len() != quotes.len() {
        return Err(Error::InvalidInput("one variance state per quote required".into()));
    }
    let groups: Vec<(GroupKey, Vec<usize>)> = group_quotes(quotes, states).into_iter().collect();
    let priced: Vec<Vec<(usize, f64)>> = groups
        .par_iter()
        .map(|(_, idx)| {
            let first = &quotes[idx[0]];
            let pricer = CosPricer::new(q, &states[idx[0]], first.model_tau(), cfg)?;
            Ok(idx.iter().map(|&i| (i, pricer.price(quotes[i].kind, quotes[i].futures, quotes[i].strike))).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; quotes.len()];
    for (i, p) in priced.into_iter().flatten() {
        out[i] = p;
    }
    Ok(out)
}

/// Model implied vols. A price on the lower bound maps to zero volatility.
pub fn model_ivs(
    quotes: &[OptionQuote],
    q: &RiskNeutralParams,
    states: &[Vec<f64>],
    cfg: &PricerConfig,
) -> Result<Vec<f64>> {
    let prices = model_prices(quotes, q, states, cfg)?;
    quotes
        .iter()
        .zip(prices)
        .map(|(quote, p)| {
            match implied_vol(p, quote.kind, quote.futures, quote.strike, quote.year_fraction(), cfg.r, cfg) {
                Err(Error::BoundViolation { bound: "lower", .. }) => Ok(0.0),
                other => other,
            }
        })
        .collect()
}

/// L2 norm of model-minus-market implied vols, decimal volatility units.
pub fn f_obj(model_iv: &[f64], market_iv: &[f64]) -> f64 {
    model_iv.iter().zip(market_iv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Lattice half-widths for the multistart, in natural units of φ and of
    /// the relative change of κ*_j.
    pub phi_starts: (f64, f64),
    pub kappa_ratio_starts: (f64, f64),
    /// Holds φ fixed; used when it is not identified (no jumps, no leverage).
    pub fix_phi: Option<f64>,
    pub simplex: NelderMead,
    pub polish: bool,
    pub scale: PremiaScale,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            phi_starts: (-1.0, 1.0),
            kappa_ratio_starts: (0.6, 1.4),
            fix_phi: None,
            simplex: NelderMead { max_evals: 300, xtol: 1e-10, ftol_abs: 1e-26, ftol_rel: 1e-12, step: 0.3, restarts: 1 },
            polish: true,
            scale: PremiaScale::Natural,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub premia: RiskPremia,
    pub scale: PremiaScale,
    /// (φ, ψ₁, ψ₂) in `scale`.
    pub scaled: (f64, f64, f64),
    pub f_obj: f64,
    pub f_obj_units: String,
    pub kappa_star: Vec<f64>,
    pub evals: usize,
    pub converged: bool,
    pub starts: Vec<(Vec<f64>, f64)>,
}

/// Premia implied by (φ, κ*₁, κ*₂).
pub fn premia_from_kappa_star(p: &StructuralParams, phi: f64, kappa_star: &[f64]) -> RiskPremia {
    let f = p.factors();
    let psi = |j: usize| -> f64 {
        match (f.get(j), kappa_star.get(j)) {
            (Some(f), Some(ks)) if f.vol > 0.0 => (f.kappa - ks - phi * f.rho * f.vol) / (f.vol * f.vol),
            _ => 0.0,
        }
    };
    RiskPremia { phi, psi1: psi(0), psi2: psi(1) }
}

/// Minimizes f_obj over the premia. The search runs over (φ, κ*₁, κ*₂), a
/// one-to-one reparametrization in which admissibility is a box constraint.
pub fn calibrate_premia(
    quotes: &[OptionQuote],
    params: &StructuralParams,
    states: &[Vec<f64>],
    pricer: &PricerConfig,
    cfg: &CalibrationConfig,
) -> Result<Calibration> {
    if quotes.len() < 3 {
        return Err(Error::InvalidInput(format!("calibration needs at least 3 quotes, got {}", quotes.len())));
    }
    pricer.validate()?;
    let market: Vec<f64> = quotes.iter().map(|q| market_iv(q, pricer)).collect::<Result<_>>()?;
    let factors = params.factors();
    let nf = factors.len();
    // unpack a search vector into premia
    let unpack = |x: &[f64]| -> RiskPremia {
        let (phi, ks) = match cfg.fix_phi {
            Some(phi) => (phi, &x[..]),
            None => (x[0], &x[1..]),
        };
        premia_from_kappa_star(params, phi, ks)
    };
    let residuals = |x: &[f64]| -> Option<Vec<f64>> {
        let q = risk_neutralize(params, &unpack(x)).ok()?.with_rates(pricer.r, pricer.q);
        let iv = model_ivs(quotes, &q, states, pricer).ok()?;
        Some(iv.iter().zip(&market).map(|(a, b)| a - b).collect())
    };
    let objective = |x: &[f64]| -> f64 {
        residuals(x).map(|r| r.iter().map(|v| v * v).sum()).unwrap_or(f64::INFINITY)
    };
    let mut bounds = Vec::new();
    let mut scale = Vec::new();
    if cfg.fix_phi.is_none() {
        bounds.push(Bound::free());
        scale.push(1.0);
    }
    for f in &factors {
        bounds.push(Bound::new(1e-6 * f.kappa, 25.0 * f.kappa + 1.0));
        scale.push(f.kappa);
    }
    let phis: Vec<f64> = if cfg.fix_phi.is_some() { vec![f64::NAN] } else { vec![cfg.phi_starts.0, cfg.phi_starts.1] };
    let mut lattice: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in 0..(nf + 1) {
        if axis == 0 && cfg.fix_phi.is_some() {
            continue;
        }
        let values: Vec<f64> = if axis == 0 {
            phis.clone()
        } else {
            let k = factors[axis - 1].kappa;
            vec![k * cfg.kappa_ratio_starts.0, k * cfg.kappa_ratio_starts.1]
        };
        lattice = lattice.iter().flat_map(|p| values.iter().map(move |v| [p.clone(), vec![*v]].concat())).collect();
    }
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    let mut evals = 0;
    let mut starts = Vec::new();
    for x0 in &lattice {
        let m = cfg.simplex.minimize(objective, x0, &bounds);
        evals += m.evals;
        starts.push((m.x.clone(), m.f));
        if m.f.is_finite() && best.as_ref().is_none_or(|b| m.f < b.1) {
            best = Some((m.x, m.f, m.converged));
        }
    }
    let (mut x, mut f, converged) = best.ok_or_else(|| Error::NotConverged("every calibration start was inadmissible".into()))?;
    if cfg.polish {
        let (xp, fp) = LevenbergMarquardt::default().minimize(residuals, &x, &bounds, &scale);
        if fp < f {
            x = xp;
            f = fp;
        }
    }
    let premia = unpack(&x);
    let kappa_star = risk_neutralize(params, &premia)?.factors.iter().map(|f| f.kappa).collect();
    Ok(Calibration {
        premia,
        scale: cfg.scale,
        scaled: premia.to_scaled(cfg.scale),
        f_obj: f.sqrt(),
        f_obj_units: "decimal implied volatility, L2 norm over quotes".into(),
        kappa_star,
        evals,
        converged,
        starts,
    })
}

pub const MONEYNESS_BUCKETS: [&str; 3] = ["m<0.85", "0.85<=m<=1.1", "m>1.1"];
pub const MATURITY_BUCKETS: [&str; 4] = ["tau<=50", "50<tau<=90", "90<tau<=160", "tau>160"];

pub fn moneyness_bucket(m: f64) -> usize {
    if m < 0.85 {
        0
    } else if m <= 1.1 {
        1
    } else {
        2
    }
}

pub fn maturity_bucket(tau_days: f64) -> usize {
    if tau_days <= 50.0 {
        0
    } else if tau_days <= 90.0 {
        1
    } else if tau_days <= 160.0 {
        2
    } else {
        3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseTable {
    /// RMSE × 100; `None` for an empty bucket.
    pub by_moneyness: Vec<Option<f64>>,
    pub by_maturity: Vec<Option<f64>>,
    /// maturity rows × moneyness columns
    pub cells: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
    pub overall: Option<f64>,
}

/// Bucketed implied-volatility RMSE in percentage points.
pub fn rmse_iv(quotes: &[OptionQuote], model_iv: &[f64], market_iv: &[f64]) -> RmseTable {
    let mut cell_ss = vec![vec![0.0; 3]; 4];
    let mut counts = vec![vec![0usize; 3]; 4];
    for ((q, a), b) in quotes.iter().zip(model_iv).zip(market_iv) {
        let (t, m) = (maturity_bucket(q.tau_days), moneyness_bucket(q.moneyness()));
        cell_ss[t][m] += (a - b) * (a - b);
        counts[t][m] += 1;
    }
    let rmse = |ss: f64, n: usize| (n > 0).then(|| 100.0 * (ss / n as f64).sqrt());
    let by_moneyness = (0..3)
        .map(|m| rmse((0..4).map(|t| cell_ss[t][m]).sum(), (0..4).map(|t| counts[t][m]).sum()))
        .collect();
    let by_maturity = (0..4).map(|t| rmse(cell_ss[t].iter().sum(), counts[t].iter().sum())).collect();
    let cells = (0..4).map(|t| (0..3).map(|m| rmse(cell_ss[t][m], counts[t][m])).collect()).collect();
    let overall = rmse(cell_ss.iter().flatten().sum(), counts.iter().flatten().sum());
    RmseTable { by_moneyness, by_maturity, cells, counts, overall }
}

#[derive(Debug, Deserialize, Serialize)]
struct QuoteRow {
    date: Option<NaiveDate>,
    #[serde(rename = "type")]
    kind: String,
    #[serde(rename = "K")]
    strike: f64,
    #[serde(rename = "F")]
    futures: f64,
    tau_days: f64,
    price: f64,
}

/// Reads `date,type,K,F,tau_days,price`.
pub fn read_quotes(path: &Path) -> Result<Vec<OptionQuote>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Csv(e),
    })?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<QuoteRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::Row { path: path.into(), line, message: e.to_string() })?;
        let kind = row.kind.parse().map_err(|e: Error| Error::Row { path: path.into(), line, message: e.to_string() })?;
        if !(row.strike > 0.0 && row.futures > 0.0 && row.tau_days > 0.0 && row.price.is_finite()) {
            return Err(Error::Row { path: path.into(), line, message: "K, F, tau_days must be positive".into() });
        }
        out.push(OptionQuote {
            date: row.date,
            kind,
            strike: row.strike,
            futures: row.futures,
            tau_days: row.tau_days,
            price: row.price,
            iv: None,
        });
    }
    Ok(out)
}

pub fn write_quotes(path: &Path, quotes: &[OptionQuote]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for q in quotes {
        w.serialize(QuoteRow {
            date: q.date,
            kind: match q.kind {
                OptionKind::Call => "C".into(),
                OptionKind::Put => "P".into(),
            },
            strike: q.strike,
            futures: q.futures,
            tau_days: q.tau_days,
            price: q.price,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn svj() -> StructuralParams {
        StructuralParams::two_svj()
    }

    fn svj_premia() -> RiskPremia {
        RiskPremia { phi: -7.35e-3, psi1: 2.81e-3, psi2: 1.50e-2 }
    }

    /// Single-factor Heston CF in the Gatheral parametrization.
    fn heston_cf(u: Complex64, x: f64, v0: f64, kappa: f64, theta: f64, eta: f64, rho: f64, tau: f64) -> Complex64 {
        let i = Complex64::i();
        let alpha = -0.5 * u * u - 0.5 * i * u;
        let beta = kappa - rho * eta * i * u;
        let gamma = 0.5 * eta * eta;
        let d = (beta * beta - 4.0 * alpha * gamma).sqrt();
        let rm = (beta - d) / (eta * eta);
        let rp = (beta + d) / (eta * eta);
        let g = rm / rp;
        let e = (-d * tau).exp();
        let dd = rm * (1.0 - e) / (1.0 - g * e);
        let cc = kappa * (rm * tau - 2.0 / (eta * eta) * ((1.0 - g * e) / (1.0 - g)).ln());
        (cc * theta + dd * v0 + i * u * x).exp()
    }

    #[test]
    fn zero_premia_leave_parameters_unchanged() {
        let p = svj();
        let q = risk_neutralize(&p, &RiskPremia::zero()).unwrap();
        assert_eq!(q.factors, p.factors());
        assert_eq!(q.lambda, p.lambda);
        assert_eq!(q.mu_j, p.mu_j);
    }

    #[test]
    fn hand_evaluated_risk_neutral_values() {
        let q = risk_neutralize(&svj(), &svj_premia()).unwrap();
        let k1 = 0.0393 - (-7.35e-3) * (-0.82) * 8.28e-3 - 2.81e-3 * 8.28e-3f64.powi(2);
        let lam = 0.72 * ((-7.35e-3) * (-7.9e-3) + 0.5 * (7.35e-3f64 * 8.5e-3).powi(2)).exp();
        assert!((q.factors[0].kappa / k1 - 1.0).abs() < 1e-12);
        assert!((k1 / 3.9250e-2 - 1.0).abs() < 1e-4);
        assert!((q.lambda / lam - 1.0).abs() < 1e-12);
        assert!((lam / 0.72004 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn inadmissible_premia_are_rejected() {
        let r = risk_neutralize(&svj(), &RiskPremia { phi: 0.0, psi1: 1e4, psi2: 0.0 });
        assert!(matches!(r, Err(Error::InadmissiblePremia { factor: 1, .. })));
    }

    #[test]
    fn premia_scales_convert() {
        let p = RiskPremia::from_scaled(-7.35e-3, 2.81e-3, 1.5e-2, PremiaScale::DailyPercent);
        assert!((p.phi + 0.735).abs() < 1e-15 && (p.psi1 - 28.1).abs() < 1e-12);
        let (a, b, c) = p.to_scaled(PremiaScale::DailyPercent);
        assert!((a + 7.35e-3).abs() < 1e-18 && (b - 2.81e-3).abs() < 1e-18 && (c - 1.5e-2).abs() < 1e-17);
    }

    #[test]
    fn cf_normalization_and_martingale() {
        let q = risk_neutralize(&svj(), &svj_premia()).unwrap().with_rates(0.03, 0.01);
        let v = [3e-4, 5e-4];
        for tau in [1.0, 30.0, 250.0] {
            let one = char_fn(Complex64::new(0.0, 0.0), 0.3, &v, &q, tau).unwrap();
            assert!((one - 1.0).norm() < 1e-14);
            let m = char_fn(Complex64::new(0.0, -1.0), 0.3, &v, &q, tau).unwrap();
            let target = (0.3 + (q.r - q.q) * tau).exp();
            assert!((m - target).norm() < 1e-12, "{m} vs {target}");
        }
    }

    #[test]
    fn single_factor_matches_heston() {
        let p = StructuralParams { two_factor: false, lambda: 0.0, ..svj() };
        let q = risk_neutralize(&p, &RiskPremia::zero()).unwrap();
        let f = q.factors[0];
        for tau in [0.5, 20.0, 300.0] {
            for k in -20..=20 {
                for im in [0.0, -0.5, 0.7] {
                    let z = Complex64::new(k as f64 * 7.5, im);
                    let a = char_fn(z, 0.1, &[4e-4], &q, tau).unwrap();
                    let b = heston_cf(z, 0.1, 4e-4, f.kappa, f.omega, f.vol, f.rho, tau);
                    assert!((a - b).norm() < 1e-12, "z={z}, tau={tau}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn cf_agrees_with_riccati_integration() {
        // RK4 on dB/dτ = ½Λ²B² − (κ − izρΛ)B − ½z(i+z), dA/dτ = κωB
        let f = Factor { kappa: 2.03, omega: 4.31e-4, vol: 3.2e-2, rho: -0.11 };
        let z = Complex64::new(35.0, 0.0);
        let i = Complex64::i();
        let rhs = |b: Complex64| 0.5 * f.vol * f.vol * b * b - (f.kappa - i * z * f.rho * f.vol) * b - 0.5 * z * (i + z);
        let (tau, n) = (10.0, 100_000);
        let h = tau / n as f64;
        let (mut a, mut b) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        for _ in 0..n {
            let k1 = rhs(b);
            let k2 = rhs(b + 0.5 * h * k1);
            let k3 = rhs(b + 0.5 * h * k2);
            let k4 = rhs(b + h * k3);
            a += f.kappa * f.omega * h * (b + 2.0 * (b + 0.5 * h * k1) + 2.0 * (b + 0.5 * h * k2) + (b + h * k3)) / 6.0;
            b += h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
        }
        let closed = factor_exponent(z, &f, 5e-4, tau);
        let ode = a + b * 5e-4;
        assert!((closed - ode).norm() < 1e-8 * (1.0 + ode.norm()), "{closed} vs {ode}");
    }

    #[test]
    fn zero_vol_of_vol_limit_is_continuous() {
        let f0 = Factor { kappa: 0.5, omega: 4e-4, vol: 0.0, rho: 0.0 };
        let f1 = Factor { vol: 1e-7, ..f0 };
        for k in 1..10 {
            let z = Complex64::new(k as f64 * 10.0, 0.0);
            let a = factor_exponent(z, &f0, 3e-4, 40.0);
            let b = factor_exponent(z, &f1, 3e-4, 40.0);
            assert!((a - b).norm() < 1e-9 * (1.0 + a.norm()), "{a} vs {b}");
        }
    }

    #[test]
    fn black76_reference_value() {
        let c = black76_price(OptionKind::Call, 100.0, 100.0, 1.0, 0.0, 0.2);
        let expected = 100.0 * (norm_cdf(0.1) - norm_cdf(-0.1));
        assert!((c - expected).abs() < 1e-12);
        assert!((c - 7.9656).abs() < 1e-4);
        let p = black76_price(OptionKind::Put, 100.0, 100.0, 1.0, 0.0, 0.2);
        assert!((c - p).abs() < 1e-12);
        assert!((black76_price(OptionKind::Call, 110.0, 100.0, 1.0, 0.0, 1e-12) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn implied_vol_round_trip_and_bounds() {
        let cfg = PricerConfig::default();
        let p = black76_price(OptionKind::Call, 28.0, 30.0, 0.25, 0.0, 0.6);
        let s = implied_vol(p, OptionKind::Call, 28.0, 30.0, 0.25, 0.0, &cfg).unwrap();
        assert!((s - 0.6).abs() < 1e-9);
        let r = implied_vol(2.0, OptionKind::Call, 32.0, 30.0, 0.25, 0.0, &cfg);
        assert!(matches!(r, Err(Error::BoundViolation { bound: "lower", .. })));
        let r = implied_vol(33.0, OptionKind::Call, 32.0, 30.0, 0.25, 0.0, &cfg);
        assert!(matches!(r, Err(Error::BoundViolation { bound: "upper", .. })));
    }

    fn constant_variance(sigma2_daily: f64) -> RiskNeutralParams {
        RiskNeutralParams {
            factors: vec![Factor { kappa: 1.0, omega: sigma2_daily, vol: 0.0, rho: 0.0 }],
            lambda: 0.0,
            mu_j: 0.0,
            sigma_j: 0.0,
            r: 0.0,
            q: 0.0,
        }
    }

    #[test]
    fn constant_variance_matches_black76() {
        let cfg = PricerConfig::default();
        let s2 = 9e-4;
        let q = constant_variance(s2).with_rates(0.02, 0.02);
        let sigma_annual = (s2 * TRADING_DAYS).sqrt();
        for tau_days in [10.0, 90.0, 365.0] {
            for k in [20.0, 27.0, 30.0, 35.0, 45.0] {
                for kind in [OptionKind::Call, OptionKind::Put] {
                    let quote = OptionQuote { date: None, kind, strike: k, futures: 30.0, tau_days, price: 0.0, iv: None };
                    let a = fourier_price(&quote, &q, &[s2], &cfg).unwrap();
                    let b = black76_price(kind, 30.0, k, quote.year_fraction(), 0.02, sigma_annual);
                    assert!((a - b).abs() < 1e-6, "{kind:?} K={k} tau={tau_days}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn zero_volatility_limit_is_intrinsic() {
        let cfg = PricerConfig::default();
        let q = constant_variance(1e-14).with_rates(0.01, 0.01);
        let quote = OptionQuote { date: None, kind: OptionKind::Call, strike: 25.0, futures: 28.0, tau_days: 60.0, price: 0.0, iv: None };
        let c = fourier_price(&quote, &q, &[1e-14], &cfg).unwrap();
        let df = (-0.01 * quote.year_fraction()).exp();
        assert!((c - df * 3.0).abs() < 1e-8, "{c}");
    }

    #[test]
    fn put_call_parity_and_refinement() {
        let q = risk_neutralize(&svj(), &svj_premia()).unwrap();
        let v = split_state(8.6e-4, &q.factors);
        let cfg = PricerConfig::default();
        let fine = PricerConfig { n_terms: 8192, ..PricerConfig::default() };
        for tau in [15.0, 120.0, 400.0] {
            let a = CosPricer::new(&q, &v, tau, &cfg).unwrap();
            let b = CosPricer::new(&q, &v, tau, &fine).unwrap();
            for k in [18.0, 25.0, 28.0, 32.0, 40.0] {
                let c = a.price(OptionKind::Call, 28.0, k);
                let p = a.price(OptionKind::Put, 28.0, k);
                assert!((c - p - (28.0 - k)).abs() < 1e-8);
                assert!((c - b.price(OptionKind::Call, 28.0, k)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn narrow_truncation_is_reported() {
        let q = risk_neutralize(&svj(), &RiskPremia::zero()).unwrap();
        let cfg = PricerConfig { truncation: 1.0, tail_tol: 1e-12, ..PricerConfig::default() };
        assert!(matches!(CosPricer::new(&q, &[4e-4, 4e-4], 30.0, &cfg), Err(Error::NotConverged(_))));
    }

    #[test]
    fn f_obj_zero_at_truth() {
        let p = svj();
        let premia = svj_premia();
        let q = risk_neutralize(&p, &premia).unwrap();
        let cfg = PricerConfig::default();
        let quotes: Vec<OptionQuote> = [0.8, 1.0, 1.2]
            .iter()
            .map(|m| OptionQuote { date: None, kind: OptionKind::Call, strike: 28.0 * m, futures: 28.0, tau_days: 60.0, price: 0.0, iv: None })
            .collect();
        let states = vec![split_state(8.6e-4, &q.factors); 3];
        let iv = model_ivs(&quotes, &q, &states, &cfg).unwrap();
        assert_eq!(f_obj(&iv, &iv), 0.0);
    }

    #[test]
    fn rmse_buckets() {
        let mk = |k: f64, tau: f64| OptionQuote { date: None, kind: OptionKind::Call, strike: k, futures: 100.0, tau_days: tau, price: 0.0, iv: None };
        let quotes = vec![mk(100.0, 30.0)];
        let t = rmse_iv(&quotes, &[0.55], &[0.5]);
        assert!((t.cells[0][1].unwrap() - 5.0).abs() < 1e-12);
        assert!(t.cells[3][2].is_none());
        assert!(t.by_moneyness[0].is_none());
        let same = rmse_iv(&quotes, &[0.5], &[0.5]);
        assert_eq!(same.overall, Some(0.0));
        assert_eq!(moneyness_bucket(0.85), 1);
        assert_eq!(moneyness_bucket(1.1), 1);
        assert_eq!(maturity_bucket(50.0), 0);
        assert_eq!(maturity_bucket(160.0), 2);
    }

    #[test]
    fn quotes_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.csv");
        let q = vec![OptionQuote {
            date: NaiveDate::from_ymd_opt(2020, 3, 2),
            kind: OptionKind::Put,
            strike: 24.5,
            futures: 25.25,
            tau_days: 45.0,
            price: 1.125,
            iv: None,
        }];
        write_quotes(&path, &q).unwrap();
        assert_eq!(read_quotes(&path).unwrap(), q);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn drift_level_is_preserved(phi in -2.0f64..2.0, psi1 in -50.0f64..50.0, psi2 in -50.0f64..50.0) {
            let p = svj();
            if let Ok(q) = risk_neutralize(&p, &RiskPremia { phi, psi1, psi2 }) {
                for (a, b) in q.factors.iter().zip(p.factors()) {
                    prop_assert!((a.kappa * a.omega - b.kappa * b.omega).abs() <= 1e-15 * b.kappa * b.omega);
                }
            }
        }

        #[test]
        fn call_prices_fall_with_strike(v1 in 1e-5f64..2e-3, v2 in 1e-5f64..2e-3, tau in 5.0f64..300.0) {
            let q = risk_neutralize(&svj(), &RiskPremia::zero()).unwrap();
            let pr = CosPricer::new(&q, &[v1, v2], tau, &PricerConfig { n_terms: 1024, ..PricerConfig::default() }).unwrap();
            let prices: Vec<f64> = (0..20).map(|i| pr.price(OptionKind::Call, 28.0, 15.0 + i as f64)).collect();
            prop_assert!(prices.windows(2).all(|w| w[1] <= w[0] + 1e-10));
        }

        #[test]
        fn iv_round_trip(sigma in 0.05f64..2.0, m in 0.6f64..1.6, tau in 0.02f64..2.0) {
            let cfg = PricerConfig::default();
            let p = black76_price(OptionKind::Put, 30.0, 30.0 * m, tau, 0.0, sigma);
            let (lb, ub) = black76_bounds(OptionKind::Put, 30.0, 30.0 * m, tau, 0.0);
            prop_assume!(p - lb > 1e-9 && ub - p > 1e-9);
            let s = implied_vol(p, OptionKind::Put, 30.0, 30.0 * m, tau, 0.0, &cfg).unwrap();
            let back = black76_price(OptionKind::Put, 30.0, 30.0 * m, tau, 0.0, s);
            prop_assert!((back - p).abs() < 1e-10 * 30.0);
        }
    }
}
