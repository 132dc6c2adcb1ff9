//! Realized variance, (threshold) multipower variation, the C-Tz jump test,
//! intraday jump extraction and h-day aggregation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{BarPanel, DailyReturn};
use crate::special::{abs_normal_moment, norm_cdf, norm_ppf, upper_incomplete_gamma};
use crate::stats;

/// (π²/4 + π − 5), asymptotic variance factor of the ratio statistic.
const RATIO_VAR: f64 = std::f64::consts::PI * std::f64::consts::PI / 4.0 + std::f64::consts::PI - 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub c_tau: f64,
    pub c_theta: f64,
    pub alpha: f64,
    /// Gaussian kernel bandwidth of the local variance smoother, in intervals.
    pub bandwidth: usize,
    /// Smoother passes; every pass after the first trims returns above the threshold.
    pub passes: usize,
    pub min_variance: f64,
    pub max_jump_iterations: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            c_tau: 3.0,
            c_theta: 3.0,
            alpha: 1e-3,
            bandwidth: 25,
            passes: 2,
            min_variance: 1e-16,
            max_jump_iterations: 20,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_tau > 0.0 && self.c_theta > 0.0) {
            return Err(Error::InvalidInput("c_tau and c_theta must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.bandwidth == 0 || self.passes == 0 || self.min_variance <= 0.0 {
            return Err(Error::InvalidInput("bandwidth, passes and min_variance must be positive".into()));
        }
        Ok(())
    }

    pub fn critical_value(&self) -> f64 {
        norm_ppf(1.0 - self.alpha)
    }
}

pub fn realized_variance(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

fn check_len(r: &[f64], m: usize) -> Result<()> {
    if r.len() < m {
        return Err(Error::InvalidInput(format!("grid of {} returns is shorter than {m} powers", r.len())));
    }
    Ok(())
}

// Sum over windows of prod_k f_k(j - k + 1); `terms[k][j]` holds f for power k.
fn windowed_product_sum(terms: &[Vec<f64>]) -> f64 {
    let m = terms.len();
    let n = terms[0].len();
    let mut s = 0.0;
    for j in (m - 1)..n {
        let mut p = 1.0;
        for (k, t) in terms.iter().enumerate() {
            p *= t[j - k];
        }
        s += p;
    }
    s
}

/// Multipower variation with prefactor δ^{1 − Σγ/2}, δ = 1/n.
pub fn multipower(r: &[f64], gammas: &[f64]) -> Result<f64> {
    check_len(r, gammas.len())?;
    if gammas.is_empty() || gammas.iter().any(|&g| g <= 0.0) {
        return Err(Error::InvalidInput("multipower exponents must be positive".into()));
    }
    let delta = 1.0 / r.len() as f64;
    let terms: Vec<Vec<f64>> = gammas.iter().map(|&g| r.iter().map(|x| x.abs().powf(g)).collect()).collect();
    let gsum: f64 = gammas.iter().sum();
    Ok(delta.powf(1.0 - 0.5 * gsum) * windowed_product_sum(&terms))
}

pub fn bipower(r: &[f64]) -> Result<f64> {
    let mu1 = abs_normal_moment(1.0);
    Ok(multipower(r, &[1.0, 1.0])? / (mu1 * mu1))
}

/// Per-interval local variance: Gaussian-kernel average of neighbouring squared
/// returns (own interval and immediate neighbours excluded), iterated with
/// trimming of returns above c_τ² times the previous estimate.
pub fn local_variance(r: &[f64], cfg: &ThresholdConfig) -> Vec<f64> {
    let n = r.len();
    let l = cfg.bandwidth as f64;
    let half = 3 * cfg.bandwidth;
    let w: Vec<f64> = (0..=half).map(|i| (-0.5 * (i as f64 / l).powi(2)).exp()).collect();
    let sq: Vec<f64> = r.iter().map(|x| x * x).collect();
    let mut v = vec![cfg.min_variance; n];
    let mut keep = vec![true; n];
    let c2 = cfg.c_tau * cfg.c_tau;
    for pass in 0..cfg.passes {
        if pass > 0 {
            for i in 0..n {
                keep[i] = sq[i] <= c2 * v[i];
            }
        }
        let prev = v.clone();
        let m: Vec<f64> = sq.iter().zip(&keep).map(|(x, &k)| if k { *x } else { 0.0 }).collect();
        let ind: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let mut num = vec![0.0; n];
        let mut den = vec![0.0; n];
        for d in 2..=half.min(n.saturating_sub(1)) {
            let wd = w[d];
            for j in d..n {
                num[j] += wd * m[j - d];
                den[j] += wd * ind[j - d];
                num[j - d] += wd * m[j];
                den[j - d] += wd * ind[j];
            }
        }
        for j in 0..n {
            v[j] = if den[j] > 0.0 { (num[j] / den[j]).max(cfg.min_variance) } else { prev[j] };
        }
    }
    v
}

pub fn thresholds(r: &[f64], cfg: &ThresholdConfig) -> Vec<f64> {
    let c2 = cfg.c_tau * cfg.c_tau;
    local_variance(r, cfg).into_iter().map(|v| c2 * v).collect()
}

/// Conditional expectation surrogate for a return above its threshold.
#[derive(Debug, Clone, Copy)]
pub struct ZFunction {
    c_theta: f64,
    gamma: f64,
    factor: f64,
}

impl ZFunction {
    pub fn new(gamma: f64, c_theta: f64) -> Self {
        let factor = upper_incomplete_gamma(0.5 * (gamma + 1.0), 0.5 * c_theta * c_theta)
            / (2.0 * norm_cdf(-c_theta) * std::f64::consts::PI.sqrt());
        ZFunction { c_theta, gamma, factor }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        if x * x <= y {
            x.abs().powf(self.gamma)
        } else {
            (2.0 * y / (self.c_theta * self.c_theta)).powf(0.5 * self.gamma) * self.factor
        }
    }
}

/// Threshold multipower variation; with `corrected`, returns above threshold
/// are replaced by the Z surrogate instead of being zeroed.
pub fn threshold_multipower(r: &[f64], gammas: &[f64], theta: &[f64], c_theta: f64, corrected: bool) -> Result<f64> {
    check_len(r, gammas.len())?;
    if theta.len() != r.len() {
        return Err(Error::InvalidInput("one threshold per return required".into()));
    }
    if theta.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidInput("thresholds must be positive".into()));
    }
    if gammas.is_empty() || gammas.iter().any(|&g| g <= 0.0) {
        return Err(Error::InvalidInput("multipower exponents must be positive".into()));
    }
    let delta = 1.0 / r.len() as f64;
    let terms: Vec<Vec<f64>> = gammas
        .iter()
        .map(|&g| {
            let z = ZFunction::new(g, c_theta);
            r.iter()
                .zip(theta)
                .map(|(&x, &y)| match (corrected, x * x <= y) {
                    (_, true) => x.abs().powf(g),
                    (true, false) => z.eval(x, y),
                    (false, false) => 0.0,
                })
                .collect()
        })
        .collect();
    let gsum: f64 = gammas.iter().sum();
    Ok(delta.powf(1.0 - 0.5 * gsum) * windowed_product_sum(&terms))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayTest {
    pub rv: f64,
    /// Uncorrected threshold bipower, μ₁⁻²-normalized.
    pub tbpv: f64,
    pub ctbpv: f64,
    pub cttripv: f64,
    pub ctz: f64,
}

// Precomputed Z constants for the two exponents the test uses.
struct TestKernel {
    mu1_sq: f64,
    mu43_cu: f64,
    z1: ZFunction,
    z43: ZFunction,
}

impl TestKernel {
    fn new(c_theta: f64) -> Self {
        let mu1 = abs_normal_moment(1.0);
        let mu43 = abs_normal_moment(4.0 / 3.0);
        TestKernel {
            mu1_sq: mu1 * mu1,
            mu43_cu: mu43 * mu43 * mu43,
            z1: ZFunction::new(1.0, c_theta),
            z43: ZFunction::new(4.0 / 3.0, c_theta),
        }
    }

    fn run(&self, r: &[f64], theta: &[f64]) -> DayTest {
        let n = r.len();
        let delta = 1.0 / n as f64;
        let mut rv = 0.0;
        let mut a1 = Vec::with_capacity(n);
        let mut t1 = Vec::with_capacity(n);
        let mut z43 = Vec::with_capacity(n);
        for (&x, &y) in r.iter().zip(theta) {
            rv += x * x;
            let inside = x * x <= y;
            a1.push(self.z1.eval(x, y));
            t1.push(if inside { x.abs() } else { 0.0 });
            z43.push(self.z43.eval(x, y));
        }
        let (mut s_t, mut s_c, mut s_tri) = (0.0, 0.0, 0.0);
        for j in 1..n {
            s_t += t1[j] * t1[j - 1];
            s_c += a1[j] * a1[j - 1];
            if j >= 2 {
                s_tri += z43[j] * z43[j - 1] * z43[j - 2];
            }
        }
        let tbpv = s_t / self.mu1_sq;
        // Edge correction n/(n-M+1): the window sums have n-M+1 terms.
        let ctbpv = s_c / self.mu1_sq * n as f64 / (n - 1) as f64;
        let cttripv = s_tri / (delta * self.mu43_cu) * n as f64 / (n - 2) as f64;
        let ctz = ctz_value(rv, ctbpv, cttripv, n);
        DayTest { rv, tbpv, ctbpv, cttripv, ctz }
    }
}

/// The studentized ratio statistic from its ingredients; zero when RV is zero.
pub fn ctz_value(rv: f64, ctbpv: f64, cttripv: f64, n: usize) -> f64 {
    if rv <= 0.0 {
        return 0.0;
    }
    let delta = 1.0 / n as f64;
    let ratio = if ctbpv > 0.0 { (cttripv / (ctbpv * ctbpv)).max(1.0) } else { 1.0 };
    ((rv - ctbpv) / rv) / (delta.sqrt() * (RATIO_VAR * ratio).sqrt())
}

/// C-Tz statistic and its ingredients, thresholds rebuilt from `r`.
pub fn ctz_test(r: &[f64], cfg: &ThresholdConfig) -> DayTest {
    let theta = thresholds(r, cfg);
    TestKernel::new(cfg.c_theta).run(r, &theta)
}

pub fn ctz_statistic(r: &[f64], cfg: &ThresholdConfig) -> f64 {
    ctz_test(r, cfg).ctz
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub test: DayTest,
    pub rejected: bool,
    pub c: f64,
    pub j: f64,
}

pub fn decompose_day(r: &[f64], cfg: &ThresholdConfig) -> Decomposition {
    let test = ctz_test(r, cfg);
    let rejected = test.ctz > cfg.critical_value();
    if rejected {
        Decomposition { test, rejected, c: test.tbpv, j: (test.rv - test.tbpv).max(0.0) }
    } else {
        Decomposition { test, rejected, c: test.rv, j: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpExtraction {
    pub sizes: Vec<f64>,
    /// Interval index of each jump, in detection order.
    pub positions: Vec<usize>,
    pub capped: bool,
}

impl JumpExtraction {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Repeatedly replaces the largest remaining return by the day's mean return
/// and retests until the test no longer rejects. Sizes are scaled so that
/// their squares sum to `jump_variation`.
pub fn extract_intraday_jumps(r: &[f64], jump_variation: f64, cfg: &ThresholdConfig) -> JumpExtraction {
    let crit = cfg.critical_value();
    let kernel = TestKernel::new(cfg.c_theta);
    let day_mean = stats::mean(r);
    let mut work = r.to_vec();
    let mut replaced = vec![false; r.len()];
    let mut raw = Vec::new();
    let mut positions = Vec::new();
    let mut capped = false;
    loop {
        let Some(i) = (0..work.len())
            .filter(|&i| !replaced[i])
            .max_by(|&a, &b| work[a].abs().total_cmp(&work[b].abs()))
        else {
            break;
        };
        raw.push(work[i]);
        positions.push(i);
        work[i] = day_mean;
        replaced[i] = true;
        let theta = thresholds(&work, cfg);
        if kernel.run(&work, &theta).ctz <= crit {
            break;
        }
        if raw.len() >= cfg.max_jump_iterations {
            capped = true;
            break;
        }
    }
    let ss: f64 = raw.iter().map(|c| c * c).sum();
    let scale = if ss > 0.0 { (jump_variation / ss).sqrt() } else { 0.0 };
    JumpExtraction { sizes: raw.iter().map(|c| c * scale).collect(), positions, capped }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayMeasures {
    pub date: NaiveDate,
    pub rv: f64,
    pub c: f64,
    pub j: f64,
    pub ctz: f64,
    pub n_jumps: usize,
    pub jump_sizes: Vec<f64>,
    pub r: f64,
    pub r_adj: f64,
    #[serde(default)]
    pub capped: bool,
    #[serde(default)]
    pub cleaned: bool,
}

impl DayMeasures {
    pub fn rejected(&self) -> bool {
        self.n_jumps > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanConfig {
    pub enabled: bool,
    pub window: usize,
    pub min_history: usize,
    /// Robust z-score multiple above which log Ĉ is replaced.
    pub multiple: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig { enabled: true, window: 22, min_history: 5, multiple: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    pub threshold: ThresholdConfig,
    pub clean: CleanConfig,
    /// Skip the overnight rescale (simulated trading-period-only data).
    pub no_rescale: bool,
}

/// Measures for one day; `r` is the day's close-to-close return.
pub fn measure_day(date: NaiveDate, returns: &[f64], r: f64, cfg: &ThresholdConfig) -> DayMeasures {
    let d = decompose_day(returns, cfg);
    let (sizes, capped) = if d.rejected {
        let x = extract_intraday_jumps(returns, d.j, cfg);
        (x.sizes, x.capped)
    } else {
        (Vec::new(), false)
    };
    let r_adj = r - sizes.iter().sum::<f64>();
    DayMeasures {
        date,
        rv: d.test.rv,
        c: d.c,
        j: d.j,
        ctz: d.test.ctz,
        n_jumps: sizes.len(),
        jump_sizes: sizes,
        r,
        r_adj,
        capped,
        cleaned: false,
    }
}

/// Replaces log Ĉ spikes above a trailing robust z-score with the trailing
/// median. Returns the number of replaced days.
pub fn clean_continuous(days: &mut [DayMeasures], cfg: &CleanConfig) -> usize {
    if !cfg.enabled {
        return 0;
    }
    let logc: Vec<f64> = days.iter().map(|d| d.c.ln()).collect();
    let mut count = 0;
    for t in 0..days.len() {
        let lo = t.saturating_sub(cfg.window);
        let hist: Vec<f64> = logc[lo..t].iter().copied().filter(|x| x.is_finite()).collect();
        if hist.len() < cfg.min_history {
            continue;
        }
        let med = stats::median(&hist);
        let spread = 1.4826 * stats::mad(&hist);
        if spread <= 0.0 {
            continue;
        }
        if (logc[t] - med) / spread > cfg.multiple {
            days[t].c = med.exp();
            days[t].cleaned = true;
            count += 1;
        }
    }
    count
}

/// Multiplies RV, Ĉ and Ĵ by k = mean(r²) / mean(RV). Returns k.
pub fn rescale_to_close(days: &mut [DayMeasures]) -> Result<f64> {
    let mv = stats::mean(&days.iter().map(|d| d.rv).collect::<Vec<_>>());
    if !(mv > 0.0) {
        return Err(Error::InvalidInput("mean realized variance is zero; cannot rescale".into()));
    }
    let mr = stats::mean(&days.iter().map(|d| d.r * d.r).collect::<Vec<_>>());
    let k = mr / mv;
    for d in days.iter_mut() {
        d.rv *= k;
        d.c *= k;
        d.j *= k;
    }
    Ok(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRun {
    pub days: Vec<DayMeasures>,
    pub rescale: f64,
    pub cleaned: usize,
    pub capped: usize,
}

/// Decompose, extract jumps, clean Ĉ, then rescale to close-to-close.
pub fn compute_measures(panel: &BarPanel, returns: &[DailyReturn], cfg: &MeasureConfig) -> Result<MeasureRun> {
    cfg.threshold.validate()?;
    if returns.len() != panel.days.len() {
        return Err(Error::InvalidInput("one daily return per bar day required".into()));
    }
    let mut days: Vec<DayMeasures> = panel
        .days
        .par_iter()
        .zip(returns.par_iter())
        .map(|(d, r)| measure_day(d.date, &d.returns, r.r, &cfg.threshold))
        .collect();
    let cleaned = clean_continuous(&mut days, &cfg.clean);
    let rescale = if cfg.no_rescale { 1.0 } else { rescale_to_close(&mut days)? };
    let capped = days.iter().filter(|d| d.capped).count();
    Ok(MeasureRun { days, rescale, cleaned, capped })
}

pub fn write_measures(path: &Path, days: &[DayMeasures]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "date,RV,C,J,ctz,n_jumps,jump_sizes,r,r_adj").map_err(io)?;
    for d in days {
        let sizes: Vec<String> = d.jump_sizes.iter().map(|s| s.to_string()).collect();
        writeln!(w, "{},{},{},{},{},{},{},{},{}", d.date, d.rv, d.c, d.j, d.ctz, d.n_jumps, sizes.join(";"), d.r, d.r_adj)
            .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_measures(path: &Path) -> Result<Vec<DayMeasures>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |what: &str| Error::Row { path: path.to_path_buf(), line, message: format!("bad {what}") };
        if row.len() != 9 {
            return Err(bad("field count"));
        }
        let num = |i: usize, what: &str| row[i].parse::<f64>().map_err(|_| bad(what));
        let jump_sizes = if row[6].is_empty() {
            Vec::new()
        } else {
            row[6].split(';').map(|s| s.parse::<f64>().map_err(|_| bad("jump_sizes"))).collect::<Result<_>>()?
        };
        out.push(DayMeasures {
            date: NaiveDate::parse_from_str(&row[0], "%Y-%m-%d").map_err(|_| bad("date"))?,
            rv: num(1, "RV")?,
            c: num(2, "C")?,
            j: num(3, "J")?,
            ctz: num(4, "ctz")?,
            n_jumps: row[5].parse().map_err(|_| bad("n_jumps"))?,
            jump_sizes,
            r: num(7, "r")?,
            r_adj: num(8, "r_adj")?,
            capped: false,
            cleaned: false,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyData(format!("{} holds no measures", path.display())));
    }
    Ok(out)
}

/// Unit convention of aggregated series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Natural,
    /// Variances ×100², returns ×100.
    #[default]
    DailyPercent,
}

impl Units {
    pub fn variance_factor(self) -> f64 {
        match self {
            Units::Natural => 1.0,
            Units::DailyPercent => 1e4,
        }
    }

    pub fn return_factor(self) -> f64 {
        match self {
            Units::Natural => 1.0,
            Units::DailyPercent => 100.0,
        }
    }
}

/// Trailing aggregates of a daily series at horizons 1, 5 and 22.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub d: f64,
    pub w: f64,
    pub m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub date: NaiveDate,
    pub log_v: Triple,
    pub log_c: Triple,
    pub r: Triple,
    pub j: Triple,
    /// False while fewer than 22 days of history exist.
    pub available: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatePanel {
    pub units: Units,
    pub rows: Vec<AggregateRow>,
}

pub const HORIZONS: [usize; 3] = [1, 5, 22];

pub fn trailing_mean(x: &[f64], h: usize) -> Vec<f64> {
    trailing_sum(x, h).into_iter().map(|s| s / h as f64).collect()
}

/// Entry t holds Σ x[t-h+1..=t]; leading entries with short history are NaN.
pub fn trailing_sum(x: &[f64], h: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    for t in (h.max(1) - 1)..x.len() {
        out[t] = x[t + 1 - h..=t].iter().sum();
    }
    out
}

pub fn aggregate(days: &[DayMeasures], units: Units) -> Result<AggregatePanel> {
    if days.len() <= 22 {
        return Err(Error::InvalidInput(format!("aggregation needs more than 22 days, got {}", days.len())));
    }
    let vf = units.variance_factor();
    let rf = units.return_factor();
    let lv: Vec<f64> = days.iter().map(|d| (d.rv * vf).ln()).collect();
    let lc: Vec<f64> = days.iter().map(|d| (d.c * vf).ln()).collect();
    let r: Vec<f64> = days.iter().map(|d| d.r * rf).collect();
    let j: Vec<f64> = days.iter().map(|d| d.j * vf).collect();
    let triple_mean = |x: &[f64]| (trailing_mean(x, 5), trailing_mean(x, 22));
    let (lv5, lv22) = triple_mean(&lv);
    let (lc5, lc22) = triple_mean(&lc);
    let (r5, r22) = triple_mean(&r);
    let (j5, j22) = (trailing_sum(&j, 5), trailing_sum(&j, 22));
    let rows = (0..days.len())
        .map(|t| AggregateRow {
            date: days[t].date,
            log_v: Triple { d: lv[t], w: lv5[t], m: lv22[t] },
            log_c: Triple { d: lc[t], w: lc5[t], m: lc22[t] },
            r: Triple { d: r[t], w: r5[t], m: r22[t] },
            j: Triple { d: j[t], w: j5[t], m: j22[t] },
            available: t >= 21,
        })
        .collect();
    Ok(AggregatePanel { units, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_day(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
        (0..n).map(|_| sd * { let z: f64 = StandardNormal.sample(rng); z }).collect::<Vec<f64>>()
    }

    #[test]
    fn rv_arithmetic() {
        assert_relative_eq!(realized_variance(&[0.01, -0.01, 0.02]), 6e-4, max_relative = 1e-14);
        assert_eq!(realized_variance(&[0.0; 10]), 0.0);
    }

    #[test]
    fn bipower_of_constant_magnitudes() {
        let c = 0.003;
        let r: Vec<f64> = (0..50).map(|i| if i % 3 == 0 { -c } else { c }).collect();
        let want = std::f64::consts::FRAC_PI_2 * c * c * 49.0;
        assert_relative_eq!(bipower(&r).unwrap(), want, max_relative = 1e-12);
    }

    #[test]
    fn bipower_resists_one_large_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r = gaussian_day(&mut rng, 120, 1e-3);
        r[60] = 0.05;
        assert!(bipower(&r).unwrap() < 0.3 * realized_variance(&r));
    }

    #[test]
    fn multipower_needs_enough_returns() {
        assert!(multipower(&[0.1, 0.2], &[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn local_variance_all_zero_is_floored() {
        let cfg = ThresholdConfig::default();
        let v = local_variance(&[0.0; 120], &cfg);
        assert!(v.iter().all(|&x| x == cfg.min_variance));
        assert_eq!(ctz_statistic(&[0.0; 120], &cfg), 0.0);
    }

    #[test]
    fn large_return_is_trimmed_from_neighbours() {
        let cfg = ThresholdConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = gaussian_day(&mut rng, 120, 1e-3);
        let clean = local_variance(&r, &cfg);
        r[60] = 1e-2;
        let v = local_variance(&r, &cfg);
        // Spike survives only the first, untrimmed pass.
        for j in 0..120 {
            assert!((v[j] - clean[j]).abs() <= 0.05 * clean[j], "j={j}: {} vs {}", v[j], clean[j]);
        }
        assert!(r[60] * r[60] > cfg.c_tau * cfg.c_tau * v[60]);
    }

    #[test]
    fn local_variance_tracks_homoskedastic_level() {
        let cfg = ThresholdConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sd: f64 = 2e-3;
        let reps = 400;
        let mut acc = vec![0.0; 120];
        for _ in 0..reps {
            let r = gaussian_day(&mut rng, 120, sd);
            for (a, v) in acc.iter_mut().zip(local_variance(&r, &cfg)) {
                *a += v / reps as f64;
            }
        }
        for a in acc {
            assert!((a / (sd * sd) - 1.0).abs() < 0.2);
        }
    }

    #[test]
    fn threshold_multipower_without_exceedances_is_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = gaussian_day(&mut rng, 120, 1e-3);
        let theta = vec![1.0; 120];
        for g in [&[1.0, 1.0][..], &[4.0 / 3.0; 3][..]] {
            let plain = multipower(&r, g).unwrap();
            assert_relative_eq!(threshold_multipower(&r, g, &theta, 3.0, false).unwrap(), plain, max_relative = 1e-12);
            assert_relative_eq!(threshold_multipower(&r, g, &theta, 3.0, true).unwrap(), plain, max_relative = 1e-12);
        }
    }

    #[test]
    fn z_above_threshold_ignores_x() {
        let z = ZFunction::new(1.0, 3.0);
        assert_eq!(z.eval(0.5, 0.01), z.eval(-7.0, 0.01));
    }

    #[test]
    fn z_surrogate_is_truncated_normal_moment() {
        // Oracle: E[|X|^γ | X² > y] for X ~ N(0, y/c²), by midpoint quadrature.
        let (c, y) = (3.0, 0.04);
        let s = (y as f64).sqrt() / c;
        for g in [1.0, 4.0 / 3.0] {
            let (mut num, mut den) = (0.0, 0.0);
            let h = 1e-4;
            let mut u = c + 0.5 * h;
            while u < 15.0 {
                let phi = (-0.5 * u * u).exp();
                num += (s * u).powf(g) * phi;
                den += phi;
                u += h;
            }
            assert_relative_eq!(ZFunction::new(g, c).eval(1.0, y), num / den, max_relative = 1e-6);
        }
    }

    #[test]
    fn numerator_zero_gives_zero_statistic() {
        assert_eq!(ctz_value(2.5e-4, 2.5e-4, 7e-8, 120), 0.0);
        assert_eq!(ctz_value(0.0, 0.0, 0.0, 120), 0.0);
        // quarticity guard: ratio below one is replaced by one
        let a = ctz_value(2.0, 1.0, 0.5, 100);
        assert_relative_eq!(a, 0.5 * 10.0 / RATIO_VAR.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn ten_sigma_jump_rejects_and_is_extracted() {
        let cfg = ThresholdConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sd = 1e-3;
        let mut r = gaussian_day(&mut rng, 120, sd);
        r[40] += 10.0 * sd;
        let m = measure_day(NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(), &r, 0.0, &cfg);
        assert!(m.ctz > cfg.critical_value());
        assert_eq!(m.n_jumps, 1);
        let ss: f64 = m.jump_sizes.iter().map(|c| c * c).sum();
        assert_relative_eq!(ss, m.j, max_relative = 1e-12);
        assert_relative_eq!(m.r_adj, -m.jump_sizes[0], max_relative = 1e-12);
    }

    #[test]
    fn non_rejected_day_keeps_rv() {
        let cfg = ThresholdConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = gaussian_day(&mut rng, 120, 1e-3);
        let d = decompose_day(&r, &cfg);
        assert!(!d.rejected);
        assert_eq!(d.c, d.test.rv);
        assert_eq!(d.j, 0.0);
        let m = measure_day(NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(), &r, 0.01, &cfg);
        assert_eq!(m.n_jumps, 0);
        assert_eq!(m.r_adj, 0.01);
    }

    fn flat_days(cs: &[f64]) -> Vec<DayMeasures> {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        cs.iter()
            .enumerate()
            .map(|(i, &c)| DayMeasures {
                date: start + chrono::Duration::days(i as i64),
                rv: c,
                c,
                j: 0.0,
                ctz: 0.0,
                n_jumps: 0,
                jump_sizes: vec![],
                r: 0.0,
                r_adj: 0.0,
                capped: false,
                cleaned: false,
            })
            .collect()
    }

    #[test]
    fn cleaning_replaces_spike_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cs: Vec<f64> = (0..60).map(|_| 1e-4 * (0.2 * { let z: f64 = StandardNormal.sample(&mut rng); z }).exp()).collect();
        let mut untouched = flat_days(&cs);
        assert_eq!(clean_continuous(&mut untouched, &CleanConfig::default()), 0);
        cs[40] *= 100.0;
        let mut days = flat_days(&cs);
        assert_eq!(clean_continuous(&mut days, &CleanConfig::default()), 1);
        assert!(days[40].cleaned);
        assert!(days[40].c < 2e-4);
    }

    #[test]
    fn rescale_doubles() {
        let mut days = flat_days(&[1.0, 3.0]);
        days[0].r = 2.0f64.sqrt();
        days[1].r = 6.0f64.sqrt();
        days[1].j = 1.0;
        let k = rescale_to_close(&mut days).unwrap();
        assert_relative_eq!(k, 2.0, max_relative = 1e-14);
        assert_relative_eq!(days[1].rv, 6.0, max_relative = 1e-14);
        assert_relative_eq!(days[1].j / days[1].c, 1.0 / 3.0, max_relative = 1e-14);
        let mut zero = flat_days(&[0.0, 0.0]);
        assert!(rescale_to_close(&mut zero).is_err());
    }

    #[test]
    fn aggregation_windows() {
        let mut days = flat_days(&[2.0; 30]);
        for (i, d) in days.iter_mut().enumerate() {
            d.j = i as f64;
        }
        let rets = [1.0, 1.0, 1.0, 1.0, -5.0];
        for (d, r) in days[25..].iter_mut().zip(rets) {
            d.r = r;
        }
        let p = aggregate(&days, Units::Natural).unwrap();
        assert!(!p.rows[20].available && p.rows[21].available);
        let last = &p.rows[29];
        assert_relative_eq!(last.log_v.m, 2.0f64.ln(), max_relative = 1e-14);
        assert_relative_eq!(last.r.w, -0.2, max_relative = 1e-14);
        assert_eq!(last.j.m, (8..30).map(|i| i as f64).sum::<f64>());
    }

    #[test]
    fn measures_csv_roundtrip() {
        let mut days = flat_days(&[1e-4, 2e-4]);
        days[1].n_jumps = 2;
        days[1].jump_sizes = vec![0.01, -0.003];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_measures(&p, &days).unwrap();
        let back = read_measures(&p).unwrap();
        assert_eq!(back, days);
        let head = std::fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("date,RV,C,J,ctz,n_jumps,jump_sizes,r,r_adj\n"));
    }

    proptest! {
        #[test]
        fn scaling_invariance(seed in 0u64..1000, s in 0.01f64..100.0) {
            let cfg = ThresholdConfig { min_variance: 1e-300, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r = gaussian_day(&mut rng, 120, 1e-3);
            r[(seed % 120) as usize] += 8e-3;
            let a = ctz_test(&r, &cfg);
            let rs: Vec<f64> = r.iter().map(|x| x * s).collect();
            let b = ctz_test(&rs, &cfg);
            prop_assert!((b.rv / (a.rv * s * s) - 1.0).abs() < 1e-10);
            prop_assert!((b.tbpv / (a.tbpv * s * s) - 1.0).abs() < 1e-10);
            prop_assert!((bipower(&rs).unwrap() / (bipower(&r).unwrap() * s * s) - 1.0).abs() < 1e-10);
            prop_assert!((b.ctz - a.ctz).abs() < 1e-8 * a.ctz.abs().max(1.0));
        }

        #[test]
        fn decomposition_identity(seed in 0u64..1000, jump in -0.02f64..0.02) {
            let cfg = ThresholdConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r = gaussian_day(&mut rng, 120, 1e-3);
            r[7] += jump;
            let d = decompose_day(&r, &cfg);
            prop_assert!(d.c >= 0.0 && d.j >= 0.0);
            if d.rejected {
                prop_assert!((d.c + d.j - d.test.rv.max(d.test.tbpv)).abs() < 1e-15);
            } else {
                prop_assert_eq!(d.c, d.test.rv);
                prop_assert_eq!(d.j, 0.0);
            }
        }

        #[test]
        fn aggregates_of_constant(a in 1e-6f64..1.0) {
            let days = flat_days(&vec![a; 40]);
            let p = aggregate(&days, Units::Natural).unwrap();
            for row in p.rows.iter().filter(|r| r.available) {
                prop_assert!((row.log_c.w - a.ln()).abs() < 1e-12);
                prop_assert!((row.log_c.m - a.ln()).abs() < 1e-12);
            }
        }
    }
}
