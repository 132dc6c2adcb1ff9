//! HAR-family regressions with Newey–West covariance, fit metrics and
//! expanding-window forecasts.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::realized::{AggregatePanel, AggregateRow, Triple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Har,
    Lhar,
    LharCj,
    Ar22,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "har" => Ok(ModelKind::Har),
            "lhar" => Ok(ModelKind::Lhar),
            "lhar-cj" | "lharcj" => Ok(ModelKind::LharCj),
            "ar22" | "ar(22)" => Ok(ModelKind::Ar22),
            _ => Err(Error::InvalidInput(format!("unknown model `{s}` (har, lhar, lhar-cj, ar22)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    D,
    W,
    M,
}

impl Horizon {
    pub const ALL: [Horizon; 3] = [Horizon::D, Horizon::W, Horizon::M];

    fn pick(self, t: &Triple) -> f64 {
        match self {
            Horizon::D => t.d,
            Horizon::W => t.w,
            Horizon::M => t.m,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Horizon::D => "d",
            Horizon::W => "w",
            Horizon::M => "m",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regressor {
    Intercept,
    /// Log volatility series (V̂ or Ĉ per spec) at the given aggregation.
    Vol(Horizon),
    /// log(1 + Ĵ^(h)).
    Jump(Horizon),
    /// Signed part of r^(h).
    Leverage(Horizon),
    /// log V̂ lagged k days (k = 0 is the current day).
    LogVLag(usize),
}

impl Regressor {
    pub fn name(&self) -> String {
        match self {
            Regressor::Intercept => "c".into(),
            Regressor::Vol(h) => format!("beta_{}", h.suffix()),
            Regressor::Jump(h) => format!("alpha_{}", h.suffix()),
            Regressor::Leverage(h) => format!("gamma_{}", h.suffix()),
            Regressor::LogVLag(k) => format!("lag_{}", k + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeverageSign {
    #[default]
    Negative,
    Positive,
}

/// Which daily variance series a column is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// Total realized variance V̂.
    V,
    /// Continuous component Ĉ.
    C,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarSpec {
    pub kind: ModelKind,
    #[serde(default = "one")]
    pub horizon: usize,
    #[serde(default)]
    pub leverage: LeverageSign,
    pub response: Measure,
    pub regressors: Measure,
    /// Overrides the kind's default regressor list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include: Option<Vec<Regressor>>,
}

fn one() -> usize {
    1
}

impl HarSpec {
    pub fn new(kind: ModelKind) -> Self {
        let regressors = if kind == ModelKind::LharCj { Measure::C } else { Measure::V };
        HarSpec { kind, horizon: 1, leverage: LeverageSign::Negative, response: Measure::V, regressors, include: None }
    }

    /// HAR on the continuous component, response and regressors both Ĉ.
    pub fn har_on_c() -> Self {
        HarSpec { response: Measure::C, regressors: Measure::C, ..Self::new(ModelKind::Har) }
    }

    /// LHAR on Ĉ keeping only daily and weekly volatility and leverage terms.
    pub fn reduced_lhar_on_c() -> Self {
        HarSpec {
            response: Measure::C,
            regressors: Measure::C,
            include: Some(vec![
                Regressor::Intercept,
                Regressor::Vol(Horizon::D),
                Regressor::Vol(Horizon::W),
                Regressor::Leverage(Horizon::D),
                Regressor::Leverage(Horizon::W),
            ]),
            ..Self::new(ModelKind::Lhar)
        }
    }

    pub fn columns(&self) -> Vec<Regressor> {
        if let Some(cols) = &self.include {
            return cols.clone();
        }
        let mut cols = vec![Regressor::Intercept];
        match self.kind {
            ModelKind::Ar22 => cols.extend((0..22).map(Regressor::LogVLag)),
            kind => {
                cols.extend(Horizon::ALL.map(Regressor::Vol));
                if kind == ModelKind::LharCj {
                    cols.extend(Horizon::ALL.map(Regressor::Jump));
                }
                if kind != ModelKind::Har {
                    cols.extend(Horizon::ALL.map(Regressor::Leverage));
                }
            }
        }
        cols
    }

    pub fn names(&self) -> Vec<String> {
        self.columns().iter().map(Regressor::name).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Design {
    /// Date of the regressors (information set) of each row.
    pub dates: Vec<NaiveDate>,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
}

fn log_series(row: &AggregateRow, m: Measure) -> &Triple {
    match m {
        Measure::V => &row.log_v,
        Measure::C => &row.log_c,
    }
}

/// Rows use information dated t only; the response is the h-day mean of the
/// response series over t+1..=t+h.
pub fn build_design(panel: &AggregatePanel, spec: &HarSpec) -> Result<Design> {
    if spec.horizon == 0 {
        return Err(Error::InvalidInput("horizon must be at least one day".into()));
    }
    let cols = spec.columns();
    let names: Vec<String> = cols.iter().map(Regressor::name).collect();
    let rows = &panel.rows;
    let h = spec.horizon;
    let mut dates = Vec::new();
    let mut y = Vec::new();
    let mut x: Vec<f64> = Vec::new();
    for t in 0..rows.len().saturating_sub(h) {
        let row = &rows[t];
        if !row.available {
            continue;
        }
        let resp = (1..=h).map(|k| log_series(&rows[t + k], spec.response).d).sum::<f64>() / h as f64;
        if !resp.is_finite() {
            return Err(Error::NonFinite { date: rows[t + h].date, column: "response".into() });
        }
        for (c, name) in cols.iter().zip(&names) {
            let v = match *c {
                Regressor::Intercept => 1.0,
                Regressor::Vol(hz) => hz.pick(log_series(row, spec.regressors)),
                Regressor::Jump(hz) => hz.pick(&row.j).ln_1p(),
                Regressor::Leverage(hz) => {
                    let r = hz.pick(&row.r);
                    match spec.leverage {
                        LeverageSign::Negative => r.min(0.0),
                        LeverageSign::Positive => r.max(0.0),
                    }
                }
                Regressor::LogVLag(k) => match t.checked_sub(k) {
                    Some(s) => rows[s].log_v.d,
                    None => f64::NAN,
                },
            };
            if !v.is_finite() {
                return Err(Error::NonFinite { date: row.date, column: name.clone() });
            }
            x.push(v);
        }
        dates.push(row.date);
        y.push(resp);
    }
    let n = y.len();
    if n <= cols.len() {
        return Err(Error::InvalidInput(format!("{n} usable rows for {} regressors", cols.len())));
    }
    Ok(Design { dates, y: DVector::from_vec(y), x: DMatrix::from_row_slice(n, cols.len(), &x), names })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryFit {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    /// Newey–West covariance, row-major.
    pub cov: Vec<Vec<f64>>,
    pub tstats: Vec<f64>,
    pub sigma2: f64,
    pub nobs: usize,
    pub nw_lag: usize,
    pub rss: f64,
    pub tss: f64,
}

impl AuxiliaryFit {
    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let k = self.coef.len();
        DMatrix::from_fn(k, k, |i, j| self.cov[i][j])
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.coef.len()).map(|i| self.cov[i][i].sqrt()).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coef[i])
    }
}

/// floor(4 (n/100)^{2/9}).
pub fn default_nw_lag(n: usize) -> usize {
    (4.0 * (n as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// Column indices that are (numerically) linear combinations of earlier columns.
pub fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let tol = 1e-10;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for _ in 0..2 {
            for q in &basis {
                let p = q.dot(&v);
                v.axpy(-p, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= tol * norm0 {
            bad.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    bad
}

fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let bad = collinear_columns(x);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient { columns: bad.into_iter().map(|j| names[j].clone()).collect() })
    }
}

fn solve_normal(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let xtx = x.transpose() * x;
    let chol = xtx.cholesky()?;
    let beta = chol.solve(&(x.transpose() * y));
    Some((beta, chol.inverse()))
}

/// OLS point estimates and residual sum of squares only.
pub fn ols_coefficients(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<(Vec<f64>, f64)> {
    let qr = x.clone().qr();
    let r = qr.r();
    if (0..r.ncols()).any(|i| r[(i, i)].abs() < 1e-12 * r.norm()) {
        return None;
    }
    let qty = qr.q().transpose() * y;
    let beta = r.solve_upper_triangular(&qty)?;
    let e = y - x * &beta;
    Some((beta.iter().copied().collect(), e.norm_squared()))
}

/// OLS with Bartlett-kernel Newey–West covariance (X'X)⁻¹ S (X'X)⁻¹.
pub fn ols_newey_west(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String], lag: usize) -> Result<AuxiliaryFit> {
    let (n, k) = x.shape();
    if n <= k {
        return Err(Error::InvalidInput(format!("{n} observations for {k} regressors")));
    }
    check_rank(x, names)?;
    let (beta, xtx_inv) = solve_normal(x, y).ok_or_else(|| Error::RankDeficient { columns: names.to_vec() })?;
    let e = y - x * &beta;
    // rows of u are x_t e_t
    let mut u = x.clone();
    for (t, mut row) in u.row_iter_mut().enumerate() {
        row *= e[t];
    }
    let mut s = u.transpose() * &u;
    for l in 1..=lag.min(n - 1) {
        let w = 1.0 - l as f64 / (lag as f64 + 1.0);
        let a = u.rows(l, n - l);
        let b = u.rows(0, n - l);
        let g = a.transpose() * b;
        s += (&g + g.transpose()) * w;
    }
    let cov = &xtx_inv * s * &xtx_inv;
    let cov = (&cov + cov.transpose()) * 0.5;
    let rss = e.norm_squared();
    let ybar = y.mean();
    let tss = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let coef: Vec<f64> = beta.iter().copied().collect();
    let tstats = (0..k).map(|i| coef[i] / cov[(i, i)].sqrt()).collect();
    Ok(AuxiliaryFit {
        names: names.to_vec(),
        coef,
        cov: (0..k).map(|i| (0..k).map(|j| cov[(i, j)]).collect()).collect(),
        tstats,
        sigma2: rss / (n - k) as f64,
        nobs: n,
        nw_lag: lag,
        rss,
        tss,
    })
}

pub fn fit(panel: &AggregatePanel, spec: &HarSpec, lag: Option<usize>) -> Result<AuxiliaryFit> {
    let d = build_design(panel, spec)?;
    let lag = lag.unwrap_or_else(|| default_nw_lag(d.y.len()));
    ols_newey_west(&d.x, &d.y, &d.names, lag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InSample {
    pub aic: f64,
    pub bic: f64,
    pub r2: f64,
    pub adj_r2: f64,
    /// RSS was below machine epsilon and floored.
    pub degenerate: bool,
}

/// AIC = n ln(RSS/n) + 2k, BIC = n ln(RSS/n) + k ln n. Levels depend on the
/// dropped likelihood constants; only orderings across models are meaningful.
pub fn in_sample_metrics(fit: &AuxiliaryFit) -> InSample {
    let n = fit.nobs as f64;
    let k = fit.coef.len() as f64;
    let degenerate = fit.rss < f64::EPSILON;
    let rss = fit.rss.max(f64::EPSILON);
    let ll = n * (rss / n).ln();
    let r2 = if fit.tss > 0.0 { 1.0 - fit.rss / fit.tss } else { 1.0 };
    InSample {
        aic: ll + 2.0 * k,
        bic: ll + k * n.ln(),
        r2,
        adj_r2: 1.0 - (1.0 - r2) * (n - 1.0) / (n - k),
        degenerate,
    }
}

pub fn qlike(y: f64, h: f64) -> f64 {
    let q = y / h;
    q - q.ln() - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutOfSample {
    pub n_forecasts: usize,
    pub mse: f64,
    pub mae: f64,
    pub qlike: f64,
    pub mz_r2: f64,
    /// Refits in which collinear columns had to be dropped.
    pub reduced_refits: usize,
}

#[derive(Debug, Clone)]
pub struct Forecasts {
    pub dates: Vec<NaiveDate>,
    pub realized: Vec<f64>,
    pub forecast: Vec<f64>,
    pub reduced_refits: usize,
}

// OLS on the columns that survive the collinearity screen; dropped columns get 0.
fn ols_reduced(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<(Vec<f64>, f64, bool)> {
    let bad = collinear_columns(x);
    if bad.is_empty() {
        let (b, rss) = ols_coefficients(x, y)?;
        return Some((b, rss, false));
    }
    let keep: Vec<usize> = (0..x.ncols()).filter(|j| !bad.contains(j)).collect();
    if keep.is_empty() {
        return None;
    }
    let xr = x.select_columns(&keep);
    let (b, rss) = ols_coefficients(&xr, y)?;
    let mut full = vec![0.0; x.ncols()];
    for (j, v) in keep.iter().zip(b) {
        full[*j] = v;
    }
    Some((full, rss, true))
}

/// One-day-ahead forecasts for every row whose regressor date is on or after
/// `split`, each refit on responses dated up to the day before.
pub fn forecast_oos(panel: &AggregatePanel, spec: &HarSpec, split: NaiveDate, smearing: bool) -> Result<Forecasts> {
    if spec.horizon != 1 {
        return Err(Error::InvalidInput("out-of-sample evaluation supports h = 1 only".into()));
    }
    let d = build_design(panel, spec)?;
    let first = d.dates.iter().position(|&t| t >= split).ok_or_else(|| {
        Error::InvalidInput(format!("no forecast origin on or after {split}"))
    })?;
    let k = d.x.ncols();
    if first < 61 || first - 1 < k + 1 {
        return Err(Error::InvalidInput(format!("{} training rows before {split}; at least 60 required", first.saturating_sub(1))));
    }
    let mut out = Forecasts { dates: Vec::new(), realized: Vec::new(), forecast: Vec::new(), reduced_refits: 0 };
    for i in first..d.y.len() {
        let m = i - 1;
        let x = d.x.rows(0, m).into_owned();
        let y = d.y.rows(0, m).into_owned();
        let (b, rss, reduced) = ols_reduced(&x, &y)
            .ok_or_else(|| Error::RankDeficient { columns: d.names.clone() })?;
        out.reduced_refits += usize::from(reduced);
        let s2 = rss / (m - k).max(1) as f64;
        let fit: f64 = d.x.row(i).iter().zip(&b).map(|(a, c)| a * c).sum();
        out.forecast.push((fit + if smearing { 0.5 * s2 } else { 0.0 }).exp());
        out.realized.push(d.y[i].exp());
        out.dates.push(d.dates[i]);
    }
    Ok(out)
}

pub fn oos_losses(f: &Forecasts) -> OutOfSample {
    let n = f.forecast.len() as f64;
    let pairs = || f.realized.iter().zip(&f.forecast);
    let mse = pairs().map(|(y, h)| (y - h).powi(2)).sum::<f64>() / n;
    let mae = pairs().map(|(y, h)| (y - h).abs()).sum::<f64>() / n;
    let ql = pairs().map(|(&y, &h)| qlike(y, h)).sum::<f64>() / n;
    // Mincer–Zarnowitz: realized on a constant and the forecast
    let mf = f.forecast.iter().sum::<f64>() / n;
    let my = f.realized.iter().sum::<f64>() / n;
    let sff: f64 = f.forecast.iter().map(|h| (h - mf).powi(2)).sum();
    let syy: f64 = f.realized.iter().map(|y| (y - my).powi(2)).sum();
    let sfy: f64 = pairs().map(|(y, h)| (h - mf) * (y - my)).sum();
    let mz_r2 = if sff > 0.0 && syy > 0.0 { sfy * sfy / (sff * syy) } else { f64::NAN };
    OutOfSample { n_forecasts: f.forecast.len(), mse, mae, qlike: ql, mz_r2, reduced_refits: f.reduced_refits }
}
