//! Indirect inference: match HAR-type auxiliary statistics between the data
//! and model simulations, with variance targeting of ω, Λ₂ and the jump law.

use chrono::{Days, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::har::{self, HarSpec};
use crate::optim::{Bound, NelderMead, TracePoint};
use crate::realized::{self, AggregatePanel, DayMeasures, MeasureConfig, Units};
use crate::sim::{self, InitialVariance, SimConfig, StructuralParams};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructuralModel {
    #[serde(rename = "2sv")]
    TwoSv,
    #[serde(rename = "2svj")]
    TwoSvj,
}

impl std::str::FromStr for StructuralModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "2sv" => Ok(StructuralModel::TwoSv),
            "2svj" => Ok(StructuralModel::TwoSvj),
            other => Err(Error::InvalidInput(format!("unknown structural model `{other}` (2sv | 2svj)"))),
        }
    }
}

impl StructuralModel {
    pub fn aux_spec(self) -> HarSpec {
        match self {
            StructuralModel::TwoSv => HarSpec::har_on_c(),
            StructuralModel::TwoSvj => HarSpec::reduced_lhar_on_c(),
        }
    }

    pub fn default_free(self) -> Vec<FreeParam> {
        use FreeParam::*;
        match self {
            StructuralModel::TwoSv => vec![Kappa1, Kappa2, Vol1],
            StructuralModel::TwoSvj => vec![Kappa1, Kappa2, Vol1, Rho1, Rho2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeParam {
    Kappa1,
    Kappa2,
    Vol1,
    Rho1,
    Rho2,
}

impl FreeParam {
    pub fn name(self) -> &'static str {
        match self {
            FreeParam::Kappa1 => "kappa1",
            FreeParam::Kappa2 => "kappa2",
            FreeParam::Vol1 => "vol1",
            FreeParam::Rho1 => "rho1",
            FreeParam::Rho2 => "rho2",
        }
    }

    pub fn bound(self) -> Bound {
        match self {
            FreeParam::Kappa1 | FreeParam::Kappa2 => Bound::new(1e-4, 10.0),
            FreeParam::Vol1 => Bound::new(1e-5, 0.2),
            FreeParam::Rho1 | FreeParam::Rho2 => Bound::new(-0.999, 0.999),
        }
    }

    fn get(self, p: &StructuralParams) -> f64 {
        match self {
            FreeParam::Kappa1 => p.kappa1,
            FreeParam::Kappa2 => p.kappa2,
            FreeParam::Vol1 => p.vol1,
            FreeParam::Rho1 => p.rho1,
            FreeParam::Rho2 => p.rho2,
        }
    }

    fn set(self, p: &mut StructuralParams, v: f64) {
        match self {
            FreeParam::Kappa1 => p.kappa1 = v,
            FreeParam::Kappa2 => p.kappa2 = v,
            FreeParam::Vol1 => p.vol1 = v,
            FreeParam::Rho1 => p.rho1 = v,
            FreeParam::Rho2 => p.rho2 = v,
        }
    }
}

/// Radicand variant of the Λ₂ targeting identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Vol2Rule {
    /// κ₂ (2 Var(Ĉ)/ω − Λ₁²/κ₁), the stationary CIR identity.
    #[default]
    Stationary,
    /// κ₂ (2 Var(Ĉ)/ω − Λ₁/κ₁), as printed.
    Printed,
}

/// Moments fixed from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub omega: f64,
    pub var_c: f64,
    pub lambda: f64,
    pub mu_j: f64,
    pub sigma_j: f64,
}

/// ω = mean(Ĉ)/2; for jump models λ = mean n_t and (μ_J, σ_J) are the
/// mean and standard deviation of the extracted intraday jump sizes.
pub fn target(days: &[DayMeasures], model: StructuralModel) -> Result<Targets> {
    if days.len() < 2 {
        return Err(Error::EmptyData("variance targeting needs at least two days".into()));
    }
    let c: Vec<f64> = days.iter().map(|d| d.c).collect();
    let mut t = Targets { omega: stats::mean(&c) / 2.0, var_c: stats::variance(&c), lambda: 0.0, mu_j: 0.0, sigma_j: 0.0 };
    if model == StructuralModel::TwoSvj {
        let n: Vec<f64> = days.iter().map(|d| d.n_jumps as f64).collect();
        t.lambda = stats::mean(&n);
        let sizes: Vec<f64> = days.iter().flat_map(|d| d.jump_sizes.iter().copied()).collect();
        if !sizes.is_empty() {
            t.mu_j = stats::mean(&sizes);
        }
        if sizes.len() > 1 {
            t.sigma_j = stats::std_dev(&sizes);
        }
    }
    Ok(t)
}

impl Targets {
    pub fn vol2(&self, kappa1: f64, kappa2: f64, vol1: f64, rule: Vol2Rule) -> Result<f64> {
        let own = match rule {
            Vol2Rule::Stationary => vol1 * vol1 / kappa1,
            Vol2Rule::Printed => vol1 / kappa1,
        };
        let radicand = kappa2 * (2.0 * self.var_c / self.omega - own);
        if radicand >= 0.0 {
            Ok(radicand.sqrt())
        } else {
            Err(Error::TargetingInfeasible(format!(
                "Λ₂² = {radicand:e} < 0 at kappa1 = {kappa1:e}, kappa2 = {kappa2:e}, vol1 = {vol1:e}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IIConfig {
    pub model: StructuralModel,
    pub replicas: usize,
    pub seed: u64,
    /// Simulated sample length; defaults to the data length.
    pub days: Option<usize>,
    pub intervals: usize,
    pub substeps: usize,
    pub vol2_rule: Vol2Rule,
    /// Also match the auxiliary residual variance.
    pub match_sigma2: bool,
    pub free: Option<Vec<FreeParam>>,
    /// Starting point; values of non-free parameters are taken from here too.
    pub start: Option<StructuralParams>,
    pub optimizer: NelderMead,
    pub nw_lag: Option<usize>,
    pub measures: MeasureConfig,
}

impl Default for IIConfig {
    fn default() -> Self {
        IIConfig {
            model: StructuralModel::TwoSv,
            replicas: 50,
            seed: 7,
            days: None,
            intervals: 120,
            substeps: 5,
            vol2_rule: Vol2Rule::Stationary,
            match_sigma2: false,
            free: None,
            start: None,
            optimizer: NelderMead { max_evals: 400, xtol: 1e-4, ftol_abs: 1e-6, ftol_rel: 1e-6, step: 0.4, restarts: 1 },
            nw_lag: None,
            measures: MeasureConfig { no_rescale: true, ..MeasureConfig::default() },
        }
    }
}

/// Auxiliary statistics of one sample: coefficients, then σ² if matched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxStats {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

fn base_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date")
}

/// Joint Newey–West covariance of (β̂, σ̂²) from their influence functions.
fn aux_with_cov(panel: &AggregatePanel, spec: &HarSpec, match_sigma2: bool, lag: Option<usize>) -> Result<(AuxStats, DMatrix<f64>)> {
    let d = har::build_design(panel, spec)?;
    let (n, k) = d.x.shape();
    let lag = lag.unwrap_or_else(|| har::default_nw_lag(n));
    let fit = har::ols_newey_west(&d.x, &d.y, &d.names, lag)?;
    let mut names = d.names.clone();
    let mut values = fit.coef.clone();
    if !match_sigma2 {
        return Ok((AuxStats { names, values }, fit.cov_matrix()));
    }
    names.push("sigma2".into());
    values.push(fit.sigma2);
    let beta = DVector::from_column_slice(&fit.coef);
    let e = &d.y - &d.x * &beta;
    let xtx_n = (d.x.transpose() * &d.x) / n as f64;
    let inv = xtx_n.try_inverse().ok_or_else(|| Error::RankDeficient { columns: d.names.clone() })?;
    let m = k + 1;
    let mut psi = DMatrix::<f64>::zeros(n, m);
    for t in 0..n {
        let xe = d.x.row(t).transpose() * e[t];
        let inf = &inv * xe;
        for j in 0..k {
            psi[(t, j)] = inf[j];
        }
        psi[(t, k)] = e[t] * e[t] - fit.sigma2;
    }
    let mut s = psi.transpose() * &psi;
    for l in 1..=lag.min(n - 1) {
        let w = 1.0 - l as f64 / (lag as f64 + 1.0);
        let g = psi.rows(l, n - l).transpose() * psi.rows(0, n - l);
        s += (&g + g.transpose()) * w;
    }
    let cov = s / (n as f64 * n as f64);
    Ok((AuxStats { names, values }, (&cov + cov.transpose()) * 0.5))
}

fn aux_point(panel: &AggregatePanel, spec: &HarSpec, match_sigma2: bool) -> Result<Vec<f64>> {
    let d = har::build_design(panel, spec)?;
    let (n, k) = d.x.shape();
    let (mut coef, rss) = har::ols_coefficients(&d.x, &d.y).ok_or_else(|| Error::RankDeficient { columns: d.names.clone() })?;
    if match_sigma2 {
        coef.push(rss / (n - k) as f64);
    }
    Ok(coef)
}

/// Measures of a simulated path, processed like the data except for the
/// overnight rescale.
pub fn replica_measures(path: &sim::ReplicaPath, cfg: &MeasureConfig) -> Vec<DayMeasures> {
    let start = base_date();
    let mut days: Vec<DayMeasures> = (0..path.days())
        .map(|d| {
            let r = path.day(d);
            let date = start + Days::new(d as u64);
            realized::measure_day(date, r, r.iter().sum(), &cfg.threshold)
        })
        .collect();
    realized::clean_continuous(&mut days, &cfg.clean);
    if !cfg.no_rescale {
        let _ = realized::rescale_to_close(&mut days);
    }
    days
}

#[derive(Debug, Clone)]
pub struct IIProblem {
    pub config: IIConfig,
    pub targets: Targets,
    pub spec: HarSpec,
    pub free: Vec<FreeParam>,
    pub template: StructuralParams,
    pub data: AuxStats,
    pub data_cov: DMatrix<f64>,
    pub weight: DMatrix<f64>,
    pub sim_days: usize,
}

/// Binding function value at θ: mean auxiliary statistics across replicas.
#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub mean: Vec<f64>,
    pub survived: usize,
}

impl IIProblem {
    pub fn new(days: &[DayMeasures], config: IIConfig) -> Result<Self> {
        if config.replicas == 0 {
            return Err(Error::InvalidInput("at least one replica required".into()));
        }
        let targets = target(days, config.model)?;
        let spec = config.model.aux_spec();
        let panel = realized::aggregate(days, Units::DailyPercent)?;
        let (data, data_cov) = aux_with_cov(&panel, &spec, config.match_sigma2, config.nw_lag)?;
        let weight = data_cov
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient { columns: data.names.clone() })?;
        let free = config.free.clone().unwrap_or_else(|| config.model.default_free());
        if data.values.len() < free.len() {
            return Err(Error::InvalidInput(format!(
                "{} auxiliary statistics cannot identify {} parameters",
                data.values.len(),
                free.len()
            )));
        }
        let mut template = config.start.unwrap_or_else(|| default_start(&targets, config.model));
        template.omega = targets.omega;
        template.two_factor = true;
        template.drift = sim::DriftMode::Zero;
        if config.model == StructuralModel::TwoSvj {
            template.lambda = targets.lambda;
            template.mu_j = targets.mu_j;
            template.sigma_j = targets.sigma_j;
        } else {
            template.lambda = 0.0;
            template.mu_j = 0.0;
            template.sigma_j = 0.0;
            template.rho1 = 0.0;
            template.rho2 = 0.0;
        }
        let sim_days = config.days.unwrap_or(days.len());
        Ok(IIProblem { config, targets, spec, free, template, data, data_cov, weight, sim_days })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.free.iter().map(|f| f.name()).collect()
    }

    pub fn bounds(&self) -> Vec<Bound> {
        self.free.iter().map(|f| f.bound()).collect()
    }

    pub fn theta0(&self) -> Vec<f64> {
        self.free.iter().map(|f| f.get(&self.template)).collect()
    }

    /// Full parameter vector at θ, with Λ₂ targeted.
    pub fn params(&self, theta: &[f64]) -> Result<StructuralParams> {
        let mut p = self.template;
        for (f, v) in self.free.iter().zip(theta) {
            f.set(&mut p, *v);
        }
        p.vol2 = self.targets.vol2(p.kappa1, p.kappa2, p.vol1, self.config.vol2_rule)?;
        p.validate()?;
        Ok(p)
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig {
            days: self.sim_days,
            intervals: self.config.intervals,
            substeps: self.config.substeps,
            replicas: self.config.replicas,
            seed: self.config.seed,
            initial: InitialVariance::Stationary,
            scheme: "euler-full-truncation".into(),
        }
    }

    /// Auxiliary statistics of replica `s` at `p`.
    pub fn replica_stats(&self, p: &StructuralParams, s: usize) -> Result<Vec<f64>> {
        let path = sim::simulate_replica(p, &self.sim_config(), s)?;
        let days = replica_measures(&path, &self.config.measures);
        let panel = realized::aggregate(&days, Units::DailyPercent)?;
        aux_point(&panel, &self.spec, self.config.match_sigma2)
    }

    pub fn binding(&self, theta: &[f64]) -> Result<Binding> {
        let p = self.params(theta)?;
        let s_total = self.config.replicas;
        let results: Vec<Result<Vec<f64>>> = (0..s_total).into_par_iter().map(|s| self.replica_stats(&p, s)).collect();
        let mut sum = vec![0.0; self.data.values.len()];
        let mut survived = 0;
        for (s, r) in results.into_iter().enumerate() {
            match r {
                Ok(v) => {
                    survived += 1;
                    sum.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
                }
                Err(e) => log::warn!("replica {s} dropped: {e}"),
            }
        }
        if 2 * survived < s_total {
            return Err(Error::TooFewReplicas { survived, requested: s_total });
        }
        Ok(Binding { mean: sum.iter().map(|v| v / survived as f64).collect(), survived })
    }

    pub fn distance(&self, mean: &[f64]) -> f64 {
        quadratic_form(&self.data.values, mean, &self.weight)
    }

    pub fn chi_square(&self, theta: &[f64]) -> Result<f64> {
        let b = self.binding(theta)?;
        Ok(self.distance(&b.mean))
    }
}

/// (a − b)' Ω (a − b).
pub fn quadratic_form(a: &[f64], b: &[f64], omega: &DMatrix<f64>) -> f64 {
    let d = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| x - y));
    (d.transpose() * omega * &d)[(0, 0)]
}

fn default_start(t: &Targets, model: StructuralModel) -> StructuralParams {
    let kappa1 = 0.1;
    // half of the stationary variance on each factor
    let vol1 = (0.5 * kappa1 * 2.0 * t.var_c / t.omega).sqrt().clamp(2e-5, 0.19);
    let (rho1, rho2) = if model == StructuralModel::TwoSvj { (-0.3, 0.0) } else { (0.0, 0.0) };
    StructuralParams {
        kappa1,
        kappa2: 1.0,
        omega: t.omega,
        vol1,
        vol2: 0.0,
        rho1,
        rho2,
        lambda: t.lambda,
        mu_j: t.mu_j,
        sigma_j: t.sigma_j,
        two_factor: true,
        drift: sim::DriftMode::Zero,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IIResult {
    pub model: StructuralModel,
    pub params: StructuralParams,
    pub targets: Targets,
    pub estimates: Vec<NamedValue>,
    pub chi2: f64,
    /// Data-side auxiliary statistics with HAC standard errors.
    pub auxiliary: Vec<NamedValue>,
    /// Replica mean of the auxiliary statistics at the estimate.
    pub implied: Vec<NamedValue>,
    pub replicas: usize,
    pub survived: usize,
    pub seed: u64,
    pub evals: usize,
    pub converged: bool,
    pub trace: Vec<TracePoint>,
}

impl IIResult {
    pub fn implied_aux(&self) -> Vec<f64> {
        self.implied.iter().map(|v| v.value).collect()
    }
}

/// Sandwich covariance (1 + 1/S)(D'ΩD)⁻¹ with a central-difference binding
/// derivative D.
pub fn standard_errors(problem: &IIProblem, theta: &[f64]) -> Result<Vec<f64>> {
    let m = problem.data.values.len();
    let k = theta.len();
    let bounds = problem.bounds();
    let mut dmat = DMatrix::<f64>::zeros(m, k);
    for j in 0..k {
        let h = 1e-3 * theta[j].abs().max(1e-3);
        let mut up = theta.to_vec();
        let mut dn = theta.to_vec();
        up[j] = (theta[j] + h).min(bounds[j].hi);
        dn[j] = (theta[j] - h).max(bounds[j].lo);
        let bu = problem.binding(&up)?;
        let bd = problem.binding(&dn)?;
        for i in 0..m {
            dmat[(i, j)] = (bu.mean[i] - bd.mean[i]) / (up[j] - dn[j]);
        }
    }
    let info = dmat.transpose() * &problem.weight * &dmat;
    let s = problem.config.replicas as f64;
    let cov = info.try_inverse().ok_or_else(|| Error::RankDeficient { columns: problem.names().iter().map(|s| s.to_string()).collect() })?
        * (1.0 + 1.0 / s);
    Ok((0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect())
}

pub fn estimate(problem: &IIProblem) -> Result<IIResult> {
    let theta0 = problem.theta0();
    let bounds = problem.bounds();
    if problem.params(&theta0).is_err() {
        return Err(Error::TargetingInfeasible(format!("infeasible starting point {theta0:?}")));
    }
    let objective = |th: &[f64]| -> f64 {
        match problem.chi_square(th) {
            Ok(v) => v,
            Err(e) => {
                log::debug!("chi-square undefined at {th:?}: {e}");
                f64::INFINITY
            }
        }
    };
    let m = problem.config.optimizer.minimize(objective, &theta0, &bounds);
    if !m.converged {
        log::warn!("indirect inference stopped after {} evaluations without meeting tolerances", m.evals);
    }
    let theta = m.x.clone();
    let params = problem.params(&theta)?;
    let binding = problem.binding(&theta)?;
    let se = standard_errors(problem, &theta)?;
    let data_se: Vec<f64> = (0..problem.data.values.len()).map(|i| problem.data_cov[(i, i)].sqrt()).collect();
    Ok(IIResult {
        model: problem.config.model,
        params,
        targets: problem.targets,
        estimates: problem
            .names()
            .iter()
            .zip(&theta)
            .zip(&se)
            .map(|((n, v), s)| NamedValue { name: n.to_string(), value: *v, std_error: Some(*s) })
            .collect(),
        chi2: problem.distance(&binding.mean),
        auxiliary: problem
            .data
            .names
            .iter()
            .zip(&problem.data.values)
            .zip(&data_se)
            .map(|((n, v), s)| NamedValue { name: n.clone(), value: *v, std_error: Some(*s) })
            .collect(),
        implied: problem
            .data
            .names
            .iter()
            .zip(&binding.mean)
            .map(|(n, v)| NamedValue { name: n.clone(), value: *v, std_error: None })
            .collect(),
        replicas: problem.config.replicas,
        survived: binding.survived,
        seed: problem.config.seed,
        evals: m.evals,
        converged: m.converged,
        trace: m.trace,
    })
}
