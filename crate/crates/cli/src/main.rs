use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use carbonvol::har::ModelKind;
use carbonvol::indirect::{self, IIProblem, IIResult, StructuralModel};
use carbonvol::ingest::{self, RollCalendar, Session};
use carbonvol::pipeline::{self, HarConfig, PipelineConfig, PremiaArtifact, RunOptions, Stage};
use carbonvol::pricing::{self, OptionKind, OptionQuote};
use carbonvol::realized::{self, Units};
use carbonvol::sim::{self, SimConfig, StructuralParams};

#[derive(Parser, Debug)]
#[command(name = "carbonvol", version, about = "Realized measures, HAR fits, indirect inference and option pricing for carbon futures")]
struct Cli {
    /// Pipeline configuration (TOML); supplies defaults for every verb.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the pipeline artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Log level: error, warn, info, debug.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Ticks to a rolled five-minute return panel.
    Ingest(IngestArgs),
    /// Realized measures and jump decomposition per day.
    Rv(RvArgs),
    /// HAR-family regression with Newey–West covariance.
    Har(HarArgs),
    /// Simulate intraday paths of the structural model.
    Simulate(SimulateArgs),
    /// Indirect-inference estimation of the structural model.
    Estimate(EstimateArgs),
    /// Calibrate risk premia to option quotes.
    Calibrate(CalibrateArgs),
    /// Price one option under calibrated premia.
    Price(PriceArgs),
    /// Write the report from the artifacts in the output directory.
    Report,
    /// Run the pipeline stages in order.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Tick file glob pattern; repeatable.
    #[arg(long, required = true)]
    ticks: Vec<String>,
    #[arg(long)]
    calendar: Option<PathBuf>,
    #[arg(long)]
    bar_minutes: Option<u32>,
    /// HH:MM-HH:MM
    #[arg(long)]
    session: Option<String>,
    #[arg(long)]
    contract_filter: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Daily summary; defaults to days.csv beside --out.
    #[arg(long)]
    days_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RvArgs {
    #[arg(long)]
    bars: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    ctau: Option<f64>,
    #[arg(long)]
    ctheta: Option<f64>,
    /// Keep intraday-only variance levels.
    #[arg(long)]
    no_rescale: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HarArgs {
    #[arg(long)]
    measures: PathBuf,
    /// har, lhar, lhar-cj or ar22; repeatable.
    #[arg(long = "model", default_value = "lhar-cj")]
    models: Vec<ModelKind>,
    #[arg(long, default_value_t = 1)]
    h: usize,
    #[arg(long)]
    oos_from: Option<chrono::NaiveDate>,
    #[arg(long)]
    nw_lag: Option<usize>,
    /// natural or daily-percent
    #[arg(long, default_value = "daily-percent")]
    units: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON parameter file, or the preset `2sv` / `2svj`.
    #[arg(long, default_value = "2svj")]
    params: String,
    #[arg(long, default_value_t = 1283)]
    days: usize,
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[arg(long, default_value_t = 120)]
    intervals: usize,
    #[arg(long, default_value_t = 5)]
    substeps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    measures: PathBuf,
    #[arg(long)]
    model: Option<StructuralModel>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    max_evals: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    iiresult: PathBuf,
    #[arg(long)]
    quotes: PathBuf,
    #[arg(long)]
    measures: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PriceArgs {
    #[arg(long)]
    premia: PathBuf,
    /// e.g. "C,K=30,F=28,tau=90d"; tau in calendar days (d) or years (y).
    #[arg(long, required = true)]
    quote: Vec<String>,
    /// Continuous daily variance of the valuation day, natural units;
    /// defaults to the last sample day in the premia file.
    #[arg(long)]
    variance: Option<f64>,
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Comma-separated subset of ingest,rv,har,estimate,calibrate,report.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<Stage>>,
    /// Re-run stages whose inputs are unchanged.
    #[arg(long)]
    force: bool,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(out: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if out == "-" {
        std::io::stdout().write_all(text.as_bytes())?;
    } else {
        std::fs::write(out, text).with_context(|| format!("writing {out}"))?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_units(s: &str) -> Result<Units> {
    match s {
        "natural" => Ok(Units::Natural),
        "daily-percent" | "percent" => Ok(Units::DailyPercent),
        _ => bail!("unknown units `{s}` (natural, daily-percent)"),
    }
}

/// Parses `C,K=30,F=28,tau=90d`.
fn parse_quote(s: &str) -> Result<OptionQuote> {
    let mut parts = s.split(',').map(str::trim);
    let kind: OptionKind = parts.next().ok_or_else(|| anyhow!("empty quote"))?.parse()?;
    let (mut k, mut f, mut tau) = (None, None, None);
    for p in parts {
        let (key, val) = p.split_once('=').ok_or_else(|| anyhow!("`{p}` is not key=value"))?;
        match key.to_ascii_lowercase().as_str() {
            "k" => k = Some(val.parse::<f64>()?),
            "f" => f = Some(val.parse::<f64>()?),
            "tau" => {
                let days = if let Some(v) = val.strip_suffix('d') {
                    v.parse::<f64>()?
                } else if let Some(v) = val.strip_suffix('y') {
                    v.parse::<f64>()? * pricing::CALENDAR_DAYS
                } else {
                    val.parse::<f64>()?
                };
                tau = Some(days);
            }
            _ => bail!("unknown quote field `{key}` (K, F, tau)"),
        }
    }
    let q = OptionQuote {
        date: None,
        kind,
        strike: k.ok_or_else(|| anyhow!("quote needs K"))?,
        futures: f.ok_or_else(|| anyhow!("quote needs F"))?,
        tau_days: tau.ok_or_else(|| anyhow!("quote needs tau"))?,
        price: f64::NAN,
        iv: None,
    };
    if !(q.strike > 0.0 && q.futures > 0.0 && q.tau_days > 0.0) {
        bail!("K, F and tau must be positive");
    }
    Ok(q)
}

fn load_params(spec: &str) -> Result<StructuralParams> {
    match spec {
        "2sv" => Ok(StructuralParams::two_sv()),
        "2svj" => Ok(StructuralParams::two_svj()),
        path => read_json(Path::new(path)),
    }
}

fn cmd_ingest(cfg: &PipelineConfig, a: &IngestArgs) -> Result<()> {
    let session: Session = a.session.as_deref().unwrap_or(&cfg.ingest.session).parse()?;
    let bar_minutes = a.bar_minutes.unwrap_or(cfg.ingest.bar_minutes);
    let filter = a.contract_filter.as_deref().unwrap_or(&cfg.data.contract_filter);
    let data_cfg = PipelineConfig {
        data: pipeline::DataConfig { ticks: a.ticks.clone(), ..cfg.data.clone() },
        ..cfg.clone()
    };
    let files = data_cfg.tick_files()?;
    let mut ticks = Vec::new();
    for f in &files {
        let load = ingest::load_ticks(f, filter, &cfg.data.columns, &session)?;
        for e in &load.row_errors {
            log::warn!("{e}");
        }
        ticks.extend(load.records);
    }
    let rolled = match a.calendar.as_ref().or(cfg.data.calendar.as_ref()) {
        Some(c) => ingest::roll_series(&ticks, &RollCalendar::from_csv(c)?)?,
        None => {
            ticks.sort_by_key(|t| t.timestamp);
            ticks
        }
    };
    let panel = ingest::to_bars(&rolled, bar_minutes, &session)?;
    let returns = ingest::daily_returns(&panel)?;
    ingest::write_bars(&a.out, &panel)?;
    let days_out = a.days_out.clone().unwrap_or_else(|| a.out.with_file_name(pipeline::DAYS));
    ingest::write_day_summary(&days_out, &panel, &returns)?;
    eprintln!("{} days, {} intervals per day, {} ticks used", panel.days.len(), panel.intervals, rolled.len());
    Ok(())
}

fn cmd_rv(cfg: &PipelineConfig, a: &RvArgs) -> Result<()> {
    let mut mc = cfg.measures;
    if let Some(x) = a.alpha {
        mc.threshold.alpha = x;
    }
    if let Some(x) = a.ctau {
        mc.threshold.c_tau = x;
    }
    if let Some(x) = a.ctheta {
        mc.threshold.c_theta = x;
    }
    mc.no_rescale |= a.no_rescale;
    let panel = ingest::read_bars(&a.bars)?;
    let returns = ingest::daily_returns(&panel)?;
    let run = realized::compute_measures(&panel, &returns, &mc)?;
    realized::write_measures(&a.out, &run.days)?;
    eprintln!(
        "{} days, {} with jumps, {} cleaned, rescale {:.4}",
        run.days.len(),
        run.days.iter().filter(|d| d.rejected()).count(),
        run.cleaned,
        run.rescale
    );
    Ok(())
}

fn cmd_har(cfg: &PipelineConfig, a: &HarArgs) -> Result<()> {
    let days = realized::read_measures(&a.measures)?;
    let hc = HarConfig {
        models: a.models.clone(),
        horizon: a.h,
        units: parse_units(&a.units)?,
        nw_lag: a.nw_lag.or(cfg.har.nw_lag),
        oos_from: a.oos_from.or(cfg.har.oos_from),
        smearing: cfg.har.smearing,
    };
    let fit = pipeline::fit_har_models(&days, &hc)?;
    write_json(&a.out.to_string_lossy(), &fit)
}

fn cmd_simulate(cfg: &PipelineConfig, a: &SimulateArgs) -> Result<()> {
    let params = load_params(&a.params)?;
    let sc = SimConfig {
        days: a.days,
        intervals: a.intervals,
        substeps: a.substeps,
        replicas: a.replicas,
        seed: cfg.seed,
        ..SimConfig::default()
    };
    let results = sim::simulate(&params, &sc)?;
    let mut paths = Vec::new();
    for (s, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => paths.push(p),
            Err(e) => log::warn!("replica {s} failed: {e}"),
        }
    }
    pipeline::write_simulation(&a.out, &params, &sc, &paths)?;
    eprintln!("{} of {} replicas written to {}", paths.len(), a.replicas, a.out.display());
    Ok(())
}

fn cmd_estimate(cfg: &PipelineConfig, a: &EstimateArgs) -> Result<()> {
    let days = realized::read_measures(&a.measures)?;
    let mut ii = cfg.estimate.clone();
    ii.seed = cfg.seed;
    if let Some(m) = a.model {
        ii.model = m;
    }
    if let Some(s) = a.replicas {
        ii.replicas = s;
    }
    if let Some(n) = a.max_evals {
        ii.optimizer.max_evals = n;
    }
    let problem = IIProblem::new(&days, ii)?;
    let result = indirect::estimate(&problem)?;
    for v in &result.estimates {
        eprintln!("{:<8} {:>12.4e}  s.e. {:.3e}", v.name, v.value, v.std_error.unwrap_or(f64::NAN));
    }
    write_json(&a.out.to_string_lossy(), &result)
}

fn cmd_calibrate(cfg: &PipelineConfig, a: &CalibrateArgs) -> Result<()> {
    let ii: IIResult = read_json(&a.iiresult)?;
    let quotes = pricing::read_quotes(&a.quotes)?;
    let days = realized::read_measures(&a.measures)?;
    let art = pipeline::calibrate_quotes(&quotes, &days, &ii, &cfg.calibrate)?;
    let p = art.calibration.premia;
    eprintln!("phi {:.4e} psi1 {:.4e} psi2 {:.4e} f_obj {:.4e}", p.phi, p.psi1, p.psi2, art.calibration.f_obj);
    write_json(&a.out.to_string_lossy(), &art)
}

#[derive(serde::Serialize)]
struct Priced {
    kind: OptionKind,
    strike: f64,
    futures: f64,
    tau_days: f64,
    moneyness: f64,
    price: f64,
    iv: Option<f64>,
    state: Vec<f64>,
}

fn cmd_price(a: &PriceArgs) -> Result<()> {
    let art: PremiaArtifact = read_json(&a.premia)?;
    let c = a.variance.unwrap_or(art.state_c);
    let state = pricing::split_state(c, &art.params.factors());
    let q = pricing::risk_neutralize(&art.params, &art.calibration.premia)?.with_rates(art.pricer.r, art.pricer.q);
    let mut out = Vec::new();
    for spec in &a.quote {
        let quote = parse_quote(spec).with_context(|| format!("quote `{spec}`"))?;
        let price = pricing::fourier_price(&quote, &q, &state, &art.pricer)?;
        let iv = pricing::implied_vol(price, quote.kind, quote.futures, quote.strike, quote.year_fraction(), art.pricer.r, &art.pricer).ok();
        out.push(Priced {
            kind: quote.kind,
            strike: quote.strike,
            futures: quote.futures,
            tau_days: quote.tau_days,
            moneyness: quote.moneyness(),
            price,
            iv,
            state: state.clone(),
        });
    }
    write_json(&a.out, &out)
}

fn cmd_run(cfg: &PipelineConfig, stages: &[Stage], force: bool) -> Result<()> {
    let m = pipeline::run_pipeline(cfg, stages, RunOptions { force })?;
    for r in &m.stages {
        eprintln!("{:<10} {:?}", r.stage.name(), r.status);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Ingest(a) => cmd_ingest(&cfg, a).context("stage ingest"),
        Cmd::Rv(a) => cmd_rv(&cfg, a).context("stage rv"),
        Cmd::Har(a) => cmd_har(&cfg, a).context("stage har"),
        Cmd::Simulate(a) => cmd_simulate(&cfg, a).context("stage simulate"),
        Cmd::Estimate(a) => cmd_estimate(&cfg, a).context("stage estimate"),
        Cmd::Calibrate(a) => cmd_calibrate(&cfg, a).context("stage calibrate"),
        Cmd::Price(a) => cmd_price(a).context("stage price"),
        Cmd::Report => cmd_run(&cfg, &[Stage::Report], true),
        Cmd::Run(a) => cmd_run(&cfg, a.stages.as_deref().unwrap_or(&Stage::ALL), a.force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quote_spec_parses() {
        let q = parse_quote("C,K=30,F=28,tau=90d").unwrap();
        assert_eq!((q.kind, q.strike, q.futures, q.tau_days), (OptionKind::Call, 30.0, 28.0, 90.0));
        let q = parse_quote("put, k=25, f=28, tau=0.5y").unwrap();
        assert_eq!(q.kind, OptionKind::Put);
        assert_eq!(q.tau_days, 182.5);
        assert!(parse_quote("C,K=30,F=28").is_err());
        assert!(parse_quote("X,K=30,F=28,tau=1d").is_err());
        assert!(parse_quote("C,K=-1,F=28,tau=1d").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
