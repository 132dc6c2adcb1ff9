//! Stage orchestration: one TOML configuration, flat CSV/JSON artifacts per
//! stage, a run manifest with content hashes, and the report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Days, NaiveDate, NaiveTime, Utc, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::har::{self, HarSpec, InSample, ModelKind, OutOfSample};
use crate::indirect::{self, IIConfig, IIProblem, IIResult, NamedValue, StructuralModel};
use crate::ingest::{self, ColumnMap, RollCalendar, Session};
use crate::optim::NelderMead;
use crate::pricing::{
    self, Calibration, CalibrationConfig, CosPricer, OptionKind, OptionQuote, PricerConfig, RiskPremia, RmseTable,
    MATURITY_BUCKETS, MONEYNESS_BUCKETS,
};
use crate::realized::{self, DayMeasures, MeasureConfig, Units};
use crate::sim::{self, ReplicaPath, SimConfig, StructuralParams};
use crate::stats;

pub const BARS: &str = "bars.csv";
pub const DAYS: &str = "days.csv";
pub const INGEST_SUMMARY: &str = "ingest.json";
pub const MEASURES: &str = "measures.csv";
pub const RV_SUMMARY: &str = "rv.json";
pub const FIT: &str = "fit.json";
pub const IIRESULT: &str = "iiresult.json";
pub const PREMIA: &str = "premia.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const HAR_TABLE: &str = "har_table.csv";
pub const II_TABLE: &str = "ii_table.csv";
pub const RMSE_TABLE: &str = "rmse_table.csv";
pub const SERIES: &str = "series.csv";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Rv,
    Har,
    Estimate,
    Calibrate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Ingest, Stage::Rv, Stage::Har, Stage::Estimate, Stage::Calibrate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Rv => "rv",
            Stage::Har => "har",
            Stage::Estimate => "estimate",
            Stage::Calibrate => "calibrate",
            Stage::Report => "report",
        }
    }

    /// Artifacts of earlier stages that must exist. The report reads
    /// whatever is present.
    pub fn requires(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest | Stage::Report => &[],
            Stage::Rv => &[BARS],
            Stage::Har | Stage::Estimate => &[MEASURES],
            Stage::Calibrate => &[IIRESULT, MEASURES],
        }
    }

    pub fn produces(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[BARS, DAYS, INGEST_SUMMARY],
            Stage::Rv => &[MEASURES, RV_SUMMARY],
            Stage::Har => &[FIT],
            Stage::Estimate => &[IIRESULT],
            Stage::Calibrate => &[PREMIA],
            Stage::Report => &[REPORT_JSON, REPORT_TXT, HAR_TABLE, II_TABLE, RMSE_TABLE, SERIES],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidInput(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Glob patterns of tick files.
    pub ticks: Vec<String>,
    pub calendar: Option<PathBuf>,
    pub quotes: Option<PathBuf>,
    pub contract_filter: String,
    pub columns: ColumnMap,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { ticks: Vec::new(), calendar: None, quotes: None, contract_filter: String::new(), columns: ColumnMap::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub bar_minutes: u32,
    /// `HH:MM-HH:MM`, UTC.
    pub session: String,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { bar_minutes: 5, session: Session::default().to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarConfig {
    pub models: Vec<ModelKind>,
    /// Forecast horizon h of the response, days.
    pub horizon: usize,
    pub units: Units,
    pub nw_lag: Option<usize>,
    /// First forecast origin of the expanding-window evaluation.
    pub oos_from: Option<NaiveDate>,
    pub smearing: bool,
}

impl Default for HarConfig {
    fn default() -> Self {
        HarConfig {
            models: vec![ModelKind::Ar22, ModelKind::Har, ModelKind::Lhar, ModelKind::LharCj],
            horizon: 1,
            units: Units::DailyPercent,
            nw_lag: None,
            oos_from: None,
            smearing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub pricer: PricerConfig,
    pub calibration: CalibrationConfig,
    /// Hold φ at zero when the model has neither jumps nor leverage.
    pub fix_unidentified_phi: bool,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig { pricer: PricerConfig::default(), calibration: CalibrationConfig::default(), fix_unidentified_phi: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed of every stochastic stage.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub ingest: IngestConfig,
    pub measures: MeasureConfig,
    pub har: HarConfig,
    /// The seed field is replaced by the global seed.
    pub estimate: IIConfig,
    pub calibrate: CalibrateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            ingest: IngestConfig::default(),
            measures: MeasureConfig::default(),
            har: HarConfig::default(),
            estimate: IIConfig::default(),
            calibrate: CalibrateConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken from the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.out_dir = resolve(base, &self.out_dir);
        self.data.calendar = self.data.calendar.as_deref().map(|p| resolve(base, p));
        self.data.quotes = self.data.quotes.as_deref().map(|p| resolve(base, p));
        self.data.ticks = self
            .data
            .ticks
            .iter()
            .map(|t| resolve(base, Path::new(t)).to_string_lossy().into_owned())
            .collect();
    }

    pub fn session(&self) -> Result<Session> {
        self.ingest.session.parse()
    }

    /// Tick files matched by the configured patterns, sorted.
    pub fn tick_files(&self) -> Result<Vec<PathBuf>> {
        let mut out = BTreeSet::new();
        for pat in &self.data.ticks {
            let paths = glob::glob(pat).map_err(|e| Error::Config(format!("bad tick pattern `{pat}`: {e}")))?;
            for p in paths {
                out.insert(p.map_err(|e| Error::Config(e.to_string()))?);
            }
        }
        if out.is_empty() {
            return Err(Error::Config(format!("no tick file matches {:?}", self.data.ticks)));
        }
        Ok(out.into_iter().collect())
    }

    /// Checks the settings and input files the given stages use.
    pub fn validate(&self, stages: &[Stage]) -> Result<()> {
        let exists = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} {} does not exist", p.display())))
            }
        };
        if stages.contains(&Stage::Ingest) {
            self.session()?;
            ingest::intervals_per_day(self.ingest.bar_minutes, &self.session()?)?;
            self.tick_files()?;
            if let Some(c) = &self.data.calendar {
                exists(c, "calendar")?;
            }
        }
        if stages.contains(&Stage::Rv) {
            self.measures.threshold.validate()?;
        }
        if stages.contains(&Stage::Estimate) && self.estimate.replicas == 0 {
            return Err(Error::Config("estimate.replicas must be positive".into()));
        }
        if stages.contains(&Stage::Calibrate) {
            self.calibrate.pricer.validate()?;
            if let Some(q) = &self.data.quotes {
                exists(q, "quotes file")?;
            }
        }
        Ok(())
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    /// Inputs and configuration unchanged since the recorded run.
    Cached,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub config_hash: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started: String,
    pub finished: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    /// Artifact name to content hash, over all recorded stages.
    pub fn output_hashes(&self) -> BTreeMap<String, String> {
        self.stages.iter().flat_map(|r| r.outputs.iter().map(|h| (h.path.clone(), h.sha256.clone()))).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Re-run stages even when their inputs are unchanged.
    pub force: bool,
}

fn stage_config_hash(cfg: &PipelineConfig, stage: Stage) -> Result<String> {
    let v = match stage {
        Stage::Ingest => serde_json::json!({
            "ticks": cfg.data.ticks,
            "calendar": cfg.data.calendar,
            "contract_filter": cfg.data.contract_filter,
            "columns": cfg.data.columns,
            "ingest": cfg.ingest,
        }),
        Stage::Rv => serde_json::to_value(cfg.measures)?,
        Stage::Har => serde_json::to_value(&cfg.har)?,
        Stage::Estimate => serde_json::json!({ "estimate": cfg.estimate, "seed": cfg.seed }),
        Stage::Calibrate => serde_json::json!({ "calibrate": cfg.calibrate, "quotes": cfg.data.quotes }),
        Stage::Report => serde_json::Value::Null,
    };
    Ok(sha256_bytes(serde_json::to_string(&v)?.as_bytes()))
}

fn stage_inputs(cfg: &PipelineConfig, stage: Stage) -> Result<Vec<PathBuf>> {
    let out = &cfg.out_dir;
    Ok(match stage {
        Stage::Ingest => {
            let mut v = cfg.tick_files()?;
            v.extend(cfg.data.calendar.clone());
            v
        }
        Stage::Rv => vec![out.join(BARS)],
        Stage::Har | Stage::Estimate => vec![out.join(MEASURES)],
        Stage::Calibrate => {
            let mut v = vec![out.join(IIRESULT), out.join(MEASURES)];
            v.extend(cfg.data.quotes.clone());
            v
        }
        Stage::Report => [INGEST_SUMMARY, BARS, DAYS, MEASURES, RV_SUMMARY, FIT, IIRESULT, PREMIA]
            .iter()
            .map(|f| out.join(f))
            .filter(|p| p.exists())
            .collect(),
    })
}

fn hash_files(paths: &[PathBuf], base: Option<&Path>) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            let name = base.and_then(|b| p.strip_prefix(b).ok()).unwrap_or(p);
            Ok(FileHash { path: name.to_string_lossy().into_owned(), sha256: sha256_file(p)? })
        })
        .collect()
}

fn outputs_match(out: &Path, recorded: &[FileHash]) -> bool {
    !recorded.is_empty()
        && recorded.iter().all(|h| {
            let p = out.join(&h.path);
            p.exists() && sha256_file(&p).map(|s| s == h.sha256).unwrap_or(false)
        })
}

/// Runs the requested stages in dependency order and writes the manifest.
/// A stage whose inputs and configuration match the previous manifest and
/// whose outputs are intact is not re-run.
pub fn run_pipeline(cfg: &PipelineConfig, stages: &[Stage], opts: RunOptions) -> Result<RunManifest> {
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    cfg.validate(&stages)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let previous = RunManifest::read(&out).unwrap_or_else(|e| {
        log::warn!("ignoring unreadable manifest: {e}");
        None
    });
    let mut records: BTreeMap<Stage, StageRecord> =
        previous.map(|m| m.stages.into_iter().map(|r| (r.stage, r)).collect()).unwrap_or_default();
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        stages: Vec::new(),
    };
    let mut failure = None;
    for &stage in &stages {
        let started = Utc::now().to_rfc3339();
        match run_stage(cfg, stage, records.get(&stage), opts) {
            Ok(mut rec) => {
                rec.started = started;
                rec.finished = Utc::now().to_rfc3339();
                log::info!("stage {stage}: {:?}", rec.status);
                records.insert(stage, rec);
            }
            Err(e) => {
                records.insert(
                    stage,
                    StageRecord {
                        stage,
                        status: StageStatus::Failed,
                        config_hash: stage_config_hash(cfg, stage).unwrap_or_default(),
                        inputs: Vec::new(),
                        outputs: Vec::new(),
                        started,
                        finished: Utc::now().to_rfc3339(),
                        message: Some(e.to_string()),
                    },
                );
                failure = Some(match e {
                    e @ Error::MissingDependency { .. } => e,
                    e => Error::Stage { stage: stage.to_string(), source: Box::new(e) },
                });
                break;
            }
        }
    }
    manifest.stages = records.into_values().collect();
    write_json(&out.join(MANIFEST), &manifest)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

fn run_stage(cfg: &PipelineConfig, stage: Stage, previous: Option<&StageRecord>, opts: RunOptions) -> Result<StageRecord> {
    let out = &cfg.out_dir;
    for req in stage.requires() {
        let p = out.join(req);
        if !p.exists() {
            return Err(Error::MissingDependency { stage: stage.to_string(), path: p });
        }
    }
    let config_hash = stage_config_hash(cfg, stage)?;
    let inputs = hash_files(&stage_inputs(cfg, stage)?, Some(out))?;
    let mut rec = StageRecord {
        stage,
        status: StageStatus::Completed,
        config_hash,
        inputs,
        outputs: Vec::new(),
        started: String::new(),
        finished: String::new(),
        message: None,
    };
    if let Some(prev) = previous {
        let same = matches!(prev.status, StageStatus::Completed | StageStatus::Cached)
            && prev.config_hash == rec.config_hash
            && prev.inputs == rec.inputs
            && outputs_match(out, &prev.outputs);
        if same && !opts.force {
            rec.status = StageStatus::Cached;
            rec.outputs = prev.outputs.clone();
            return Ok(rec);
        }
    }
    let produced: Vec<&str> = match stage {
        Stage::Ingest => stage_ingest(cfg)?,
        Stage::Rv => stage_rv(cfg)?,
        Stage::Har => stage_har(cfg)?,
        Stage::Estimate => stage_estimate(cfg)?,
        Stage::Calibrate => match stage_calibrate(cfg)? {
            Some(v) => v,
            None => {
                rec.status = StageStatus::Skipped;
                rec.message = Some("no option quotes configured".into());
                Vec::new()
            }
        },
        Stage::Report => stage_report(cfg)?,
    };
    let paths: Vec<PathBuf> = produced.iter().map(|f| out.join(f)).collect();
    rec.outputs = hash_files(&paths, Some(out))?;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub files: usize,
    pub ticks_loaded: usize,
    pub row_errors: usize,
    pub out_of_session: usize,
    /// In-session ticks of the contracts the calendar selects.
    pub ticks_used: usize,
    pub days: usize,
    pub intervals: usize,
    pub low_liquidity_days: usize,
    pub first_date: NaiveDate,
    pub last_date: NaiveDate,
}

fn stage_ingest(cfg: &PipelineConfig) -> Result<Vec<&'static str>> {
    let session = cfg.session()?;
    let files = cfg.tick_files()?;
    let mut ticks = Vec::new();
    let (mut row_errors, mut out_of_session) = (0, 0);
    for f in &files {
        let load = ingest::load_ticks(f, &cfg.data.contract_filter, &cfg.data.columns, &session)?;
        for e in &load.row_errors {
            log::warn!("{e}");
        }
        row_errors += load.row_errors.len();
        out_of_session += load.out_of_session;
        ticks.extend(load.records);
    }
    let loaded = ticks.len();
    let rolled = match &cfg.data.calendar {
        Some(p) => ingest::roll_series(&ticks, &RollCalendar::from_csv(p)?)?,
        None => {
            let contracts: BTreeSet<&str> = ticks.iter().map(|t| t.contract.as_str()).collect();
            if contracts.len() > 1 {
                return Err(Error::Config(format!(
                    "ticks of {} contracts and no roll calendar configured",
                    contracts.len()
                )));
            }
            ticks.sort_by_key(|t| t.timestamp);
            ticks
        }
    };
    let panel = ingest::to_bars(&rolled, cfg.ingest.bar_minutes, &session)?;
    let returns = ingest::daily_returns(&panel)?;
    let out = &cfg.out_dir;
    ingest::write_bars(&out.join(BARS), &panel)?;
    ingest::write_day_summary(&out.join(DAYS), &panel, &returns)?;
    let summary = IngestSummary {
        files: files.len(),
        ticks_loaded: loaded,
        row_errors,
        out_of_session,
        ticks_used: rolled.len(),
        days: panel.days.len(),
        intervals: panel.intervals,
        low_liquidity_days: panel.days.iter().filter(|d| d.low_liquidity).count(),
        first_date: panel.days[0].date,
        last_date: panel.days[panel.days.len() - 1].date,
    };
    write_json(&out.join(INGEST_SUMMARY), &summary)?;
    Ok(Stage::Ingest.produces().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvSummary {
    pub days: usize,
    pub rescale: f64,
    pub cleaned: usize,
    pub capped: usize,
    pub jump_days: usize,
}

fn stage_rv(cfg: &PipelineConfig) -> Result<Vec<&'static str>> {
    let out = &cfg.out_dir;
    let panel = ingest::read_bars(&out.join(BARS))?;
    let returns = ingest::daily_returns(&panel)?;
    let run = realized::compute_measures(&panel, &returns, &cfg.measures)?;
    realized::write_measures(&out.join(MEASURES), &run.days)?;
    let summary = RvSummary {
        days: run.days.len(),
        rescale: run.rescale,
        cleaned: run.cleaned,
        capped: run.capped,
        jump_days: run.days.iter().filter(|d| d.rejected()).count(),
    };
    write_json(&out.join(RV_SUMMARY), &summary)?;
    Ok(Stage::Rv.produces().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarModelFit {
    pub spec: HarSpec,
    pub fit: har::AuxiliaryFit,
    pub in_sample: InSample,
    pub out_of_sample: Option<OutOfSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarArtifact {
    pub units: Units,
    pub models: Vec<HarModelFit>,
}

pub fn fit_har_models(days: &[DayMeasures], cfg: &HarConfig) -> Result<HarArtifact> {
    let panel = realized::aggregate(days, cfg.units)?;
    let models = cfg
        .models
        .iter()
        .map(|&kind| {
            let spec = HarSpec { horizon: cfg.horizon, ..HarSpec::new(kind) };
            let fit = har::fit(&panel, &spec, cfg.nw_lag)?;
            let in_sample = har::in_sample_metrics(&fit);
            let out_of_sample = match cfg.oos_from {
                Some(_) if cfg.horizon != 1 => {
                    log::warn!("out-of-sample evaluation is one-day ahead only; skipped for h = {}", cfg.horizon);
                    None
                }
                Some(d) => Some(har::oos_losses(&har::forecast_oos(&panel, &spec, d, cfg.smearing)?)),
                None => None,
            };
            Ok(HarModelFit { spec, fit, in_sample, out_of_sample })
        })
        .collect::<Result<_>>()?;
    Ok(HarArtifact { units: cfg.units, models })
}

fn stage_har(cfg: &PipelineConfig) -> Result<Vec<&'static str>> {
    let days = realized::read_measures(&cfg.out_dir.join(MEASURES))?;
    write_json(&cfg.out_dir.join(FIT), &fit_har_models(&days, &cfg.har)?)?;
    Ok(vec![FIT])
}

fn stage_estimate(cfg: &PipelineConfig) -> Result<Vec<&'static str>> {
    let days = realized::read_measures(&cfg.out_dir.join(MEASURES))?;
    let ii = IIConfig { seed: cfg.seed, ..cfg.estimate.clone() };
    let problem = IIProblem::new(&days, ii)?;
    let result = indirect::estimate(&problem)?;
    write_json(&cfg.out_dir.join(IIRESULT), &result)?;
    Ok(vec![IIRESULT])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricedQuote {
    #[serde(flatten)]
    pub quote: OptionQuote,
    pub moneyness: f64,
    pub market_iv: f64,
    pub model_iv: f64,
    pub model_price: f64,
    pub state_date: NaiveDate,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiaArtifact {
    pub model: StructuralModel,
    pub params: StructuralParams,
    pub calibration: Calibration,
    /// (φ, ψ₁, ψ₂) read against daily-percentage variance units.
    pub daily_percent: (f64, f64, f64),
    pub lambda_star: f64,
    pub pricer: PricerConfig,
    /// Continuous variance of the last sample day, the default pricing state.
    pub state_date: NaiveDate,
    pub state_c: f64,
    pub rmse: RmseTable,
    pub quotes: Vec<PricedQuote>,
}

/// The measure day whose Ĉ conditions a quote: the quote date, else the
/// latest earlier day, else the last day of the sample.
pub fn state_day(days: &[DayMeasures], date: Option<NaiveDate>) -> &DayMeasures {
    let last = &days[days.len() - 1];
    match date {
        Some(d) => days.iter().rev().find(|m| m.date <= d).unwrap_or(&days[0]),
        None => last,
    }
}

pub fn calibrate_quotes(
    quotes: &[OptionQuote],
    days: &[DayMeasures],
    ii: &IIResult,
    cfg: &CalibrateConfig,
) -> Result<PremiaArtifact> {
    if days.is_empty() {
        return Err(Error::EmptyData("no measures for the pricing states".into()));
    }
    let params = ii.params;
    let factors = params.factors();
    let state_days: Vec<&DayMeasures> = quotes.iter().map(|q| state_day(days, q.date)).collect();
    let states: Vec<Vec<f64>> = state_days.iter().map(|d| pricing::split_state(d.c, &factors)).collect();
    let mut cal_cfg = cfg.calibration.clone();
    let unidentified = params.lambda == 0.0 && params.rho1 == 0.0 && params.rho2 == 0.0;
    if cfg.fix_unidentified_phi && unidentified && cal_cfg.fix_phi.is_none() {
        log::info!("no jumps and no leverage: phi is not identified and is held at 0");
        cal_cfg.fix_phi = Some(0.0);
    }
    let calibration = pricing::calibrate_premia(quotes, &params, &states, &cfg.pricer, &cal_cfg)?;
    let q = pricing::risk_neutralize(&params, &calibration.premia)?.with_rates(cfg.pricer.r, cfg.pricer.q);
    let prices = pricing::model_prices(quotes, &q, &states, &cfg.pricer)?;
    let model_iv = pricing::model_ivs(quotes, &q, &states, &cfg.pricer)?;
    let market_iv: Vec<f64> = quotes.iter().map(|x| pricing::market_iv(x, &cfg.pricer)).collect::<Result<_>>()?;
    let rmse = pricing::rmse_iv(quotes, &model_iv, &market_iv);
    let priced = quotes
        .iter()
        .enumerate()
        .map(|(i, x)| PricedQuote {
            quote: x.clone(),
            moneyness: x.moneyness(),
            market_iv: market_iv[i],
            model_iv: model_iv[i],
            model_price: prices[i],
            state_date: state_days[i].date,
            state: states[i].clone(),
        })
        .collect();
    let last = &days[days.len() - 1];
    Ok(PremiaArtifact {
        model: ii.model,
        params,
        daily_percent: calibration.premia.to_scaled(pricing::PremiaScale::DailyPercent),
        lambda_star: q.lambda,
        calibration,
        pricer: cfg.pricer.clone(),
        state_date: last.date,
        state_c: last.c,
        rmse,
        quotes: priced,
    })
}

fn stage_calibrate(cfg: &PipelineConfig) -> Result<Option<Vec<&'static str>>> {
    let out = &cfg.out_dir;
    let Some(quotes_path) = &cfg.data.quotes else {
        let stale = out.join(PREMIA);
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        return Ok(None);
    };
    let quotes = pricing::read_quotes(quotes_path)?;
    let days = realized::read_measures(&out.join(MEASURES))?;
    let ii: IIResult = read_json(&out.join(IIRESULT))?;
    let artifact = calibrate_quotes(&quotes, &days, &ii, &cfg.calibrate)?;
    write_json(&out.join(PREMIA), &artifact)?;
    Ok(Some(vec![PREMIA]))
}

/// Descriptive statistics with undefined moments reported as absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub skewness: Option<f64>,
    pub kurtosis: Option<f64>,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let d = stats::describe(xs);
        let f = |x: f64| x.is_finite().then_some(x);
        Summary {
            n: d.n,
            mean: f(d.mean),
            std: f(d.std),
            min: f(d.min),
            max: f(d.max),
            skewness: f(d.skewness),
            kurtosis: f(d.kurtosis),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptive {
    /// Returns ×100, variances ×100².
    pub units: String,
    pub days: usize,
    pub observations: Option<usize>,
    pub intraday_returns: Option<Summary>,
    pub daily_returns: Summary,
    pub rv: Summary,
    pub c: Summary,
    pub j: Summary,
    pub jump_days: usize,
    pub rescale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarColumn {
    pub model: ModelKind,
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub tstats: Vec<f64>,
    pub sigma2: f64,
    pub nobs: usize,
    pub in_sample: InSample,
    pub out_of_sample: Option<OutOfSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationSection {
    pub model: StructuralModel,
    pub estimates: Vec<NamedValue>,
    pub targeted: Vec<NamedValue>,
    pub chi2: f64,
    pub auxiliary: Vec<NamedValue>,
    pub implied: Vec<NamedValue>,
    pub replicas: usize,
    pub survived: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSection {
    pub phi: f64,
    pub psi1: f64,
    pub psi2: f64,
    pub daily_percent: (f64, f64, f64),
    pub f_obj: f64,
    pub f_obj_units: String,
    pub kappa_star: Vec<f64>,
    pub lambda_star: f64,
    pub quotes: usize,
    pub rmse: RmseTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub descriptive: Option<Descriptive>,
    pub har: Vec<HarColumn>,
    pub estimation: Option<EstimationSection>,
    pub calibration: Option<CalibrationSection>,
    pub notices: Vec<String>,
}

fn nv(name: &str, value: f64) -> NamedValue {
    NamedValue { name: name.into(), value, std_error: None }
}

pub fn build_report(out: &Path) -> Result<Report> {
    let mut notices = Vec::new();
    let measures = out.join(MEASURES);
    let days = if measures.exists() { Some(realized::read_measures(&measures)?) } else { None };
    let descriptive = match &days {
        Some(days) => {
            let pct = |f: &dyn Fn(&DayMeasures) -> f64, k: f64| Summary::of(&days.iter().map(|d| f(d) * k).collect::<Vec<_>>());
            let ingest: Option<IngestSummary> =
                if out.join(INGEST_SUMMARY).exists() { Some(read_json(&out.join(INGEST_SUMMARY))?) } else { None };
            let rv: Option<RvSummary> = if out.join(RV_SUMMARY).exists() { Some(read_json(&out.join(RV_SUMMARY))?) } else { None };
            let intraday = if out.join(BARS).exists() {
                let panel = ingest::read_bars(&out.join(BARS))?;
                let r: Vec<f64> = panel.days.iter().flat_map(|d| d.returns.iter().map(|x| x * 100.0)).collect();
                Some(Summary::of(&r))
            } else {
                None
            };
            Some(Descriptive {
                units: "returns x100, variances x100^2".into(),
                days: days.len(),
                observations: ingest.map(|i| i.ticks_used),
                intraday_returns: intraday,
                daily_returns: pct(&|d| d.r, 100.0),
                rv: pct(&|d| d.rv, 1e4),
                c: pct(&|d| d.c, 1e4),
                j: pct(&|d| d.j, 1e4),
                jump_days: days.iter().filter(|d| d.rejected()).count(),
                rescale: rv.map(|r| r.rescale),
            })
        }
        None => {
            notices.push("no realized measures: descriptive statistics omitted".into());
            None
        }
    };
    let har = if out.join(FIT).exists() {
        let fit: HarArtifact = read_json(&out.join(FIT))?;
        fit.models
            .into_iter()
            .map(|m| HarColumn {
                model: m.spec.kind,
                names: m.fit.names,
                coef: m.fit.coef,
                tstats: m.fit.tstats,
                sigma2: m.fit.sigma2,
                nobs: m.fit.nobs,
                in_sample: m.in_sample,
                out_of_sample: m.out_of_sample,
            })
            .collect()
    } else {
        notices.push("no HAR fits: HAR tables omitted".into());
        Vec::new()
    };
    let estimation = if out.join(IIRESULT).exists() {
        let r: IIResult = read_json(&out.join(IIRESULT))?;
        let mut targeted = vec![nv("omega", r.params.omega), nv("vol2", r.params.vol2)];
        if r.model == StructuralModel::TwoSvj {
            targeted.extend([nv("lambda", r.params.lambda), nv("mu_j", r.params.mu_j), nv("sigma_j", r.params.sigma_j)]);
        }
        Some(EstimationSection {
            model: r.model,
            estimates: r.estimates,
            targeted,
            chi2: r.chi2,
            auxiliary: r.auxiliary,
            implied: r.implied,
            replicas: r.replicas,
            survived: r.survived,
            converged: r.converged,
        })
    } else {
        notices.push("no indirect-inference result: estimation table omitted".into());
        None
    };
    let calibration = if out.join(PREMIA).exists() {
        let p: PremiaArtifact = read_json(&out.join(PREMIA))?;
        Some(CalibrationSection {
            phi: p.calibration.premia.phi,
            psi1: p.calibration.premia.psi1,
            psi2: p.calibration.premia.psi2,
            daily_percent: p.daily_percent,
            f_obj: p.calibration.f_obj,
            f_obj_units: p.calibration.f_obj_units,
            kappa_star: p.calibration.kappa_star,
            lambda_star: p.lambda_star,
            quotes: p.quotes.len(),
            rmse: p.rmse,
        })
    } else {
        notices.push("empty option set: calibration and pricing tables omitted".into());
        None
    };
    Ok(Report { descriptive, har, estimation, calibration, notices })
}

fn opt(x: Option<f64>, prec: usize) -> String {
    x.map(|v| format!("{v:.prec$}")).unwrap_or_else(|| "-".into())
}

fn sci(x: f64) -> String {
    format!("{x:.3e}")
}

pub fn render_text(r: &Report) -> String {
    let mut s = String::new();
    if let Some(d) = &r.descriptive {
        let _ = writeln!(s, "Descriptive statistics ({}; {} days)", d.units, d.days);
        if let Some(n) = d.observations {
            let _ = writeln!(s, "observations: {n}");
        }
        let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}", "", "mean", "std", "min", "max", "skew", "kurt");
        let mut row = |name: &str, x: &Summary| {
            let _ = writeln!(
                s,
                "{:<10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}",
                name,
                opt(x.mean, 4),
                opt(x.std, 4),
                opt(x.min, 4),
                opt(x.max, 4),
                opt(x.skewness, 2),
                opt(x.kurtosis, 2)
            );
        };
        if let Some(x) = &d.intraday_returns {
            row("intraday", x);
        }
        row("r_t", &d.daily_returns);
        row("RV", &d.rv);
        row("C", &d.c);
        row("J", &d.j);
        let _ = writeln!(s, "jump days: {}", d.jump_days);
        if let Some(k) = d.rescale {
            let _ = writeln!(s, "close-to-close rescale factor: {k:.4}");
        }
        s.push('\n');
    }
    let cols: Vec<&HarColumn> = r.har.iter().filter(|c| c.model != ModelKind::Ar22).collect();
    if !r.har.is_empty() {
        let _ = writeln!(s, "HAR-family regressions (t-statistics in parentheses)");
        let label = |m: ModelKind| match m {
            ModelKind::Har => "HAR",
            ModelKind::Lhar => "LHAR",
            ModelKind::LharCj => "LHAR-CJ",
            ModelKind::Ar22 => "AR(22)",
        };
        let mut names: Vec<&str> = Vec::new();
        for c in &cols {
            for n in &c.names {
                if !names.contains(&n.as_str()) {
                    names.push(n);
                }
            }
        }
        let _ = write!(s, "{:<10}", "");
        for c in &cols {
            let _ = write!(s, " {:>12}", label(c.model));
        }
        s.push('\n');
        for n in &names {
            let _ = write!(s, "{n:<10}");
            for c in &cols {
                let v = c.names.iter().position(|x| x == n).map(|i| format!("{:.3}", c.coef[i])).unwrap_or_default();
                let _ = write!(s, " {v:>12}");
            }
            s.push('\n');
            let _ = write!(s, "{:<10}", "");
            for c in &cols {
                let v = c.names.iter().position(|x| x == n).map(|i| format!("({:.2})", c.tstats[i])).unwrap_or_default();
                let _ = write!(s, " {v:>12}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "\nIn-sample fit");
        let _ = writeln!(s, "{:<10} {:>12} {:>12} {:>10} {:>6}", "", "AIC", "BIC", "adj R2", "n");
        for c in &r.har {
            let _ = writeln!(
                s,
                "{:<10} {:>12.2} {:>12.2} {:>10.3} {:>6}",
                label(c.model),
                c.in_sample.aic,
                c.in_sample.bic,
                c.in_sample.adj_r2,
                c.nobs
            );
        }
        if r.har.iter().any(|c| c.out_of_sample.is_some()) {
            let _ = writeln!(s, "\nOut-of-sample one-day forecasts");
            let _ = writeln!(s, "{:<10} {:>12} {:>12} {:>10} {:>10} {:>6}", "", "MSE", "MAE", "QLIKE", "MZ R2", "n");
            for c in &r.har {
                if let Some(o) = &c.out_of_sample {
                    let _ = writeln!(
                        s,
                        "{:<10} {:>12.4} {:>12.4} {:>10.4} {:>10.3} {:>6}",
                        label(c.model),
                        o.mse,
                        o.mae,
                        o.qlike,
                        o.mz_r2,
                        o.n_forecasts
                    );
                }
            }
        }
        s.push('\n');
    }
    if let Some(e) = &r.estimation {
        let model = match e.model {
            StructuralModel::TwoSv => "2-SV",
            StructuralModel::TwoSvj => "2-SVJ",
        };
        let _ = writeln!(s, "Indirect inference, {model} ({} of {} replicas)", e.survived, e.replicas);
        let _ = writeln!(s, "{:<10} {:>12} {:>12}", "", "estimate", "s.e.");
        for v in &e.estimates {
            let _ = writeln!(s, "{:<10} {:>12} {:>12}", v.name, sci(v.value), v.std_error.map(sci).unwrap_or_default());
        }
        for v in &e.targeted {
            let _ = writeln!(s, "{:<10} {:>12} {:>12}", format!("[{}]", v.name), sci(v.value), "");
        }
        let _ = writeln!(s, "chi2 {:.4}{}", e.chi2, if e.converged { "" } else { " (not converged)" });
        let _ = writeln!(s, "{:<10} {:>12} {:>12} {:>12}", "auxiliary", "estimated", "s.e.", "implied");
        for (a, b) in e.auxiliary.iter().zip(&e.implied) {
            let _ = writeln!(
                s,
                "{:<10} {:>12.4} {:>12} {:>12.4}",
                a.name,
                a.value,
                a.std_error.map(|x| format!("{x:.4}")).unwrap_or_default(),
                b.value
            );
        }
        s.push('\n');
    }
    match &r.calibration {
        Some(c) => {
            let _ = writeln!(s, "Risk premia ({} quotes)", c.quotes);
            let _ = writeln!(s, "phi {}  psi1 {}  psi2 {}", sci(c.phi), sci(c.psi1), sci(c.psi2));
            let (a, b, d) = c.daily_percent;
            let _ = writeln!(s, "daily-percentage reading: phi {}  psi1 {}  psi2 {}", sci(a), sci(b), sci(d));
            let ks: Vec<String> = c.kappa_star.iter().map(|k| sci(*k)).collect();
            let _ = writeln!(s, "kappa* {}  lambda* {}", ks.join(" "), sci(c.lambda_star));
            let _ = writeln!(s, "f_obj {:.4} ({})", c.f_obj, c.f_obj_units);
            let _ = writeln!(s, "\nRMSE_IV (x100)");
            let _ = write!(s, "{:<14}", "");
            for m in MONEYNESS_BUCKETS {
                let _ = write!(s, " {m:>14}");
            }
            let _ = writeln!(s, " {:>14}", "all");
            for (t, name) in MATURITY_BUCKETS.iter().enumerate() {
                let _ = write!(s, "{name:<14}");
                for m in 0..3 {
                    let _ = write!(s, " {:>14}", opt(c.rmse.cells[t][m], 2));
                }
                let _ = writeln!(s, " {:>14}", opt(c.rmse.by_maturity[t], 2));
            }
            let _ = write!(s, "{:<14}", "all");
            for m in 0..3 {
                let _ = write!(s, " {:>14}", opt(c.rmse.by_moneyness[m], 2));
            }
            let _ = writeln!(s, " {:>14}", opt(c.rmse.overall, 2));
        }
        None => {}
    }
    for n in &r.notices {
        let _ = writeln!(s, "note: {n}");
    }
    s
}

fn write_csv_rows(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut s = String::with_capacity(64 * rows.len());
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn o(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn stage_report(cfg: &PipelineConfig) -> Result<Vec<&'static str>> {
    let out = &cfg.out_dir;
    let report = build_report(out)?;
    write_json(&out.join(REPORT_JSON), &report)?;
    fs::write(out.join(REPORT_TXT), render_text(&report)).map_err(|e| Error::io(out.join(REPORT_TXT), e))?;
    let har_rows: Vec<String> = report
        .har
        .iter()
        .flat_map(|c| {
            let model = serde_json::to_value(c.model).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            c.names.iter().enumerate().map(move |(i, n)| format!("{model},{n},{},{}", c.coef[i], c.tstats[i]))
        })
        .collect();
    write_csv_rows(&out.join(HAR_TABLE), "model,name,coef,tstat", &har_rows)?;
    let mut ii_rows = Vec::new();
    if let Some(e) = &report.estimation {
        for v in &e.estimates {
            ii_rows.push(format!("estimate,{},{},{},", v.name, v.value, o(v.std_error)));
        }
        for v in &e.targeted {
            ii_rows.push(format!("targeted,{},{},,", v.name, v.value));
        }
        for (a, b) in e.auxiliary.iter().zip(&e.implied) {
            ii_rows.push(format!("auxiliary,{},{},{},{}", a.name, a.value, o(a.std_error), b.value));
        }
    }
    write_csv_rows(&out.join(II_TABLE), "kind,name,value,std_error,implied", &ii_rows)?;
    let mut rmse_rows = Vec::new();
    if let Some(c) = &report.calibration {
        for (t, tn) in MATURITY_BUCKETS.iter().enumerate() {
            for (m, mn) in MONEYNESS_BUCKETS.iter().enumerate() {
                rmse_rows.push(format!("{tn},{mn},{},{}", o(c.rmse.cells[t][m]), c.rmse.counts[t][m]));
            }
        }
    }
    write_csv_rows(&out.join(RMSE_TABLE), "maturity,moneyness,rmse_iv,count", &rmse_rows)?;
    let mut series = Vec::new();
    if out.join(MEASURES).exists() {
        let closes: BTreeMap<NaiveDate, f64> = if out.join(DAYS).exists() {
            let mut rdr = csv::Reader::from_path(out.join(DAYS))?;
            rdr.records()
                .filter_map(|r| r.ok())
                .filter_map(|r| Some((NaiveDate::parse_from_str(r.get(0)?, "%Y-%m-%d").ok()?, r.get(5)?.parse().ok()?)))
                .collect()
        } else {
            BTreeMap::new()
        };
        for d in realized::read_measures(&out.join(MEASURES))? {
            let price = closes.get(&d.date).map(|c: &f64| c.exp().to_string()).unwrap_or_default();
            series.push(format!("{},{},{},{},{},{},{},{}", d.date, price, d.r, d.rv, d.c, d.j, d.n_jumps, d.r_adj));
        }
    }
    write_csv_rows(&out.join(SERIES), "date,close,r,rv,c,j,n_jumps,r_adj", &series)?;
    Ok(Stage::Report.produces().to_vec())
}

/// Writes one directory per replica: intraday returns and the true daily
/// integrated variance, jump variation and jumps.
pub fn write_simulation(dir: &Path, params: &StructuralParams, cfg: &SimConfig, paths: &[ReplicaPath]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("params.json"), params)?;
    write_json(&dir.join("config.json"), cfg)?;
    for p in paths {
        let rd = dir.join(format!("replica_{:04}", p.replica));
        fs::create_dir_all(&rd).map_err(|e| Error::io(&rd, e))?;
        let mut rows = Vec::with_capacity(p.returns.len());
        for d in 0..p.days() {
            for (j, r) in p.day(d).iter().enumerate() {
                rows.push(format!("{d},{j},{r}"));
            }
        }
        write_csv_rows(&rd.join("returns.csv"), "day,interval,ret", &rows)?;
        let days: Vec<String> = (0..p.days())
            .map(|d| {
                let ev: Vec<String> = p.end_variance[d].iter().map(|v| v.to_string()).collect();
                format!("{d},{},{},{}", p.integrated_variance[d], p.jump_variation[d], ev.join(";"))
            })
            .collect();
        write_csv_rows(&rd.join("truth.csv"), "day,integrated_variance,jump_variation,end_variance", &days)?;
        let jumps: Vec<String> = p.jumps.iter().map(|j| format!("{},{},{}", j.day, j.interval, j.size)).collect();
        write_csv_rows(&rd.join("jumps.csv"), "day,interval,size", &jumps)?;
    }
    Ok(())
}

/// Synthetic end-to-end data set: ticks of two rolled December contracts
/// simulated from known parameters, a roll calendar, and option quotes
/// priced at known premia.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub days: usize,
    pub seed: u64,
    pub params: StructuralParams,
    pub premia: RiskPremia,
    /// Sample days on which quotes are written.
    pub quote_days: Vec<usize>,
    pub strikes: Vec<f64>,
    pub maturities: Vec<f64>,
    pub start: NaiveDate,
    pub initial_price: f64,
}

impl Default for Fixture {
    fn default() -> Self {
        Fixture {
            days: 300,
            seed: 11,
            params: StructuralParams::two_svj(),
            premia: RiskPremia { phi: -7.35e-3, psi1: 2.81e-3, psi2: 1.5e-2 },
            quote_days: vec![150, 220, 290],
            strikes: vec![0.8, 0.9, 1.0, 1.1, 1.2],
            maturities: vec![30.0, 90.0, 180.0],
            start: NaiveDate::from_ymd_opt(2019, 1, 2).expect("valid date"),
            initial_price: 25.0,
        }
    }
}

fn weekdays(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

impl Fixture {
    /// Writes the data set and a pipeline config under `dir`; returns the
    /// config path. Estimation settings are reduced to desk-test size.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let sim_cfg = SimConfig { days: self.days, seed: self.seed, ..SimConfig::default() };
        let path = sim::simulate_replica(&self.params, &sim_cfg, 0)?;
        let dates = weekdays(self.start, self.days);
        let contracts = [
            ("ECFZ19", NaiveDate::from_ymd_opt(2019, 12, 16).expect("valid date"), 0.0),
            ("ECFZ20", NaiveDate::from_ymd_opt(2020, 12, 14).expect("valid date"), 0.02),
            ("ECFZ21", NaiveDate::from_ymd_opt(2021, 12, 13).expect("valid date"), 0.04),
        ];
        let ticks_dir = dir.join("ticks");
        fs::create_dir_all(&ticks_dir).map_err(|e| Error::io(&ticks_dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7469_636b);
        let open = NaiveTime::from_hms_opt(7, 0, 0).expect("valid time");
        let mut texts: Vec<String> = contracts.iter().map(|_| "timestamp,price,volume,contract\n".to_string()).collect();
        let mut x = self.initial_price.ln();
        let mut closes = Vec::with_capacity(self.days);
        for (d, date) in dates.iter().enumerate() {
            let r = path.day(d);
            let mut cells = Vec::with_capacity(r.len() + 1);
            cells.push((open, x));
            let mut xi = x;
            for (j, ret) in r.iter().enumerate() {
                xi += ret;
                let secs = 5 * 60 * j as u32 + rng.random_range(5..295);
                cells.push((open + chrono::Duration::seconds(i64::from(secs)), xi));
            }
            for (c, (name, expiry, basis)) in contracts.iter().enumerate() {
                if date > expiry {
                    continue;
                }
                let t = &mut texts[c];
                let _ = writeln!(t, "{} 06:59:00,{},1,{name}", date, (x + basis).exp() * 1.5);
                for (k, (time, lx)) in cells.iter().enumerate() {
                    let _ = writeln!(t, "{} {},{},{},{name}", date, time.format("%H:%M:%S"), (lx + basis).exp(), 1 + k % 5);
                }
            }
            x = xi;
            closes.push(x);
        }
        for (c, (name, _, _)) in contracts.iter().enumerate() {
            let p = ticks_dir.join(format!("{name}.csv"));
            fs::write(&p, &texts[c]).map_err(|e| Error::io(&p, e))?;
        }
        let mut cal = String::from("contract,expiry\n");
        for (name, expiry, _) in &contracts {
            let _ = writeln!(cal, "{name},{expiry}");
        }
        fs::write(dir.join("calendar.csv"), cal).map_err(|e| Error::io(dir.join("calendar.csv"), e))?;

        let pricer = PricerConfig::default();
        let q = pricing::risk_neutralize(&self.params, &self.premia)?;
        let factors = self.params.factors();
        let mut quotes = Vec::new();
        for &d in &self.quote_days {
            let d = d.min(self.days - 1);
            let state = pricing::split_state(path.integrated_variance[d], &factors);
            let date = dates[d];
            let f = (closes[d]
                + contracts.iter().find(|(_, e, _)| date <= *e - Days::new(2)).map(|c| c.2).unwrap_or(0.0))
            .exp();
            for &tau in &self.maturities {
                let model_tau = tau * pricing::TRADING_DAYS / pricing::CALENDAR_DAYS;
                let cos = CosPricer::new(&q, &state, model_tau, &pricer)?;
                for &m in &self.strikes {
                    let kind = if m < 1.0 { OptionKind::Put } else { OptionKind::Call };
                    let strike = (m * f * 100.0).round() / 100.0;
                    quotes.push(OptionQuote {
                        date: Some(date),
                        kind,
                        strike,
                        futures: f,
                        tau_days: tau,
                        price: cos.price(kind, f, strike),
                        iv: None,
                    });
                }
            }
        }
        pricing::write_quotes(&dir.join("quotes.csv"), &quotes)?;

        let cfg = PipelineConfig {
            seed: self.seed,
            out_dir: PathBuf::from("out"),
            data: DataConfig {
                ticks: vec!["ticks/*.csv".into()],
                calendar: Some(PathBuf::from("calendar.csv")),
                quotes: Some(PathBuf::from("quotes.csv")),
                ..DataConfig::default()
            },
            har: HarConfig { oos_from: Some(dates[self.days * 4 / 5]), ..HarConfig::default() },
            estimate: IIConfig {
                model: if self.params.lambda > 0.0 { StructuralModel::TwoSvj } else { StructuralModel::TwoSv },
                replicas: 4,
                optimizer: NelderMead { max_evals: 40, xtol: 1e-3, ftol_abs: 1e-4, ftol_rel: 1e-4, step: 0.4, restarts: 0 },
                ..IIConfig::default()
            },
            calibrate: CalibrateConfig {
                calibration: CalibrationConfig {
                    simplex: NelderMead { max_evals: 120, ..CalibrationConfig::default().simplex },
                    ..CalibrationConfig::default()
                },
                ..CalibrateConfig::default()
            },
            ..PipelineConfig::default()
        };
        let path = dir.join("pipeline.toml");
        fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("fit".parse::<Stage>().is_err());
    }

    #[test]
    fn default_config_survives_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("seed = 1\nsede = 2\n").is_err());
        let cfg = PipelineConfig::from_toml_str("seed = 9\n[estimate]\nreplicas = 3\n").unwrap();
        assert_eq!((cfg.seed, cfg.estimate.replicas), (9, 3));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = PipelineConfig::from_toml_str("[data]\nticks = [\"t/*.csv\"]\ncalendar = \"cal.csv\"\n").unwrap();
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.data.calendar.unwrap(), PathBuf::from("/base/cal.csv"));
        assert_eq!(cfg.data.ticks[0], "/base/t/*.csv");
        assert_eq!(cfg.out_dir, PathBuf::from("/base/out"));
    }

    #[test]
    fn missing_bars_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig { out_dir: dir.path().to_path_buf(), ..PipelineConfig::default() };
        match run_pipeline(&cfg, &[Stage::Rv], RunOptions::default()) {
            Err(Error::MissingDependency { stage, path }) => {
                assert_eq!(stage, "rv");
                assert!(path.ends_with(BARS));
            }
            other => panic!("expected a dependency error, got {other:?}"),
        }
        let m = RunManifest::read(dir.path()).unwrap().unwrap();
        assert_eq!(m.record(Stage::Rv).unwrap().status, StageStatus::Failed);
    }

    #[test]
    fn summary_hides_undefined_moments() {
        let s = Summary::of(&[0.0, 0.0, 0.0]);
        assert_eq!(s.mean, Some(0.0));
        assert_eq!(s.skewness, None);
        let back: Summary = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn state_day_uses_latest_day_not_after_quote() {
        let mk = |d: u32, c: f64| DayMeasures {
            date: NaiveDate::from_ymd_opt(2020, 1, d).unwrap(),
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
        };
        let days = vec![mk(2, 1.0), mk(3, 2.0), mk(6, 3.0)];
        assert_eq!(state_day(&days, NaiveDate::from_ymd_opt(2020, 1, 5)).c, 2.0);
        assert_eq!(state_day(&days, NaiveDate::from_ymd_opt(2020, 1, 6)).c, 3.0);
        assert_eq!(state_day(&days, None).c, 3.0);
        assert_eq!(state_day(&days, NaiveDate::from_ymd_opt(2019, 1, 1)).c, 1.0);
    }
}
