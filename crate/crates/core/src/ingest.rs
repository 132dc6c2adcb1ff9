//! Tick loading, contract rolling, intraday bar sampling and daily returns.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    /// UTC, truncated to microseconds.
    pub timestamp: NaiveDateTime,
    pub price: f64,
    pub volume: f64,
    pub contract: String,
}

/// Header names of the tick file columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub timestamp: String,
    pub price: String,
    pub volume: String,
    /// When the column is absent from the file, the file stem is used as the contract id.
    pub contract: String,
    pub delimiter: char,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            timestamp: "timestamp".into(),
            price: "price".into(),
            volume: "volume".into(),
            contract: "contract".into(),
            delimiter: ',',
        }
    }
}

/// Trading session, open inclusive and close exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Session {
    pub open: NaiveTime,
    pub close: NaiveTime,
}

impl Session {
    pub fn new(open: NaiveTime, close: NaiveTime) -> Result<Self> {
        if close <= open {
            return Err(Error::InvalidInput(format!("session close {close} not after open {open}")));
        }
        Ok(Session { open, close })
    }

    pub fn contains(&self, t: NaiveTime) -> bool {
        t >= self.open && t < self.close
    }

    pub fn length(&self) -> Duration {
        self.close - self.open
    }
}

impl Default for Session {
    fn default() -> Self {
        Session {
            open: NaiveTime::from_hms_opt(7, 0, 0).unwrap(),
            close: NaiveTime::from_hms_opt(17, 0, 0).unwrap(),
        }
    }
}

impl std::str::FromStr for Session {
    type Err = Error;

    /// Parses `HH:MM-HH:MM`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("session `{s}` is not of the form HH:MM-HH:MM"));
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        let open = NaiveTime::parse_from_str(a.trim(), "%H:%M").map_err(|_| bad())?;
        let close = NaiveTime::parse_from_str(b.trim(), "%H:%M").map_err(|_| bad())?;
        Session::new(open, close)
    }
}

impl std::fmt::Display for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.open.format("%H:%M"), self.close.format("%H:%M"))
    }
}

#[derive(Debug)]
pub struct TickLoad {
    pub records: Vec<TickRecord>,
    pub row_errors: Vec<Error>,
    pub out_of_session: usize,
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    let ts = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        dt.naive_utc()
    } else {
        ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M"]
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())?
    };
    let micros = ts.nanosecond() / 1_000 * 1_000;
    ts.with_nanosecond(micros)
}

/// Reads one delimited tick file. Rows whose contract id does not start with
/// `contract_filter` are skipped; trades outside `session` are dropped.
pub fn load_ticks(path: &Path, contract_filter: &str, columns: &ColumnMap, session: &Session) -> Result<TickLoad> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(columns.delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| Error::Row {
        path: path.to_path_buf(),
        line: 1,
        message: format!("header lacks column `{name}`"),
    };
    let ts_col = find(&columns.timestamp).ok_or_else(|| missing(&columns.timestamp))?;
    let px_col = find(&columns.price).ok_or_else(|| missing(&columns.price))?;
    let vol_col = find(&columns.volume);
    let ct_col = find(&columns.contract);
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();

    let mut records = Vec::new();
    let mut row_errors = Vec::new();
    let mut out_of_session = 0;
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                row_errors.push(Error::Row { path: path.to_path_buf(), line, message: e.to_string() });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| Error::Row { path: path.to_path_buf(), line, message };
        let contract = match ct_col {
            Some(c) => row.get(c).unwrap_or("").to_string(),
            None => stem.clone(),
        };
        if !contract.starts_with(contract_filter) {
            continue;
        }
        let raw_ts = row.get(ts_col).unwrap_or("");
        let Some(timestamp) = parse_timestamp(raw_ts) else {
            row_errors.push(row_err(format!("bad timestamp `{raw_ts}`")));
            continue;
        };
        let raw_px = row.get(px_col).unwrap_or("");
        let price = match raw_px.parse::<f64>() {
            Ok(p) if p.is_finite() && p > 0.0 => p,
            _ => {
                row_errors.push(row_err(format!("bad price `{raw_px}`")));
                continue;
            }
        };
        let volume = match vol_col.map(|c| row.get(c).unwrap_or("")) {
            None | Some("") => 0.0,
            Some(v) => match v.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => v,
                _ => {
                    row_errors.push(row_err(format!("bad volume `{v}`")));
                    continue;
                }
            },
        };
        if !session.contains(timestamp.time()) {
            out_of_session += 1;
            continue;
        }
        records.push(TickRecord { timestamp, price, volume, contract });
    }
    if records.is_empty() {
        return Err(Error::EmptyData(format!("no in-session ticks in {}", path.display())));
    }
    records.sort_by_key(|r| r.timestamp);
    Ok(TickLoad { records, row_errors, out_of_session })
}

/// Ordered (contract, last inclusion date) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollCalendar {
    pub first_date: Option<NaiveDate>,
    pub entries: Vec<(String, NaiveDate)>,
}

impl RollCalendar {
    pub fn new(first_date: Option<NaiveDate>, entries: Vec<(String, NaiveDate)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("roll calendar has no entries".into()));
        }
        for w in entries.windows(2) {
            if w[1].1 <= w[0].1 {
                return Err(Error::InvalidInput(format!(
                    "roll calendar dates must increase strictly: {} then {}",
                    w[0].1, w[1].1
                )));
            }
        }
        Ok(RollCalendar { first_date, entries })
    }

    /// Builds the calendar from expiry dates, switching to the next contract
    /// the day before expiry.
    pub fn from_expiries(first_date: Option<NaiveDate>, expiries: Vec<(String, NaiveDate)>) -> Result<Self> {
        let entries = expiries.into_iter().map(|(c, e)| (c, e - Duration::days(2))).collect();
        Self::new(first_date, entries)
    }

    /// CSV with header `contract,last_date` or `contract,expiry`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers = reader.headers()?.clone();
        let expiry_mode = match headers.get(1) {
            Some("last_date") => false,
            Some("expiry") => true,
            _ => {
                return Err(Error::Row {
                    path: path.to_path_buf(),
                    line: 1,
                    message: "calendar header must be `contract,last_date` or `contract,expiry`".into(),
                })
            }
        };
        let mut entries = Vec::new();
        for row in reader.records() {
            let row = row?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let date = NaiveDate::parse_from_str(row.get(1).unwrap_or(""), "%Y-%m-%d").map_err(|e| Error::Row {
                path: path.to_path_buf(),
                line,
                message: format!("bad date: {e}"),
            })?;
            entries.push((row.get(0).unwrap_or("").to_string(), date));
        }
        if expiry_mode {
            Self::from_expiries(None, entries)
        } else {
            Self::new(None, entries)
        }
    }

    pub fn contract_for(&self, date: NaiveDate) -> Result<&str> {
        if self.first_date.is_some_and(|f| date < f) {
            return Err(Error::CalendarGap(date));
        }
        self.entries
            .iter()
            .find(|(_, last)| date <= *last)
            .map(|(c, _)| c.as_str())
            .ok_or(Error::CalendarGap(date))
    }
}

/// Keeps, for every trading day, only the ticks of the contract the calendar
/// assigns to that day. Prices are not back-adjusted.
pub fn roll_series(ticks: &[TickRecord], calendar: &RollCalendar) -> Result<Vec<TickRecord>> {
    let days: BTreeSet<NaiveDate> = ticks.iter().map(|t| t.timestamp.date()).collect();
    for d in &days {
        calendar.contract_for(*d)?;
    }
    let mut out: Vec<TickRecord> = ticks
        .iter()
        .filter(|t| calendar.contract_for(t.timestamp.date()).map(|c| c == t.contract).unwrap_or(false))
        .cloned()
        .collect();
    out.sort_by_key(|r| r.timestamp);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayBars {
    pub date: NaiveDate,
    pub contract: String,
    /// Log price of the day's first trade; anchor of the first return.
    pub open_log: f64,
    /// Log close of each interval.
    pub log_close: Vec<f64>,
    pub returns: Vec<f64>,
    pub n_trades: usize,
    pub low_liquidity: bool,
}

impl DayBars {
    pub fn close_log(&self) -> f64 {
        *self.log_close.last().unwrap_or(&self.open_log)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarPanel {
    pub bar_minutes: u32,
    pub intervals: usize,
    pub days: Vec<DayBars>,
}

pub fn intervals_per_day(bar_minutes: u32, session: &Session) -> Result<usize> {
    let width = i64::from(bar_minutes) * 60;
    let len = session.length().num_seconds();
    if bar_minutes == 0 || len % width != 0 {
        return Err(Error::InvalidInput(format!(
            "bar width of {bar_minutes} minutes does not divide the session {session}"
        )));
    }
    Ok((len / width) as usize)
}

/// Interval index of an in-session timestamp.
pub fn cell_of(t: NaiveTime, bar_minutes: u32, session: &Session) -> Option<usize> {
    if !session.contains(t) {
        return None;
    }
    let us = (t - session.open).num_microseconds()?;
    Some((us / (i64::from(bar_minutes) * 60_000_000)) as usize)
}

/// Last-trade sampling on a regular grid. Empty intervals carry the previous
/// close; intervals before the first trade carry the first trade price.
pub fn to_bars(ticks: &[TickRecord], bar_minutes: u32, session: &Session) -> Result<BarPanel> {
    let m = intervals_per_day(bar_minutes, session)?;
    let mut days = Vec::new();
    let mut start = 0;
    while start < ticks.len() {
        let date = ticks[start].timestamp.date();
        let mut end = start;
        while end < ticks.len() && ticks[end].timestamp.date() == date {
            end += 1;
        }
        let day: Vec<&TickRecord> = ticks[start..end]
            .iter()
            .filter(|t| session.contains(t.timestamp.time()))
            .collect();
        start = end;
        if day.is_empty() {
            log::warn!("{date}: no trades in session, day omitted");
            continue;
        }
        let mut last: Vec<Option<f64>> = vec![None; m];
        for t in &day {
            let j = cell_of(t.timestamp.time(), bar_minutes, session).expect("filtered to session");
            last[j] = Some(t.price.ln());
        }
        let open_log = day[0].price.ln();
        let mut log_close = Vec::with_capacity(m);
        let mut returns = Vec::with_capacity(m);
        let mut prev = open_log;
        for cell in last {
            let c = cell.unwrap_or(prev);
            log_close.push(c);
            returns.push(c - prev);
            prev = c;
        }
        days.push(DayBars {
            date,
            contract: day[0].contract.clone(),
            open_log,
            log_close,
            returns,
            n_trades: day.len(),
            low_liquidity: day.len() < 2,
        });
    }
    if days.is_empty() {
        return Err(Error::EmptyData("no trading day with in-session trades".into()));
    }
    Ok(BarPanel { bar_minutes, intervals: m, days })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyReturn {
    pub date: NaiveDate,
    pub r: f64,
    /// True when no same-contract previous close exists (first day, roll day):
    /// r is then the intraday open-to-close return and the overnight leg is dropped.
    pub intraday_only: bool,
}

pub fn daily_returns(panel: &BarPanel) -> Result<Vec<DailyReturn>> {
    if panel.days.len() < 2 {
        return Err(Error::InvalidInput("daily returns need at least two days".into()));
    }
    let mut out = Vec::with_capacity(panel.days.len());
    for (i, d) in panel.days.iter().enumerate() {
        let prev = i.checked_sub(1).map(|k| &panel.days[k]).filter(|p| p.contract == d.contract);
        out.push(match prev {
            Some(p) => DailyReturn { date: d.date, r: d.close_log() - p.close_log(), intraday_only: false },
            None => DailyReturn { date: d.date, r: d.close_log() - d.open_log, intraday_only: true },
        });
    }
    Ok(out)
}

/// One row per (date, interval).
pub fn write_bars(path: &Path, panel: &BarPanel) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = String::new();
    writeln!(w, "date,interval,contract,log_close,ret").map_err(|e| Error::io(path, e))?;
    for d in &panel.days {
        for (j, (c, r)) in d.log_close.iter().zip(&d.returns).enumerate() {
            line.clear();
            let _ = writeln!(line, "{},{},{},{},{}", d.date, j, d.contract, c, r);
            w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_day_summary(path: &Path, panel: &BarPanel, returns: &[DailyReturn]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "date,contract,n_trades,low_liquidity,open_log,close_log,r,intraday_only").map_err(io)?;
    for (d, r) in panel.days.iter().zip(returns) {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            d.date,
            d.contract,
            d.n_trades,
            d.low_liquidity,
            d.open_log,
            d.close_log(),
            r.r,
            r.intraday_only
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a bars file written by [`write_bars`]. Trade counts are not stored
/// there, so `n_trades` is zero and `low_liquidity` false on the result.
pub fn read_bars(path: &Path) -> Result<BarPanel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut days: Vec<DayBars> = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Row { path: path.to_path_buf(), line, message };
        if row.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", row.len())));
        }
        let date = NaiveDate::parse_from_str(&row[0], "%Y-%m-%d").map_err(|e| bad(format!("bad date: {e}")))?;
        let j: usize = row[1].parse().map_err(|_| bad("bad interval".into()))?;
        let c: f64 = row[3].parse().map_err(|_| bad("bad log_close".into()))?;
        let r: f64 = row[4].parse().map_err(|_| bad("bad ret".into()))?;
        if days.last().map(|d| d.date) != Some(date) {
            if j != 0 {
                return Err(bad(format!("day {date} does not start at interval 0")));
            }
            days.push(DayBars {
                date,
                contract: row[2].to_string(),
                open_log: c - r,
                log_close: Vec::new(),
                returns: Vec::new(),
                n_trades: 0,
                low_liquidity: false,
            });
        }
        let d = days.last_mut().unwrap();
        if j != d.returns.len() {
            return Err(bad(format!("interval {j} out of order on {date}")));
        }
        d.log_close.push(c);
        d.returns.push(r);
    }
    let Some(first) = days.first() else {
        return Err(Error::EmptyData(format!("{} holds no bars", path.display())));
    };
    let m = first.returns.len();
    if let Some(d) = days.iter().find(|d| d.returns.len() != m) {
        return Err(Error::InvalidInput(format!("{}: {} has {} intervals, expected {m}", path.display(), d.date, d.returns.len())));
    }
    Ok(BarPanel { bar_minutes: 0, intervals: m, days })
}
