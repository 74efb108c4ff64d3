//! Raw TVL observations: parsing, validation and alignment onto a uniform
//! time grid.
//!
//! A [`TvlRecord`] is one `(protocol, chain, token, timestamp)` observation
//! carrying the token amount and its USD value. Records are parsed from CSV
//! or JSON, rejected rows are reported with their line numbers, and the
//! surviving records are sampled onto a grid `t0, t0 + interval, ...` by
//! [`align`].

mod synth;

pub use synth::{synth_dataset, synth_metadata, Shock, SynthConfig, SynthMetadata};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// UTC seconds since the Unix epoch.
pub type Timestamp = i64;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Weekly snapshots.
pub const DEFAULT_INTERVAL: i64 = 7 * SECONDS_PER_DAY;

pub const CSV_HEADER: [&str; 6] = [
    "protocol_id",
    "chain_id",
    "token_id",
    "timestamp",
    "amount",
    "usd_value",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TvlRecord {
    pub protocol_id: String,
    pub chain_id: String,
    pub token_id: String,
    pub timestamp: Timestamp,
    pub amount: Decimal,
    pub usd_value: Decimal,
}

impl TvlRecord {
    fn key(&self) -> (&str, &str, &str, Timestamp) {
        (
            &self.protocol_id,
            &self.chain_id,
            &self.token_id,
            self.timestamp,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Csv,
    Json,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(InputFormat::Csv),
            "json" => Ok(InputFormat::Json),
            other => Err(Error::Config(format!("unknown record format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    FieldCount,
    MissingField,
    InvalidTimestamp,
    InvalidNumber,
    NegativeAmount,
    NegativeUsdValue,
    DuplicateKey,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let code = match self {
            RejectReason::FieldCount => "field_count",
            RejectReason::MissingField => "missing_field",
            RejectReason::InvalidTimestamp => "invalid_timestamp",
            RejectReason::InvalidNumber => "invalid_number",
            RejectReason::NegativeAmount => "negative_amount",
            RejectReason::NegativeUsdValue => "negative_usd_value",
            RejectReason::DuplicateKey => "duplicate_key",
        };
        f.write_str(code)
    }
}

/// One rejected input row. For CSV `line` is the 1-based physical line; for
/// JSON it is the 1-based position of the element in the top-level array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: u64,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub records: Vec<TvlRecord>,
    pub rejections: Vec<Rejection>,
}

impl ParseReport {
    fn push(&mut self, seen: &mut HashSet<(String, String, String, Timestamp)>, line: u64, row: Result<TvlRecord, (RejectReason, String)>) {
        match row {
            Ok(rec) => {
                let (p, c, x, t) = rec.key();
                if seen.insert((p.to_owned(), c.to_owned(), x.to_owned(), t)) {
                    self.records.push(rec);
                } else {
                    self.rejections.push(Rejection {
                        line,
                        reason: RejectReason::DuplicateKey,
                        detail: format!("duplicate ({p}, {c}, {x}, {t})"),
                    });
                }
            }
            Err((reason, detail)) => self.rejections.push(Rejection {
                line,
                reason,
                detail,
            }),
        }
    }
}

/// Parses a record stream. Row-level problems land in
/// [`ParseReport::rejections`]; only an unreadable stream or a wrong CSV
/// header is fatal.
pub fn parse_records<R: Read>(source: R, format: InputFormat) -> Result<ParseReport> {
    match format {
        InputFormat::Csv => parse_csv(source),
        InputFormat::Json => parse_json(source),
    }
}

fn parse_csv<R: Read>(source: R) -> Result<ParseReport> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let mut report = ParseReport::default();
    // An empty stream has no header; that is the vacuous empty dataset.
    let header = match reader.headers() {
        Ok(h) => h.clone(),
        Err(err) => return Err(err.into()),
    };
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Ok(report);
    }
    let names: Vec<&str> = header.iter().collect();
    if names != CSV_HEADER {
        return Err(Error::Format(format!(
            "expected header `{}`, found `{}`",
            CSV_HEADER.join(","),
            names.join(",")
        )));
    }

    let mut seen = HashSet::new();
    let mut row = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut row)?;
        if !more {
            break;
        }
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let parsed = if row.len() != CSV_HEADER.len() {
            Err((
                RejectReason::FieldCount,
                format!("expected 6 fields, found {}", row.len()),
            ))
        } else {
            record_from_fields(&row[0], &row[1], &row[2], &row[3], &row[4], &row[5])
        };
        report.push(&mut seen, line, parsed);
    }
    Ok(report)
}

fn parse_json<R: Read>(mut source: R) -> Result<ParseReport> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let mut report = ParseReport::default();
    if text.trim().is_empty() {
        return Ok(report);
    }
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let items = value
        .as_array()
        .ok_or_else(|| Error::Format("expected a JSON array of records".into()))?;

    let mut seen = HashSet::new();
    for (i, item) in items.iter().enumerate() {
        let parsed = json_row(item);
        report.push(&mut seen, i as u64 + 1, parsed);
    }
    Ok(report)
}

fn json_row(item: &serde_json::Value) -> Result<TvlRecord, (RejectReason, String)> {
    let obj = item
        .as_object()
        .ok_or((RejectReason::FieldCount, "element is not an object".to_owned()))?;
    let field = |name: &str| -> Result<String, (RejectReason, String)> {
        match obj.get(name) {
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
            Some(other) => Err((RejectReason::InvalidNumber, format!("{name}: unexpected {other}"))),
            None => Err((RejectReason::MissingField, format!("missing `{name}`"))),
        }
    };
    record_from_fields(
        &field("protocol_id")?,
        &field("chain_id")?,
        &field("token_id")?,
        &field("timestamp")?,
        &field("amount")?,
        &field("usd_value")?,
    )
}

fn parse_decimal(name: &str, raw: &str) -> Result<Decimal, (RejectReason, String)> {
    Decimal::from_str(raw)
        .or_else(|_| Decimal::from_scientific(raw))
        .map_err(|_| (RejectReason::InvalidNumber, format!("{name}: `{raw}`")))
}

fn record_from_fields(
    protocol: &str,
    chain: &str,
    token: &str,
    timestamp: &str,
    amount: &str,
    usd_value: &str,
) -> Result<TvlRecord, (RejectReason, String)> {
    for (name, v) in [("protocol_id", protocol), ("chain_id", chain), ("token_id", token)] {
        if v.is_empty() {
            return Err((RejectReason::MissingField, format!("empty `{name}`")));
        }
    }
    let timestamp: Timestamp = timestamp
        .parse()
        .map_err(|_| (RejectReason::InvalidTimestamp, format!("`{timestamp}`")))?;
    let amount = parse_decimal("amount", amount)?;
    let usd_value = parse_decimal("usd_value", usd_value)?;
    if amount.is_sign_negative() && !amount.is_zero() {
        return Err((RejectReason::NegativeAmount, format!("amount {amount}")));
    }
    if usd_value.is_sign_negative() && !usd_value.is_zero() {
        return Err((RejectReason::NegativeUsdValue, format!("usd_value {usd_value}")));
    }
    Ok(TvlRecord {
        protocol_id: protocol.to_owned(),
        chain_id: chain.to_owned(),
        token_id: token.to_owned(),
        timestamp,
        amount,
        usd_value,
    })
}

/// Serializes records in the same layout [`parse_records`] accepts.
pub fn write_records<W: Write>(records: &[TvlRecord], sink: W, format: InputFormat) -> Result<()> {
    match format {
        InputFormat::Csv => {
            let mut w = csv::Writer::from_writer(sink);
            w.write_record(CSV_HEADER)?;
            for r in records {
                w.write_record([
                    r.protocol_id.as_str(),
                    r.chain_id.as_str(),
                    r.token_id.as_str(),
                    &r.timestamp.to_string(),
                    &r.amount.to_string(),
                    &r.usd_value.to_string(),
                ])?;
            }
            w.flush()?;
        }
        InputFormat::Json => {
            let mut sink = sink;
            serde_json::to_writer(&mut sink, records)?;
            sink.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Identifies one time series: a token held by a protocol on a chain.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub protocol_id: String,
    pub chain_id: String,
    pub token_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub amount: Decimal,
    pub usd_value: Decimal,
    /// Timestamp of the raw record this sample was taken from.
    pub observed_at: Timestamp,
}

/// Every series sampled on the shared grid `start + k * interval` for
/// `k in 0..len`. `None` marks a gap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedStateTable {
    pub start: Timestamp,
    pub interval: i64,
    pub tolerance: i64,
    pub len: usize,
    pub series: BTreeMap<SeriesKey, Vec<Option<Sample>>>,
}

impl AlignedStateTable {
    pub fn grid_time(&self, index: usize) -> Timestamp {
        self.start + index as i64 * self.interval
    }

    pub fn grid_times(&self) -> impl Iterator<Item = Timestamp> + '_ {
        (0..self.len).map(|k| self.grid_time(k))
    }

    /// Grid index of `t`, if `t` is a grid point.
    pub fn index_of(&self, t: Timestamp) -> Option<usize> {
        let offset = t - self.start;
        if offset < 0 || offset % self.interval != 0 {
            return None;
        }
        let k = (offset / self.interval) as usize;
        (k < self.len).then_some(k)
    }

    pub fn protocols(&self) -> BTreeSet<&str> {
        self.series.keys().map(|k| k.protocol_id.as_str()).collect()
    }

    pub fn tokens(&self) -> BTreeSet<&str> {
        self.series.keys().map(|k| k.token_id.as_str()).collect()
    }

    pub fn chains(&self) -> BTreeSet<&str> {
        self.series.keys().map(|k| k.chain_id.as_str()).collect()
    }

    /// USD value of every token `protocol` holds at grid index `index`,
    /// summed across chains. Tokens with no sample on any chain are absent.
    pub fn token_values(&self, protocol: &str, index: usize) -> BTreeMap<String, Decimal> {
        let mut out = BTreeMap::new();
        for (key, series) in self.protocol_series(protocol) {
            if let Some(Some(s)) = series.get(index) {
                *out.entry(key.token_id.clone()).or_insert(Decimal::ZERO) += s.usd_value;
            }
        }
        out
    }

    /// Chain-wise aggregate at one grid point: total USD value on each chain
    /// across all protocols and tokens.
    pub fn chain_totals(&self, index: usize) -> BTreeMap<String, Decimal> {
        let mut out = BTreeMap::new();
        for (key, series) in &self.series {
            if let Some(Some(s)) = series.get(index) {
                *out.entry(key.chain_id.clone()).or_insert(Decimal::ZERO) += s.usd_value;
            }
        }
        out
    }

    fn protocol_series<'a>(
        &'a self,
        protocol: &'a str,
    ) -> impl Iterator<Item = (&'a SeriesKey, &'a Vec<Option<Sample>>)> + 'a {
        let lo = SeriesKey {
            protocol_id: protocol.to_owned(),
            chain_id: String::new(),
            token_id: String::new(),
        };
        self.series
            .range(lo..)
            .take_while(move |(k, _)| k.protocol_id == protocol)
    }
}

/// Grid layout for [`align_with_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub start: Timestamp,
    pub interval: i64,
    pub tolerance: i64,
    pub len: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.interval <= 0 {
            return Err(Error::Config(format!(
                "interval must be positive, got {}",
                self.interval
            )));
        }
        if self.tolerance < 0 || 2 * self.tolerance >= self.interval {
            return Err(Error::Config(format!(
                "tolerance must satisfy 0 <= tolerance < interval/2, got {} for interval {}",
                self.tolerance, self.interval
            )));
        }
        Ok(())
    }
}

/// Aligns records on a grid that starts at the earliest record and extends
/// to cover the latest one.
pub fn align(records: &[TvlRecord], interval: i64, tolerance: i64) -> Result<AlignedStateTable> {
    let probe = GridSpec {
        start: 0,
        interval,
        tolerance,
        len: 0,
    };
    probe.validate()?;
    let Some(first) = records.iter().map(|r| r.timestamp).min() else {
        return align_with_grid(records, probe);
    };
    let last = records.iter().map(|r| r.timestamp).max().unwrap_or(first);
    let len = ((last - first + tolerance) / interval) as usize + 1;
    align_with_grid(
        records,
        GridSpec {
            start: first,
            interval,
            tolerance,
            len,
        },
    )
}

/// For each series and grid point, keeps the record nearest in time within
/// the tolerance window. Equidistant records resolve to the earlier one.
pub fn align_with_grid(records: &[TvlRecord], grid: GridSpec) -> Result<AlignedStateTable> {
    grid.validate()?;
    let mut series: BTreeMap<SeriesKey, Vec<Option<Sample>>> = BTreeMap::new();

    for rec in records {
        let offset = rec.timestamp - grid.start;
        // Nearest grid index; the tolerance is below half an interval so at
        // most one grid point can claim a record.
        let k = (offset as f64 / grid.interval as f64).round() as i64;
        if k < 0 || k as usize >= grid.len {
            continue;
        }
        let grid_t = grid.start + k * grid.interval;
        let dist = (rec.timestamp - grid_t).abs();
        if dist > grid.tolerance {
            continue;
        }
        let key = SeriesKey {
            protocol_id: rec.protocol_id.clone(),
            chain_id: rec.chain_id.clone(),
            token_id: rec.token_id.clone(),
        };
        let slot = &mut series.entry(key).or_insert_with(|| vec![None; grid.len])[k as usize];
        let candidate = Sample {
            amount: rec.amount,
            usd_value: rec.usd_value,
            observed_at: rec.timestamp,
        };
        let replace = match slot {
            None => true,
            Some(cur) => {
                let cur_dist = (cur.observed_at - grid_t).abs();
                dist < cur_dist || (dist == cur_dist && rec.timestamp < cur.observed_at)
            }
        };
        if replace {
            *slot = Some(candidate);
        }
    }

    Ok(AlignedStateTable {
        start: grid.start,
        interval: grid.interval,
        tolerance: grid.tolerance,
        len: grid.len,
        series,
    })
}

/// Parses a duration such as `7d`, `12h`, `30m`, `45s` or a bare number of
/// seconds.
pub fn parse_duration(text: &str) -> Result<i64> {
    let text = text.trim();
    let (digits, unit) = match text.char_indices().find(|(_, c)| !c.is_ascii_digit()) {
        Some((i, _)) => text.split_at(i),
        None => (text, "s"),
    };
    let n: i64 = digits
        .parse()
        .map_err(|_| Error::Config(format!("bad duration `{text}`")))?;
    let scale = match unit {
        "s" => 1,
        "m" => 60,
        "h" => 3_600,
        "d" => SECONDS_PER_DAY,
        "w" => 7 * SECONDS_PER_DAY,
        _ => return Err(Error::Config(format!("bad duration unit in `{text}`"))),
    };
    Ok(n * scale)
}
