//! Seeded synthetic TVL datasets with scheduled sector shocks.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rust_decimal::prelude::FromPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::{Timestamp, TvlRecord, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::sectors::Sector;

const CHAIN_NAMES: [&str; 5] = ["ethereum", "arbitrum", "polygon", "bsc", "avalanche"];

/// A multiplicative drop applied to every holding of every protocol in one
/// sector. At `date` values are `magnitude` times their trend; they recover
/// linearly to trend over `recovery_steps` further grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shock {
    pub date: NaiveDate,
    pub sector: String,
    pub magnitude: f64,
    #[serde(default = "default_recovery")]
    pub recovery_steps: usize,
}

fn default_recovery() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub protocols: usize,
    pub tokens: usize,
    /// Number of grid points.
    pub timestamps: usize,
    pub chains: usize,
    pub start: NaiveDate,
    pub interval_days: i64,
    pub holdings_per_protocol: usize,
    /// Standard deviation of the weekly log-return of each holding.
    pub volatility: f64,
    /// Probability that a holding is left untouched over one interval.
    pub hold_probability: f64,
    /// Records are displaced uniformly within `±jitter_seconds` of the grid.
    pub jitter_seconds: i64,
    pub shocks: Vec<Shock>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            protocols: 20,
            tokens: 12,
            timestamps: 26,
            chains: 2,
            start: NaiveDate::from_ymd_opt(2022, 1, 3).expect("valid date"),
            interval_days: 7,
            holdings_per_protocol: 4,
            volatility: 0.05,
            hold_probability: 0.1,
            jitter_seconds: 0,
            shocks: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SynthConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: SynthConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn interval_seconds(&self) -> i64 {
        self.interval_days * SECONDS_PER_DAY
    }

    pub fn start_timestamp(&self) -> Timestamp {
        self.start
            .and_hms_opt(0, 0, 0)
            .expect("midnight exists")
            .and_utc()
            .timestamp()
    }

    pub fn grid_time(&self, step: usize) -> Timestamp {
        self.start_timestamp() + step as i64 * self.interval_seconds()
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval_days <= 0 {
            return Err(Error::Config("interval_days must be positive".into()));
        }
        if self.chains == 0 && self.protocols > 0 {
            return Err(Error::Config("at least one chain is required".into()));
        }
        if !(self.volatility >= 0.0 && self.volatility.is_finite()) {
            return Err(Error::Config("volatility must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.hold_probability) {
            return Err(Error::Config("hold_probability must lie in [0, 1]".into()));
        }
        if self.jitter_seconds < 0 || 2 * self.jitter_seconds >= self.interval_seconds() {
            return Err(Error::Config("jitter_seconds must lie in [0, interval/2)".into()));
        }
        for shock in &self.shocks {
            if Sector::from_name(&shock.sector).is_none() {
                return Err(Error::Config(format!("unknown sector `{}`", shock.sector)));
            }
            if !(shock.magnitude > 0.0 && shock.magnitude.is_finite()) {
                return Err(Error::Config("shock magnitude must be positive".into()));
            }
            self.shock_step(shock)?;
        }
        Ok(())
    }

    fn shock_step(&self, shock: &Shock) -> Result<usize> {
        let days = (shock.date - self.start).num_days();
        if days < 0 || days % self.interval_days != 0 {
            return Err(Error::Config(format!(
                "shock date {} is not a grid date",
                shock.date
            )));
        }
        Ok((days / self.interval_days) as usize)
    }

    pub fn protocol_id(i: usize) -> String {
        format!("P{i:03}")
    }

    pub fn token_id(j: usize) -> String {
        format!("T{j:03}")
    }

    fn chain_id(c: usize) -> String {
        match CHAIN_NAMES.get(c) {
            Some(name) => (*name).to_owned(),
            None => format!("chain{c}"),
        }
    }

    /// Sector of protocol `i`; protocols cycle through the sectors.
    pub fn protocol_sector(i: usize) -> Sector {
        Sector::ALL[i % Sector::ALL.len()]
    }

    pub fn protocol_category(i: usize) -> &'static str {
        let sector = Self::protocol_sector(i);
        let cats = sector.categories();
        cats[(i / Sector::ALL.len()) % cats.len()]
    }

    /// Issuing protocol of token `j`. Every third token is a primary-market
    /// token with no issuing protocol.
    pub fn token_issuer(&self, j: usize) -> Option<String> {
        if self.protocols == 0 || j % 3 == 2 {
            None
        } else {
            Some(Self::protocol_id((j * 7 + 3) % self.protocols))
        }
    }

    fn multiplier(&self, sector: Sector, step: usize) -> Decimal {
        let mut m = Decimal::ONE;
        for shock in &self.shocks {
            if Sector::from_name(&shock.sector) != Some(sector) {
                continue;
            }
            let Ok(at) = self.shock_step(shock) else {
                continue;
            };
            if step < at || step > at + shock.recovery_steps {
                continue;
            }
            let depth = Decimal::from_f64(shock.magnitude).unwrap_or(Decimal::ONE);
            let f = if shock.recovery_steps == 0 || step == at {
                depth
            } else {
                let frac = Decimal::from(step - at) / Decimal::from(shock.recovery_steps);
                depth + (Decimal::ONE - depth) * frac
            };
            m *= f;
        }
        m
    }
}

/// Generates a dataset. Identical `(config, seed)` yields identical records.
pub fn synth_dataset(config: &SynthConfig, seed: u64) -> Vec<TvlRecord> {
    let mut out = Vec::new();
    if config.protocols == 0 || config.tokens == 0 || config.timestamps == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let token_prices: Vec<f64> = (0..config.tokens)
        .map(|_| 10f64.powf(rng.random_range(-1.0..3.0)))
        .collect();

    let per_protocol = config.holdings_per_protocol.min(config.tokens);
    for i in 0..config.protocols {
        let protocol = SynthConfig::protocol_id(i);
        let sector = SynthConfig::protocol_sector(i);
        let held = sample(&mut rng, config.tokens, per_protocol).into_vec();
        let mut held = held;
        held.sort_unstable();
        for j in held {
            let chain = SynthConfig::chain_id(rng.random_range(0..config.chains));
            let token = SynthConfig::token_id(j);
            let mut trend = 10f64.powf(rng.random_range(3.0..7.0));
            for step in 0..config.timestamps {
                if step > 0 && !rng.random_bool(config.hold_probability) {
                    let z: f64 = rng.sample(StandardNormal);
                    trend *= (config.volatility * z).exp();
                }
                let base = Decimal::from_f64(trend).unwrap_or_default().round_dp(2);
                let usd_value = (base * config.multiplier(sector, step)).round_dp(8);
                let amount = (usd_value / Decimal::from_f64(token_prices[j]).unwrap_or(Decimal::ONE))
                    .round_dp(6);
                let jitter = if config.jitter_seconds > 0 {
                    rng.random_range(-config.jitter_seconds..=config.jitter_seconds)
                } else {
                    0
                };
                out.push(TvlRecord {
                    protocol_id: protocol.clone(),
                    chain_id: chain.clone(),
                    token_id: token.clone(),
                    timestamp: config.grid_time(step) + jitter,
                    amount,
                    usd_value,
                });
            }
        }
    }
    out
}

/// Side tables that accompany a synthetic dataset: protocol categories, a
/// metadata token map, and descriptive texts for similarity matching.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthMetadata {
    pub categories: BTreeMap<String, String>,
    pub metadata_map: BTreeMap<String, String>,
    pub token_texts: BTreeMap<String, String>,
    pub protocol_texts: BTreeMap<String, String>,
}

fn codeword(i: usize) -> String {
    let mut word = String::from("zq");
    let mut n = i;
    loop {
        word.push((b'a' + (n % 26) as u8) as char);
        n /= 26;
        if n == 0 {
            break;
        }
    }
    word
}

/// Issued tokens alternate between a direct metadata entry and a
/// description that names the issuer's codeword, so both the lookup and the
/// similarity stage get exercised.
pub fn synth_metadata(config: &SynthConfig) -> SynthMetadata {
    let mut meta = SynthMetadata::default();
    for i in 0..config.protocols {
        let id = SynthConfig::protocol_id(i);
        let category = SynthConfig::protocol_category(i);
        meta.protocol_texts.insert(
            id.clone(),
            format!("{id} {category} protocol {}", codeword(i)),
        );
        meta.categories.insert(id, category.to_owned());
    }
    for j in 0..config.tokens {
        let token = SynthConfig::token_id(j);
        match config.token_issuer(j) {
            Some(issuer) if j % 3 == 0 => {
                meta.metadata_map.insert(token.clone(), issuer);
            }
            Some(issuer) => {
                let i: usize = issuer[1..].parse().expect("synthetic protocol id");
                meta.token_texts.insert(
                    token.clone(),
                    format!("{token} token issued by {} {}", codeword(i), codeword(i)),
                );
            }
            None => {
                meta.token_texts
                    .insert(token.clone(), format!("{token} native asset"));
            }
        }
    }
    meta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_records, write_records, InputFormat};

    fn small() -> SynthConfig {
        SynthConfig {
            protocols: 6,
            tokens: 5,
            timestamps: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = small();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_records(&synth_dataset(&cfg, 42), &mut a, InputFormat::Csv).unwrap();
        write_records(&synth_dataset(&cfg, 42), &mut b, InputFormat::Csv).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        write_records(&synth_dataset(&cfg, 43), &mut c, InputFormat::Csv).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_protocols_is_empty() {
        let cfg = SynthConfig {
            protocols: 0,
            ..small()
        };
        assert!(synth_dataset(&cfg, 1).is_empty());
    }

    #[test]
    fn shock_halves_trend_value() {
        let base = small();
        let shocked = SynthConfig {
            shocks: vec![Shock {
                date: base.start + chrono::Duration::days(21),
                sector: Sector::ALL[0].name().to_owned(),
                magnitude: 0.5,
                recovery_steps: 2,
            }],
            ..base.clone()
        };
        shocked.validate().unwrap();
        let plain = synth_dataset(&base, 9);
        let hit = synth_dataset(&shocked, 9);
        assert_eq!(plain.len(), hit.len());
        let shock_t = base.grid_time(3);
        let mut checked = 0;
        for (a, b) in plain.iter().zip(&hit) {
            let i: usize = a.protocol_id[1..].parse().unwrap();
            let affected = SynthConfig::protocol_sector(i) == Sector::ALL[0];
            if a.timestamp == shock_t && affected {
                assert_eq!(b.usd_value * Decimal::from(2), a.usd_value);
                checked += 1;
            } else if a.timestamp > base.grid_time(5) || !affected {
                assert_eq!(a.usd_value, b.usd_value);
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn output_parses_without_rejections() {
        let cfg = SynthConfig {
            jitter_seconds: 3_600,
            ..small()
        };
        let recs = synth_dataset(&cfg, 5);
        let mut buf = Vec::new();
        write_records(&recs, &mut buf, InputFormat::Csv).unwrap();
        let report = parse_records(buf.as_slice(), InputFormat::Csv).unwrap();
        assert!(report.rejections.is_empty());
        assert_eq!(report.records, recs);
    }

    #[test]
    fn config_from_toml() {
        let cfg = SynthConfig::from_toml_str(
            r#"
            protocols = 3
            tokens = 2
            timestamps = 4
            start = "2022-04-11"

            [[shocks]]
            date = "2022-04-25"
            sector = "Asset Management"
            magnitude = 0.5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.shocks[0].recovery_steps, 4);
        assert!(SynthConfig::from_toml_str("bogus = 1").is_err());
        assert!(SynthConfig::from_toml_str(
            "[[shocks]]\ndate = \"2022-01-04\"\nsector = \"Others\"\nmagnitude = 0.5"
        )
        .is_err());
    }

    #[test]
    fn metadata_covers_every_token() {
        let cfg = small();
        let meta = synth_metadata(&cfg);
        for j in 0..cfg.tokens {
            let t = SynthConfig::token_id(j);
            assert!(meta.metadata_map.contains_key(&t) ^ meta.token_texts.contains_key(&t));
        }
        assert_eq!(meta.categories.len(), cfg.protocols);
    }
}
