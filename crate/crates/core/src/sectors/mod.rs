//! Sector-level aggregation of exposure flows.
//!
//! Protocols are grouped into six broad sectors through their category.
//! For each sector and snapshot, cross-sector link volume is split into
//! expansion (flow into the sector) and contraction (flow out of it), and
//! summarised by the exposure-shift ratio
//! `ρ = (F_in - F_out) / (F_in + F_out)`.

pub mod incident;
pub mod var;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netbuild::NetworkSnapshot;

pub use incident::{cut_edges, incident_table, net_exposure_change, write_incident_csv, IncidentRow};
pub use var::{fit_var, irf, select_lag_aic, write_irf_csv, Irf, VarModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sector {
    AssetManagement,
    TradingExchanges,
    LendingBorrowingRwa,
    InfrastructureServices,
    PrivacySecurity,
    Others,
}

impl Sector {
    pub const ALL: [Sector; 6] = [
        Sector::AssetManagement,
        Sector::TradingExchanges,
        Sector::LendingBorrowingRwa,
        Sector::InfrastructureServices,
        Sector::PrivacySecurity,
        Sector::Others,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sector::AssetManagement => "Asset Management",
            Sector::TradingExchanges => "Trading & Exchanges",
            Sector::LendingBorrowingRwa => "Lending, Borrowing & Real World Assets",
            Sector::InfrastructureServices => "Infrastructure, Services & Financial Products",
            Sector::PrivacySecurity => "Privacy & Security",
            Sector::Others => "Others",
        }
    }

    pub fn from_name(name: &str) -> Option<Sector> {
        let name = name.trim();
        Sector::ALL
            .into_iter()
            .find(|s| s.name().eq_ignore_ascii_case(name))
    }

    /// Data-source categories grouped under this sector.
    pub fn categories(self) -> &'static [&'static str] {
        match self {
            Sector::AssetManagement => &[
                "Algo-Stables",
                "Decentralized Stablecoin",
                "Liquid Staking",
                "Liquidity manager",
                "Reserve Currency",
                "Synthetics",
                "Yield",
                "Yield Aggregator",
            ],
            Sector::TradingExchanges => &[
                "Bridge",
                "CEX",
                "DEX Aggregator",
                "Cross Chain",
                "Dexes",
                "Derivatives",
                "Options",
                "Options Vault",
                "NFT Marketplace",
            ],
            Sector::LendingBorrowingRwa => &[
                "CDP",
                "Lending",
                "Leveraged Farming",
                "NFT Lending",
                "RWA Lending",
                "Uncollateralized Lending",
                "RWA",
                "Liquidity Restaking",
                "Restaking",
            ],
            Sector::InfrastructureServices => &[
                "Chain",
                "Infrastructure",
                "Oracle",
                "Payments",
                "Services",
                "Farm",
                "Gaming",
                "Indexes",
                "Insurance",
                "Launchpad",
                "Prediction Market",
                "Staking Pool",
                "Wallets",
            ],
            Sector::PrivacySecurity => &["Privacy"],
            Sector::Others => &["SoFi"],
        }
    }
}

impl fmt::Display for Sector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sector::from_name(s).ok_or_else(|| Error::Config(format!("unknown sector `{s}`")))
    }
}

/// Category -> sector and protocol -> category lookups. Anything unknown
/// lands in [`Sector::Others`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SectorMap {
    categories: BTreeMap<String, Sector>,
    protocols: BTreeMap<String, String>,
}

impl SectorMap {
    /// The built-in category grouping with no protocol assignments.
    pub fn standard() -> Self {
        let mut categories = BTreeMap::new();
        for s in Sector::ALL {
            for c in s.categories() {
                categories.insert(c.to_lowercase(), s);
            }
        }
        SectorMap {
            categories,
            protocols: BTreeMap::new(),
        }
    }

    /// Replaces the category grouping with a `category,sector` CSV.
    pub fn with_category_csv<R: Read>(mut self, source: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        if r.headers()?.iter().collect::<Vec<_>>() != ["category", "sector"] {
            return Err(Error::Format("sector map header must be `category,sector`".into()));
        }
        self.categories.clear();
        for row in r.records() {
            let row = row?;
            if row.len() != 2 {
                return Err(Error::Format("sector map rows need two fields".into()));
            }
            self.categories.insert(row[0].to_lowercase(), row[1].parse()?);
        }
        Ok(self)
    }

    pub fn with_protocol_categories<I, K, V>(mut self, pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        self.protocols
            .extend(pairs.into_iter().map(|(k, v)| (k.into(), v.into())));
        self
    }

    /// Adds `protocol_id,category` rows.
    pub fn with_protocol_csv<R: Read>(self, source: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        if r.headers()?.iter().collect::<Vec<_>>() != ["protocol_id", "category"] {
            return Err(Error::Format(
                "protocol categories header must be `protocol_id,category`".into(),
            ));
        }
        let mut pairs = Vec::new();
        for row in r.records() {
            let row = row?;
            if row.len() != 2 {
                return Err(Error::Format("protocol category rows need two fields".into()));
            }
            pairs.push((row[0].to_owned(), row[1].to_owned()));
        }
        Ok(self.with_protocol_categories(pairs))
    }

    pub fn category_sector(&self, category: &str) -> Sector {
        self.categories
            .get(&category.trim().to_lowercase())
            .copied()
            .unwrap_or(Sector::Others)
    }

    pub fn sector_of(&self, protocol: &str) -> Sector {
        self.protocols
            .get(protocol)
            .map(|c| self.category_sector(c))
            .unwrap_or(Sector::Others)
    }

    pub fn write_category_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["category", "sector"])?;
        for s in Sector::ALL {
            for c in s.categories() {
                w.write_record([*c, s.name()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Which direction of cross-sector flow counts as expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Flow into the sector's protocols is expansion.
    #[default]
    Inbound,
    Outbound,
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inbound" => Ok(Orientation::Inbound),
            "outbound" => Ok(Orientation::Outbound),
            other => Err(Error::Config(format!("unknown orientation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlowOptions {
    pub orientation: Orientation,
    /// Count links within one sector as both expansion and contraction.
    pub include_intra: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorFlow {
    pub date: NaiveDate,
    pub sector: Sector,
    pub expansion: Decimal,
    pub contraction: Decimal,
    pub rho: Option<f64>,
}

/// `(F_in - F_out) / (F_in + F_out)`, absent when both are zero.
pub fn exposure_shift_ratio(expansion: Decimal, contraction: Decimal) -> Option<f64> {
    let total = expansion + contraction;
    if total.is_zero() {
        return None;
    }
    ((expansion - contraction) / total).to_f64()
}

/// One row per snapshot and sector, sectors in [`Sector::ALL`] order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SectorFlowSeries {
    pub rows: Vec<SectorFlow>,
}

impl SectorFlowSeries {
    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut d: Vec<NaiveDate> = self.rows.iter().map(|r| r.date).collect();
        d.dedup();
        d
    }

    pub fn sector(&self, sector: Sector) -> impl Iterator<Item = &SectorFlow> {
        self.rows.iter().filter(move |r| r.sector == sector)
    }

    /// Wide table for VAR estimation: one column per sector and direction,
    /// in USD.
    pub fn var_table(&self, sectors: &[Sector]) -> (Vec<String>, Vec<Vec<f64>>) {
        let mut names = Vec::new();
        for s in sectors {
            names.push(format!("{} expansion", s.name()));
            names.push(format!("{} contraction", s.name()));
        }
        let mut rows = Vec::new();
        for date in self.dates() {
            let mut row = Vec::with_capacity(names.len());
            for s in sectors {
                let f = self
                    .rows
                    .iter()
                    .find(|r| r.date == date && r.sector == *s)
                    .expect("every sector has a row per date");
                row.push(f.expansion.to_f64().unwrap_or(0.0));
                row.push(f.contraction.to_f64().unwrap_or(0.0));
            }
            rows.push(row);
        }
        (names, rows)
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["date", "sector", "expansion", "contraction", "rho"])?;
        for r in &self.rows {
            w.write_record([
                r.date.format("%Y-%m-%d").to_string(),
                r.sector.name().to_owned(),
                r.expansion.to_string(),
                r.contraction.to_string(),
                r.rho.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn sector_flows(
    snapshots: &[NetworkSnapshot],
    map: &SectorMap,
    options: &FlowOptions,
) -> SectorFlowSeries {
    let mut rows = Vec::with_capacity(snapshots.len() * Sector::ALL.len());
    for snap in snapshots {
        let mut inflow: BTreeMap<Sector, Decimal> = BTreeMap::new();
        let mut outflow: BTreeMap<Sector, Decimal> = BTreeMap::new();
        for l in &snap.links {
            let (s, t) = (map.sector_of(&l.source), map.sector_of(&l.target));
            if s == t && !options.include_intra {
                continue;
            }
            *outflow.entry(s).or_default() += l.size;
            *inflow.entry(t).or_default() += l.size;
        }
        for sector in Sector::ALL {
            let fin = inflow.get(&sector).copied().unwrap_or_default();
            let fout = outflow.get(&sector).copied().unwrap_or_default();
            let (expansion, contraction) = match options.orientation {
                Orientation::Inbound => (fin, fout),
                Orientation::Outbound => (fout, fin),
            };
            rows.push(SectorFlow {
                date: snap.date,
                sector,
                expansion,
                contraction,
                rho: exposure_shift_ratio(expansion, contraction),
            });
        }
    }
    SectorFlowSeries { rows }
}

/// Cross-sector link volume `source sector -> target sector` in one
/// snapshot, intra-sector volume on the diagonal.
pub fn sector_matrix(snapshot: &NetworkSnapshot, map: &SectorMap) -> BTreeMap<(Sector, Sector), Decimal> {
    let mut out = BTreeMap::new();
    for l in &snapshot.links {
        *out.entry((map.sector_of(&l.source), map.sector_of(&l.target)))
            .or_insert(Decimal::ZERO) += l.size;
    }
    out
}

pub fn write_sector_matrix_csv<W: Write>(
    matrix: &BTreeMap<(Sector, Sector), Decimal>,
    sink: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["source_sector", "target_sector", "size"])?;
    for ((s, t), v) in matrix {
        w.write_record([s.name(), t.name(), &v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a wide numeric table with a leading `date` column.
pub fn write_series_csv<W: Write>(
    dates: &[NaiveDate],
    names: &[String],
    rows: &[Vec<f64>],
    sink: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["date".to_owned()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (d, row) in dates.iter().zip(rows) {
        let mut rec = vec![d.format("%Y-%m-%d").to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a wide numeric table; the first column is a row label and is
/// ignored.
pub fn read_series_csv<R: Read>(source: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_reader(source);
    let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_owned).collect();
    let mut rows = Vec::new();
    for row in r.records() {
        let row = row?;
        let values = row
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("series value `{v}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != names.len() {
            return Err(Error::Format("ragged series row".into()));
        }
        rows.push(values);
    }
    Ok((names, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netbuild::{Composition, Link};
    use rust_decimal_macros::dec;

    #[test]
    fn ratio_anchors() {
        assert_eq!(exposure_shift_ratio(dec!(5), dec!(5)), Some(0.0));
        assert_eq!(exposure_shift_ratio(dec!(3), dec!(0)), Some(1.0));
        assert_eq!(exposure_shift_ratio(dec!(1), dec!(3)), Some(-0.5));
        assert_eq!(exposure_shift_ratio(dec!(0), dec!(2)), Some(-1.0));
        assert_eq!(exposure_shift_ratio(dec!(0), dec!(0)), None);
    }

    #[test]
    fn categories_resolve_to_sectors() {
        let m = SectorMap::standard().with_protocol_categories([
            ("Lido", "Liquid Staking"),
            ("Curve", "Dexes"),
            ("Odd", "Something New"),
        ]);
        assert_eq!(m.sector_of("Lido"), Sector::AssetManagement);
        assert_eq!(m.sector_of("Curve"), Sector::TradingExchanges);
        assert_eq!(m.sector_of("Odd"), Sector::Others);
        assert_eq!(m.sector_of("Unlisted"), Sector::Others);
        assert_eq!(m.category_sector("privacy"), Sector::PrivacySecurity);
    }

    #[test]
    fn category_csv_round_trip() {
        let mut buf = Vec::new();
        SectorMap::standard().write_category_csv(&mut buf).unwrap();
        let m = SectorMap::default().with_category_csv(buf.as_slice()).unwrap();
        assert_eq!(m, SectorMap::standard());
    }

    fn link(s: &str, t: &str, v: Decimal) -> Link {
        Link {
            source: s.into(),
            target: t.into(),
            size: v,
            composition: Composition::from([("x".to_owned(), v)]),
        }
    }

    #[test]
    fn flows_split_by_direction() {
        let m = SectorMap::standard().with_protocol_categories([
            ("a", "Yield"),
            ("a2", "Yield"),
            ("b", "Dexes"),
        ]);
        let snap = NetworkSnapshot {
            date: NaiveDate::from_ymd_opt(2022, 5, 9).unwrap(),
            nodes: vec![],
            links: vec![link("a", "b", dec!(1)), link("b", "a", dec!(3)), link("a", "a2", dec!(9))],
        };
        let series = sector_flows(&[snap.clone()], &m, &FlowOptions::default());
        let am = series.sector(Sector::AssetManagement).next().unwrap();
        assert_eq!((am.expansion, am.contraction), (dec!(3), dec!(1)));
        assert_eq!(am.rho, Some(0.5));
        let flipped = sector_flows(
            &[snap.clone()],
            &m,
            &FlowOptions {
                orientation: Orientation::Outbound,
                include_intra: false,
            },
        );
        assert_eq!(flipped.sector(Sector::AssetManagement).next().unwrap().rho, Some(-0.5));
        let intra = sector_flows(
            &[snap],
            &m,
            &FlowOptions {
                orientation: Orientation::Inbound,
                include_intra: true,
            },
        );
        let am = intra.sector(Sector::AssetManagement).next().unwrap();
        assert_eq!((am.expansion, am.contraction), (dec!(12), dec!(10)));
        let none = series.sector(Sector::PrivacySecurity).next().unwrap();
        assert_eq!(none.rho, None);
    }

    #[test]
    fn series_csv_round_trip() {
        let d = NaiveDate::from_ymd_opt(2022, 5, 9).unwrap();
        let names = vec!["a".to_owned(), "b".to_owned()];
        let rows = vec![vec![1.5, -2.0], vec![0.25, 3.0]];
        let mut buf = Vec::new();
        write_series_csv(&[d, d], &names, &rows, &mut buf).unwrap();
        assert_eq!(read_series_csv(buf.as_slice()).unwrap(), (names, rows));
    }
}
