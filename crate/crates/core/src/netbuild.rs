//! Exposure snapshots: one weighted directed graph per grid interval.
//!
//! For an interval `[t1, t2]` every protocol `p` becomes a node weighted by
//! the end value of the tokens it held at both endpoints. Every token `x`
//! held by `p` with issuer `q = M(x) != p` contributes a flow of `|Δv|`:
//! a falling balance points `p -> q`, a rising one `q -> p`. Flows between
//! the same ordered pair are summed into one link whose composition keeps
//! the per-token contributions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate};
use rayon::prelude::*;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AlignedStateTable, Timestamp};
use crate::tokmap::TokenProtocolMap;

pub type Composition = BTreeMap<String, Decimal>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub size: Decimal,
    pub composition: Composition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub source: String,
    pub target: String,
    pub size: Decimal,
    pub composition: Composition,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSnapshot {
    pub date: NaiveDate,
    /// Sorted by id.
    pub nodes: Vec<Node>,
    /// Sorted by `(source, target)`.
    pub links: Vec<Link>,
}

impl NetworkSnapshot {
    pub fn empty(date: NaiveDate) -> Self {
        NetworkSnapshot {
            date,
            nodes: Vec::new(),
            links: Vec::new(),
        }
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes
            .binary_search_by(|n| n.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.nodes[i])
    }

    pub fn total_link_size(&self) -> Decimal {
        self.links.iter().map(|l| l.size).sum()
    }

    /// Sorts nodes and links into canonical order.
    pub fn canonicalize(&mut self) {
        self.nodes.sort_by(|a, b| a.id.cmp(&b.id));
        self.links
            .sort_by(|a, b| (&a.source, &a.target).cmp(&(&b.source, &b.target)));
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(Error::Invariant(format!("duplicate node `{}`", n.id)));
            }
            if n.size.is_sign_negative() && !n.size.is_zero() {
                return Err(Error::Invariant(format!("node `{}` has negative size", n.id)));
            }
        }
        let mut pairs = BTreeSet::new();
        for l in &self.links {
            if l.source == l.target {
                return Err(Error::Invariant(format!("self-loop on `{}`", l.source)));
            }
            if !pairs.insert((l.source.as_str(), l.target.as_str())) {
                return Err(Error::Invariant(format!(
                    "duplicate link {} -> {}",
                    l.source, l.target
                )));
            }
            if l.size <= Decimal::ZERO {
                return Err(Error::Invariant(format!(
                    "link {} -> {} has non-positive size",
                    l.source, l.target
                )));
            }
            let sum: Decimal = l.composition.values().copied().sum();
            if sum != l.size {
                return Err(Error::Invariant(format!(
                    "link {} -> {} size {} differs from composition total {}",
                    l.source, l.target, l.size, sum
                )));
            }
        }
        Ok(())
    }
}

/// Change in one token's USD value at one protocol over an interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StockDelta {
    pub protocol_id: String,
    pub token_id: String,
    pub v_start: Decimal,
    pub v_end: Decimal,
    pub delta: Decimal,
}

/// How tokens that appear only at the end of an interval are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NewTokenPolicy {
    /// Flow with a start value of zero; still excluded from node weight.
    #[default]
    Include,
    Exclude,
}

impl FromStr for NewTokenPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "include" => Ok(NewTokenPolicy::Include),
            "exclude" => Ok(NewTokenPolicy::Exclude),
            other => Err(Error::Config(format!("unknown new-token policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Nodes whose weight falls below this carry size 0.
    pub node_threshold: Decimal,
    pub new_token_policy: NewTokenPolicy,
}

/// Total USD value held by `protocol` at grid time `t`, across chains and
/// tokens. Unknown protocols and gaps contribute nothing.
pub fn protocol_stock(table: &AlignedStateTable, protocol: &str, t: Timestamp) -> Result<Decimal> {
    let k = grid_index(table, t)?;
    Ok(table.token_values(protocol, k).values().copied().sum())
}

fn grid_index(table: &AlignedStateTable, t: Timestamp) -> Result<usize> {
    table
        .index_of(t)
        .ok_or_else(|| Error::Config(format!("timestamp {t} is not a grid point")))
}

/// Per-token deltas of `protocol` between grid indices `k1` and `k2`.
pub fn stock_deltas(
    table: &AlignedStateTable,
    protocol: &str,
    k1: usize,
    k2: usize,
    policy: NewTokenPolicy,
) -> Vec<StockDelta> {
    let start = table.token_values(protocol, k1);
    let end = table.token_values(protocol, k2);
    end.into_iter()
        .filter_map(|(token, v_end)| {
            let v_start = match (start.get(&token), policy) {
                (Some(v), _) => *v,
                (None, NewTokenPolicy::Include) => Decimal::ZERO,
                (None, NewTokenPolicy::Exclude) => return None,
            };
            Some(StockDelta {
                protocol_id: protocol.to_owned(),
                token_id: token,
                v_start,
                v_end,
                delta: v_end - v_start,
            })
        })
        .collect()
}

pub fn date_of(t: Timestamp) -> NaiveDate {
    DateTime::from_timestamp(t, 0)
        .map(|d| d.date_naive())
        .unwrap_or_default()
}

/// Builds the snapshot for the interval between grid times `t1` and `t2`.
pub fn build_snapshot(
    table: &AlignedStateTable,
    map: &TokenProtocolMap,
    t1: Timestamp,
    t2: Timestamp,
    options: &BuildOptions,
) -> Result<NetworkSnapshot> {
    if t2 <= t1 {
        return Err(Error::Config(format!(
            "interval end {t2} must come after start {t1}"
        )));
    }
    let k1 = grid_index(table, t1)?;
    let k2 = grid_index(table, t2)?;

    let mut nodes: BTreeMap<String, Node> = BTreeMap::new();
    let mut links: BTreeMap<(String, String), Composition> = BTreeMap::new();

    for protocol in table.protocols() {
        let start = table.token_values(protocol, k1);
        let end = table.token_values(protocol, k2);
        if start.is_empty() && end.is_empty() {
            continue;
        }

        let composition: Composition = end
            .iter()
            .filter(|(token, _)| start.contains_key(*token))
            .map(|(token, v)| (token.clone(), *v))
            .collect();
        let weight: Decimal = composition.values().copied().sum();
        let size = if weight < options.node_threshold {
            Decimal::ZERO
        } else {
            weight
        };
        nodes.insert(
            protocol.to_owned(),
            Node {
                id: protocol.to_owned(),
                size,
                composition,
            },
        );

        for d in stock_deltas(table, protocol, k1, k2, options.new_token_policy) {
            let issuer = map.issuer(&d.token_id);
            if issuer == protocol || d.delta.is_zero() {
                continue;
            }
            let (source, target) = if d.delta.is_sign_negative() {
                (protocol, issuer)
            } else {
                (issuer, protocol)
            };
            *links
                .entry((source.to_owned(), target.to_owned()))
                .or_default()
                .entry(d.token_id)
                .or_insert(Decimal::ZERO) += d.delta.abs();
        }
    }

    // Issuers that hold nothing themselves still appear as nodes.
    for (source, target) in links.keys() {
        for id in [source, target] {
            nodes.entry(id.clone()).or_insert_with(|| Node {
                id: id.clone(),
                size: Decimal::ZERO,
                composition: Composition::new(),
            });
        }
    }

    let snapshot = NetworkSnapshot {
        date: date_of(t2),
        nodes: nodes.into_values().collect(),
        links: links
            .into_iter()
            .map(|((source, target), composition)| Link {
                source,
                target,
                size: composition.values().copied().sum(),
                composition,
            })
            .collect(),
    };
    debug_assert!(snapshot.validate().is_ok());
    Ok(snapshot)
}

/// One snapshot per consecutive pair of grid points, optionally limited to
/// intervals ending within `[from, to]`.
pub fn build_series(
    table: &AlignedStateTable,
    map: &TokenProtocolMap,
    options: &BuildOptions,
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
) -> Result<Vec<NetworkSnapshot>> {
    (1..table.len)
        .filter(|&k| {
            let d = date_of(table.grid_time(k));
            from.is_none_or(|f| d >= f) && to.is_none_or(|t| d <= t)
        })
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|k| build_snapshot(table, map, table.grid_time(k - 1), table.grid_time(k), options))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SnapshotBody {
    nodes: Vec<Node>,
    links: Vec<Link>,
}

/// `{"<date>": {"nodes": [...], "links": [...]}}`, canonical order, one
/// trailing newline.
pub fn write_snapshot_json<W: Write>(snapshot: &NetworkSnapshot, mut sink: W) -> Result<()> {
    snapshot.validate()?;
    let mut s = snapshot.clone();
    s.canonicalize();
    let mut doc = BTreeMap::new();
    doc.insert(
        s.date.format("%Y-%m-%d").to_string(),
        SnapshotBody {
            nodes: s.nodes,
            links: s.links,
        },
    );
    serde_json::to_writer(&mut sink, &doc)?;
    sink.write_all(b"\n")?;
    Ok(())
}

pub fn read_snapshot_json<R: Read>(source: R) -> Result<NetworkSnapshot> {
    let doc: BTreeMap<String, SnapshotBody> = serde_json::from_reader(source)?;
    if doc.len() != 1 {
        return Err(Error::Format(format!(
            "expected exactly one dated snapshot, found {}",
            doc.len()
        )));
    }
    let (date, body) = doc.into_iter().next().expect("one entry");
    let date = NaiveDate::parse_from_str(&date, "%Y-%m-%d")
        .map_err(|_| Error::Format(format!("bad snapshot date `{date}`")))?;
    let mut s = NetworkSnapshot {
        date,
        nodes: body.nodes,
        links: body.links,
    };
    s.canonicalize();
    s.validate()?;
    Ok(s)
}

fn flatten(composition: &Composition) -> Result<String> {
    let mut parts = Vec::with_capacity(composition.len());
    for (token, v) in composition {
        if token.contains([':', '|']) {
            return Err(Error::Invariant(format!(
                "token `{token}` cannot be flattened into CSV composition"
            )));
        }
        parts.push(format!("{token}:{v}"));
    }
    Ok(parts.join("|"))
}

fn unflatten(text: &str) -> Result<Composition> {
    let mut out = Composition::new();
    if text.is_empty() {
        return Ok(out);
    }
    for part in text.split('|') {
        let (token, v) = part
            .rsplit_once(':')
            .ok_or_else(|| Error::Format(format!("bad composition entry `{part}`")))?;
        let v = Decimal::from_str(v).map_err(|_| Error::Format(format!("bad value `{v}`")))?;
        out.insert(token.to_owned(), v);
    }
    Ok(out)
}

/// Writes the nodes table and the links table. Compositions are flattened
/// to `token:value|token:value`.
pub fn write_snapshot_csv<N: Write, L: Write>(
    snapshot: &NetworkSnapshot,
    nodes: N,
    links: L,
) -> Result<()> {
    snapshot.validate()?;
    let mut s = snapshot.clone();
    s.canonicalize();
    let date = s.date.format("%Y-%m-%d").to_string();

    let mut w = csv::Writer::from_writer(nodes);
    w.write_record(["date", "id", "size", "composition"])?;
    for n in &s.nodes {
        w.write_record([&date, &n.id, &n.size.to_string(), &flatten(&n.composition)?])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(links);
    w.write_record(["date", "source", "target", "size", "composition"])?;
    for l in &s.links {
        w.write_record([
            &date,
            &l.source,
            &l.target,
            &l.size.to_string(),
            &flatten(&l.composition)?,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot_csv<N: Read, L: Read>(nodes: N, links: L) -> Result<NetworkSnapshot> {
    let mut date: Option<NaiveDate> = None;
    let mut check_date = |raw: &str| -> Result<()> {
        let d = NaiveDate::parse_from_str(raw, "%Y-%m-%d")
            .map_err(|_| Error::Format(format!("bad date `{raw}`")))?;
        match date {
            Some(prev) if prev != d => Err(Error::Format("mixed dates in one snapshot".into())),
            _ => {
                date = Some(d);
                Ok(())
            }
        }
    };
    let dec = |raw: &str| Decimal::from_str(raw).map_err(|_| Error::Format(format!("bad size `{raw}`")));

    let mut out_nodes = Vec::new();
    for row in csv::Reader::from_reader(nodes).records() {
        let row = row?;
        if row.len() != 4 {
            return Err(Error::Format("node rows need 4 fields".into()));
        }
        check_date(&row[0])?;
        out_nodes.push(Node {
            id: row[1].to_owned(),
            size: dec(&row[2])?,
            composition: unflatten(&row[3])?,
        });
    }
    let mut out_links = Vec::new();
    for row in csv::Reader::from_reader(links).records() {
        let row = row?;
        if row.len() != 5 {
            return Err(Error::Format("link rows need 5 fields".into()));
        }
        check_date(&row[0])?;
        out_links.push(Link {
            source: row[1].to_owned(),
            target: row[2].to_owned(),
            size: dec(&row[3])?,
            composition: unflatten(&row[4])?,
        });
    }
    let mut s = NetworkSnapshot {
        date: date.unwrap_or_default(),
        nodes: out_nodes,
        links: out_links,
    };
    s.canonicalize();
    s.validate()?;
    Ok(s)
}

/// Writes every snapshot as `<dir>/<date>.json` and returns the paths.
pub fn write_snapshot_dir(dir: &Path, snapshots: &[NetworkSnapshot]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(snapshots.len());
    for s in snapshots {
        let path = dir.join(format!("{}.json", s.date.format("%Y-%m-%d")));
        let mut buf = Vec::new();
        write_snapshot_json(s, &mut buf)?;
        fs::write(&path, buf)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads every `*.json` snapshot in `dir`, ordered by date.
pub fn read_snapshot_dir(dir: &Path) -> Result<Vec<NetworkSnapshot>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        out.push(read_snapshot_json(fs::File::open(&p)?)?);
    }
    out.sort_by_key(|s| s.date);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{align_with_grid, GridSpec, TvlRecord};
    use crate::tokmap::Stage;
    use rust_decimal_macros::dec;

    fn rec(p: &str, x: &str, t: i64, v: Decimal) -> TvlRecord {
        TvlRecord {
            protocol_id: p.into(),
            chain_id: "ethereum".into(),
            token_id: x.into(),
            timestamp: t,
            amount: v,
            usd_value: v,
        }
    }

    fn table(recs: &[TvlRecord]) -> AlignedStateTable {
        align_with_grid(
            recs,
            GridSpec {
                start: 0,
                interval: 10,
                tolerance: 0,
                len: 2,
            },
        )
        .unwrap()
    }

    fn map() -> TokenProtocolMap {
        TokenProtocolMap::from_pairs([("x", "q"), ("y", "q"), ("z", "p")], Stage::Manual)
    }

    #[test]
    fn stock_sums_tokens_and_chains() {
        let mut recs = vec![rec("p", "USDC", 0, dec!(60)), rec("p", "WETH", 0, dec!(40))];
        assert_eq!(protocol_stock(&table(&recs), "p", 0).unwrap(), dec!(100));
        recs.push(TvlRecord {
            chain_id: "arbitrum".into(),
            ..rec("p", "USDC", 0, dec!(5))
        });
        assert_eq!(protocol_stock(&table(&recs), "p", 0).unwrap(), dec!(105));
        assert_eq!(protocol_stock(&table(&recs), "missing", 0).unwrap(), dec!(0));
        assert_eq!(protocol_stock(&table(&recs), "p", 10).unwrap(), dec!(0));
        assert!(protocol_stock(&table(&recs), "p", 5).is_err());
    }

    #[test]
    fn maker_holding_weth_has_stock_100() {
        let recs = vec![rec("MakerDAO", "WETH", 0, dec!(100))];
        assert_eq!(protocol_stock(&table(&recs), "MakerDAO", 0).unwrap(), dec!(100));
    }

    #[test]
    fn falling_balance_points_to_issuer() {
        let recs = vec![rec("p", "x", 0, dec!(100)), rec("p", "x", 10, dec!(90))];
        let s = build_snapshot(&table(&recs), &map(), 0, 10, &BuildOptions::default()).unwrap();
        assert_eq!(s.links.len(), 1);
        let l = &s.links[0];
        assert_eq!((l.source.as_str(), l.target.as_str(), l.size), ("p", "q", dec!(10)));
        assert_eq!(l.composition, Composition::from([("x".to_owned(), dec!(10))]));
        assert_eq!(s.node("p").unwrap().size, dec!(90));
        assert_eq!(s.node("q").unwrap().size, dec!(0));
    }

    #[test]
    fn opposing_token_flows_are_not_netted() {
        let recs = vec![
            rec("p", "x", 0, dec!(100)),
            rec("p", "x", 10, dec!(90)),
            rec("p", "y", 0, dec!(50)),
            rec("p", "y", 10, dec!(54)),
        ];
        let s = build_snapshot(&table(&recs), &map(), 0, 10, &BuildOptions::default()).unwrap();
        let got: Vec<_> = s
            .links
            .iter()
            .map(|l| (l.source.as_str(), l.target.as_str(), l.size, l.composition.clone()))
            .collect();
        assert_eq!(
            got,
            vec![
                ("p", "q", dec!(10), Composition::from([("x".to_owned(), dec!(10))])),
                ("q", "p", dec!(4), Composition::from([("y".to_owned(), dec!(4))])),
            ]
        );
    }

    #[test]
    fn unchanged_tokens_produce_no_links() {
        let recs = vec![
            rec("p", "x", 0, dec!(100)),
            rec("p", "x", 10, dec!(100)),
            rec("r", "y", 0, dec!(7)),
            rec("r", "y", 10, dec!(7)),
        ];
        let s = build_snapshot(&table(&recs), &map(), 0, 10, &BuildOptions::default()).unwrap();
        assert!(s.links.is_empty());
        assert_eq!(s.node("p").unwrap().size, dec!(100));
        assert_eq!(s.node("r").unwrap().size, dec!(7));
    }

    #[test]
    fn self_issued_tokens_are_dropped() {
        let recs = vec![rec("p", "z", 0, dec!(100)), rec("p", "z", 10, dec!(1))];
        let s = build_snapshot(&table(&recs), &map(), 0, 10, &BuildOptions::default()).unwrap();
        assert!(s.links.is_empty());
    }

    #[test]
    fn new_tokens_follow_policy() {
        let recs = vec![rec("p", "x", 0, dec!(5)), rec("p", "x", 10, dec!(5)), rec("p", "y", 10, dec!(30))];
        let t = table(&recs);
        let inc = build_snapshot(&t, &map(), 0, 10, &BuildOptions::default()).unwrap();
        assert_eq!(inc.links.len(), 1);
        assert_eq!((inc.links[0].source.as_str(), inc.links[0].size), ("q", dec!(30)));
        // Node weight only counts tokens present at both ends.
        assert_eq!(inc.node("p").unwrap().size, dec!(5));
        let exc = build_snapshot(
            &t,
            &map(),
            0,
            10,
            &BuildOptions {
                new_token_policy: NewTokenPolicy::Exclude,
                ..BuildOptions::default()
            },
        )
        .unwrap();
        assert!(exc.links.is_empty());
    }

    #[test]
    fn threshold_zeroes_small_nodes() {
        let recs = vec![rec("p", "x", 0, dec!(5)), rec("p", "x", 10, dec!(4))];
        let opts = BuildOptions {
            node_threshold: dec!(10),
            ..BuildOptions::default()
        };
        let s = build_snapshot(&table(&recs), &map(), 0, 10, &opts).unwrap();
        assert_eq!(s.node("p").unwrap().size, dec!(0));
    }

    #[test]
    fn reversed_interval_is_an_error() {
        let recs = vec![rec("p", "x", 0, dec!(5))];
        assert!(matches!(
            build_snapshot(&table(&recs), &map(), 10, 0, &BuildOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn json_layout() {
        let s = NetworkSnapshot::empty(NaiveDate::from_ymd_opt(2020, 3, 23).unwrap());
        let mut buf = Vec::new();
        write_snapshot_json(&s, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"2020-03-23\":{\"nodes\":[],\"links\":[]}}\n"
        );
    }

    #[test]
    fn json_numbers_are_exact() {
        let s = NetworkSnapshot {
            date: NaiveDate::from_ymd_opt(2020, 3, 23).unwrap(),
            nodes: vec![Node {
                id: "p".into(),
                size: dec!(0.10000000000000000001),
                composition: Composition::from([("x".to_owned(), dec!(0.10000000000000000001))]),
            }],
            links: vec![],
        };
        let mut buf = Vec::new();
        write_snapshot_json(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"size\":0.10000000000000000001"), "{text}");
        assert_eq!(read_snapshot_json(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn refuses_invalid_snapshots() {
        let mut s = NetworkSnapshot::empty(NaiveDate::from_ymd_opt(2020, 3, 23).unwrap());
        s.links.push(Link {
            source: "a".into(),
            target: "b".into(),
            size: dec!(3),
            composition: Composition::from([("x".to_owned(), dec!(2))]),
        });
        assert!(matches!(write_snapshot_json(&s, Vec::new()), Err(Error::Invariant(_))));
        s.links[0].size = dec!(2);
        assert!(write_snapshot_json(&s, Vec::new()).is_ok());
        s.links[0].target = "a".into();
        assert!(write_snapshot_json(&s, Vec::new()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![
            rec("p", "x", 0, dec!(100)),
            rec("p", "x", 10, dec!(90.5)),
            rec("p", "y", 0, dec!(50)),
            rec("p", "y", 10, dec!(54)),
        ];
        let s = build_snapshot(&table(&recs), &map(), 0, 10, &BuildOptions::default()).unwrap();
        let (mut n, mut l) = (Vec::new(), Vec::new());
        write_snapshot_csv(&s, &mut n, &mut l).unwrap();
        let back = read_snapshot_csv(n.as_slice(), l.as_slice()).unwrap();
        assert_eq!(back, s);
        let text = String::from_utf8(n).unwrap();
        assert!(text.contains("x:90.5|y:54"), "{text}");
    }
}
