//! Protocol-level diagnostics around an event date: largest net exposure
//! change and largest cut edge per sector and week.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Duration, NaiveDate};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::{Sector, SectorMap};
use crate::error::{Error, Result};
use crate::graph::IndexedGraph;
use crate::netbuild::{Link, NetworkSnapshot};

/// Inbound minus outbound link volume per node.
pub fn net_exposure_change(snapshot: &NetworkSnapshot) -> BTreeMap<String, Decimal> {
    let mut out: BTreeMap<String, Decimal> = snapshot
        .nodes
        .iter()
        .map(|n| (n.id.clone(), Decimal::ZERO))
        .collect();
    for l in &snapshot.links {
        *out.entry(l.target.clone()).or_default() += l.size;
        *out.entry(l.source.clone()).or_default() -= l.size;
    }
    out
}

/// Links whose undirected edge is a bridge of the undirected projection.
pub fn cut_edges(snapshot: &NetworkSnapshot) -> Vec<&Link> {
    let g = IndexedGraph::from_snapshot(snapshot);
    let bridges = g.bridges();
    snapshot
        .links
        .iter()
        .filter(|l| {
            let (a, b) = (g.index[&l.source], g.index[&l.target]);
            bridges.binary_search(&(a.min(b), a.max(b))).is_ok()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentRow {
    /// Weeks relative to the event.
    pub week: i64,
    pub date: NaiveDate,
    pub sector: Sector,
    pub protocol: Option<String>,
    pub net_change: Option<Decimal>,
    pub cut_edge: Option<(String, String)>,
    pub cut_edge_size: Option<Decimal>,
    pub note: Option<String>,
}

/// Rows for weeks `-window..=window` around `event` and each of `sectors`.
/// Cut edges are attributed to a sector when either endpoint belongs to it.
pub fn incident_table(
    snapshots: &[NetworkSnapshot],
    map: &SectorMap,
    event: NaiveDate,
    window: i64,
    sectors: &[Sector],
) -> Result<Vec<IncidentRow>> {
    let by_date: BTreeMap<NaiveDate, &NetworkSnapshot> =
        snapshots.iter().map(|s| (s.date, s)).collect();
    if !by_date.contains_key(&event) {
        return Err(Error::Parameter(format!("no snapshot dated {event}")));
    }
    let mut rows = Vec::new();
    for week in -window..=window {
        let date = event + Duration::days(7 * week);
        let Some(snap) = by_date.get(&date) else {
            for &sector in sectors {
                rows.push(IncidentRow {
                    week,
                    date,
                    sector,
                    protocol: None,
                    net_change: None,
                    cut_edge: None,
                    cut_edge_size: None,
                    note: Some("no snapshot".into()),
                });
            }
            continue;
        };
        let net = net_exposure_change(snap);
        let cuts = cut_edges(snap);
        for &sector in sectors {
            let top = net
                .iter()
                .filter(|(id, _)| map.sector_of(id) == sector)
                // Iteration is in id order, so keeping the first maximum
                // breaks ties by id.
                .fold(None::<(&String, Decimal)>, |best, (id, v)| match best {
                    Some((_, b)) if b.abs() >= v.abs() => best,
                    _ => Some((id, *v)),
                });
            let cut = cuts
                .iter()
                .filter(|l| map.sector_of(&l.source) == sector || map.sector_of(&l.target) == sector)
                .fold(None::<&&Link>, |best, l| match best {
                    Some(b) if b.size >= l.size => best,
                    _ => Some(l),
                });
            let note = match (top.is_none(), cut.is_none()) {
                (true, _) => Some("no protocols in sector".to_owned()),
                (false, true) => Some("no cut edge in sector".to_owned()),
                _ => None,
            };
            rows.push(IncidentRow {
                week,
                date,
                sector,
                protocol: top.map(|(id, _)| id.clone()),
                net_change: top.map(|(_, v)| v),
                cut_edge: cut.map(|l| (l.source.clone(), l.target.clone())),
                cut_edge_size: cut.map(|l| l.size),
                note,
            });
        }
    }
    Ok(rows)
}

/// Values are divided by `scale` (e.g. `1e9` for billions).
pub fn write_incident_csv<W: Write>(rows: &[IncidentRow], scale: Decimal, sink: W) -> Result<()> {
    if scale <= Decimal::ZERO {
        return Err(Error::Parameter("display scale must be positive".into()));
    }
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "week",
        "date",
        "sector",
        "protocol",
        "net_change",
        "cut_edge_source",
        "cut_edge_target",
        "cut_edge_size",
        "note",
    ])?;
    let fmt = |v: Option<Decimal>| v.map(|v| (v / scale).normalize().to_string()).unwrap_or_default();
    for r in rows {
        let (s, t) = r.cut_edge.clone().unwrap_or_default();
        w.write_record([
            r.week.to_string(),
            r.date.format("%Y-%m-%d").to_string(),
            r.sector.name().to_owned(),
            r.protocol.clone().unwrap_or_default(),
            fmt(r.net_change),
            s,
            t,
            fmt(r.cut_edge_size),
            r.note.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netbuild::{Composition, Node};
    use rust_decimal_macros::dec;

    fn link(s: &str, t: &str, v: Decimal) -> Link {
        Link {
            source: s.into(),
            target: t.into(),
            size: v,
            composition: Composition::from([("x".to_owned(), v)]),
        }
    }

    fn snap(date: NaiveDate, links: Vec<Link>) -> NetworkSnapshot {
        let mut ids: Vec<String> = links
            .iter()
            .flat_map(|l| [l.source.clone(), l.target.clone()])
            .collect();
        ids.sort();
        ids.dedup();
        NetworkSnapshot {
            date,
            nodes: ids
                .into_iter()
                .map(|id| Node {
                    id,
                    size: dec!(1),
                    composition: Composition::new(),
                })
                .collect(),
            links,
        }
    }

    #[test]
    fn net_change_is_in_minus_out() {
        let d = NaiveDate::from_ymd_opt(2022, 5, 9).unwrap();
        let s = snap(d, vec![link("a", "n", dec!(7)), link("n", "b", dec!(3))]);
        assert_eq!(net_exposure_change(&s)["n"], dec!(4));
    }

    #[test]
    fn tree_links_are_cut_edges_cycle_links_are_not() {
        let d = NaiveDate::from_ymd_opt(2022, 5, 9).unwrap();
        let tree = snap(d, vec![link("a", "b", dec!(1)), link("b", "c", dec!(1)), link("b", "d", dec!(1))]);
        assert_eq!(cut_edges(&tree).len(), 3);
        let cycle = snap(
            d,
            vec![link("a", "b", dec!(1)), link("b", "c", dec!(1)), link("c", "d", dec!(1)), link("d", "a", dec!(1))],
        );
        assert!(cut_edges(&cycle).is_empty());
    }

    #[test]
    fn table_reports_top_protocol_and_cut_edge() {
        let event = NaiveDate::from_ymd_opt(2022, 5, 9).unwrap();
        let map = SectorMap::standard().with_protocol_categories([
            ("lido", "Liquid Staking"),
            ("yearn", "Yield Aggregator"),
            ("curve", "Dexes"),
        ]);
        let s0 = snap(
            event,
            vec![link("lido", "usdt", dec!(5)), link("yearn", "usdt", dec!(2)), link("usdt", "curve", dec!(1))],
        );
        let rows = incident_table(&[s0], &map, event, 1, &[Sector::AssetManagement, Sector::TradingExchanges])
            .unwrap();
        assert_eq!(rows.len(), 6);
        let am = rows
            .iter()
            .find(|r| r.week == 0 && r.sector == Sector::AssetManagement)
            .unwrap();
        assert_eq!(am.protocol.as_deref(), Some("lido"));
        assert_eq!(am.net_change, Some(dec!(-5)));
        assert_eq!(am.cut_edge, Some(("lido".into(), "usdt".into())));
        let te = rows
            .iter()
            .find(|r| r.week == 0 && r.sector == Sector::TradingExchanges)
            .unwrap();
        assert_eq!(te.protocol.as_deref(), Some("curve"));
        assert!(rows.iter().filter(|r| r.week != 0).all(|r| r.note.is_some()));

        let mut buf = Vec::new();
        write_incident_csv(&rows, dec!(1), &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("lido,-5,lido,usdt,5"));
    }

    #[test]
    fn missing_event_snapshot_is_an_error() {
        let d = NaiveDate::from_ymd_opt(2022, 5, 9).unwrap();
        assert!(incident_table(&[], &SectorMap::standard(), d, 2, &[Sector::Others]).is_err());
    }
}
