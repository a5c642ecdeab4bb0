//! Delay observations, the aggregated interface graph, and IP-to-AS mapping.
//!
//! Observations are one-hop delay estimates that have already been
//! decomposed from traceroute paths upstream; whether they are RTT halves or
//! link delays is up to the producer.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geo::median_sorted;
use crate::records::{expect_fields, parse_field, read_records, Parsed};

/// Autonomous system number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Asn(pub u32);

impl fmt::Display for Asn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayObservation {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub delay_ms: f64,
}

/// A directed interface edge aggregated from all of its observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayEdge {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub median_delay_ms: f64,
    pub count: u32,
    pub as_src: Option<Asn>,
    pub as_dst: Option<Asn>,
}

impl DelayEdge {
    /// The shared AS of both endpoints, if both are known and equal.
    pub fn intra_as(&self) -> Option<Asn> {
        match (self.as_src, self.as_dst) {
            (Some(a), Some(b)) if a == b => Some(a),
            _ => None,
        }
    }
}

/// Reads `src_ip,dst_ip,delay_ms` lines.
pub fn parse_observations<R: Read>(
    reader: R,
    error_cap: usize,
) -> Result<Parsed<DelayObservation>> {
    read_records(reader, error_cap, |rec| {
        expect_fields(rec, 3)?;
        let src: Ipv4Addr = parse_field(rec, 0, "source address")?;
        let dst: Ipv4Addr = parse_field(rec, 1, "destination address")?;
        let delay_ms: f64 = parse_field(rec, 2, "delay")?;
        if src == dst {
            return Err(format!("self-loop on {src}"));
        }
        if !delay_ms.is_finite() || delay_ms < 0.0 {
            return Err(format!("negative or non-finite delay {delay_ms}"));
        }
        Ok(DelayObservation { src, dst, delay_ms })
    })
}

/// Collapses observations into one edge per ordered `(src, dst)` pair,
/// sorted by numeric address.
pub fn aggregate_edges(obs: &[DelayObservation]) -> Vec<DelayEdge> {
    let mut groups: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
    for o in obs {
        groups
            .entry((u32::from(o.src), u32::from(o.dst)))
            .or_default()
            .push(o.delay_ms);
    }
    groups
        .into_iter()
        .map(|((src, dst), mut delays)| {
            delays.sort_by(f64::total_cmp);
            DelayEdge {
                src: src.into(),
                dst: dst.into(),
                median_delay_ms: median_sorted(&delays),
                count: delays.len() as u32,
                as_src: None,
                as_dst: None,
            }
        })
        .collect()
}

/// Longest-prefix-match table from IPv4 prefixes to AS numbers.
#[derive(Debug, Clone, Default)]
pub struct PrefixMap {
    // indexed by prefix length; keys are network addresses
    by_len: Vec<HashMap<u32, Asn>>,
    entries: Vec<(Ipv4Net, Asn)>,
}

impl PrefixMap {
    pub fn new() -> Self {
        PrefixMap {
            by_len: vec![HashMap::new(); 33],
            entries: Vec::new(),
        }
    }

    /// Adds a prefix; re-inserting an existing prefix replaces its AS.
    pub fn insert(&mut self, prefix: Ipv4Net, asn: Asn) {
        if self.by_len.is_empty() {
            self.by_len = vec![HashMap::new(); 33];
        }
        let prefix = prefix.trunc();
        let slot = &mut self.by_len[prefix.prefix_len() as usize];
        if slot.insert(u32::from(prefix.network()), asn).is_some() {
            self.entries.retain(|(p, _)| *p != prefix);
        }
        self.entries.push((prefix, asn));
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> Option<Asn> {
        let addr = u32::from(ip);
        self.by_len
            .iter()
            .enumerate()
            .rev()
            .find_map(|(len, table)| {
                if table.is_empty() {
                    return None;
                }
                let mask = if len == 0 { 0 } else { u32::MAX << (32 - len) };
                table.get(&(addr & mask)).copied()
            })
    }

    pub fn entries(&self) -> &[(Ipv4Net, Asn)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reads `prefix/len,asn` lines.
pub fn load_ip2as<R: Read>(reader: R, error_cap: usize) -> Result<Parsed<(Ipv4Net, Asn)>> {
    read_records(reader, error_cap, |rec| {
        expect_fields(rec, 2)?;
        let prefix: Ipv4Net = parse_field(rec, 0, "CIDR prefix")?;
        let asn: u32 = parse_field(rec, 1, "AS number")?;
        Ok((prefix, Asn(asn)))
    })
}

impl FromIterator<(Ipv4Net, Asn)> for PrefixMap {
    fn from_iter<I: IntoIterator<Item = (Ipv4Net, Asn)>>(iter: I) -> Self {
        let mut map = PrefixMap::new();
        for (p, a) in iter {
            map.insert(p, a);
        }
        map
    }
}

/// Fills both endpoint AS labels from the prefix map.
pub fn annotate_as(edges: &mut [DelayEdge], map: &PrefixMap) {
    for e in edges {
        e.as_src = map.lookup(e.src);
        e.as_dst = map.lookup(e.dst);
    }
}
