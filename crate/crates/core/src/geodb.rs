//! Geolocation sources behind one query interface.
//!
//! Range databases map closed `[start, end]` address intervals to records;
//! point databases map exact addresses. A record whose coordinates are
//! missing is a NULL answer even if it still names a country.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::net::Ipv4Addr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{PopId, PopMap};
use crate::geo::GeoCoord;
use crate::ingest::Asn;
use crate::records::{expect_fields, parse_field, parse_opt_f64, read_records, Parsed};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GeoRecord {
    pub coord: Option<GeoCoord>,
    pub country: Option<String>,
    pub city: Option<String>,
}

impl GeoRecord {
    pub const NULL: GeoRecord = GeoRecord {
        coord: None,
        country: None,
        city: None,
    };

    pub fn at(coord: GeoCoord) -> Self {
        GeoRecord {
            coord: Some(coord),
            ..GeoRecord::NULL
        }
    }

    pub fn is_null(&self) -> bool {
        self.coord.is_none()
    }
}

static NULL_RECORD: GeoRecord = GeoRecord::NULL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DbKind {
    Range,
    Point,
}

#[derive(Debug, Clone, Copy)]
struct Span {
    start: u32,
    end: u32,
    record: usize,
}

#[derive(Debug, Clone)]
enum Store {
    Range {
        spans: Vec<Span>,
        records: Vec<GeoRecord>,
    },
    Point(BTreeMap<u32, GeoRecord>),
}

#[derive(Debug, Clone)]
pub struct GeoDatabase {
    name: String,
    store: Store,
}

impl GeoDatabase {
    /// Builds a range database; later ranges win where they overlap earlier
    /// ones, and the survivors are split so that spans stay disjoint.
    pub fn from_ranges<I>(name: impl Into<String>, ranges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Ipv4Addr, Ipv4Addr, GeoRecord)>,
    {
        let mut painted: BTreeMap<u32, (u32, usize)> = BTreeMap::new();
        let mut records = Vec::new();
        for (start, end, record) in ranges {
            let (s, e) = (u32::from(start), u32::from(end));
            if s > e {
                return Err(Error::InvalidArgument(format!(
                    "range start {start} exceeds end {end}"
                )));
            }
            records.push(record);
            paint(&mut painted, s, e, records.len() - 1);
        }
        let spans = painted
            .into_iter()
            .map(|(start, (end, record))| Span { start, end, record })
            .collect();
        Ok(GeoDatabase {
            name: name.into(),
            store: Store::Range { spans, records },
        })
    }

    /// Builds a point database; the last record for a repeated address wins.
    pub fn from_points<I>(name: impl Into<String>, points: I) -> Self
    where
        I: IntoIterator<Item = (Ipv4Addr, GeoRecord)>,
    {
        let table = points
            .into_iter()
            .map(|(ip, r)| (u32::from(ip), r))
            .collect();
        GeoDatabase {
            name: name.into(),
            store: Store::Point(table),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> DbKind {
        match self.store {
            Store::Range { .. } => DbKind::Range,
            Store::Point(_) => DbKind::Point,
        }
    }

    pub fn query(&self, ip: Ipv4Addr) -> &GeoRecord {
        let addr = u32::from(ip);
        match &self.store {
            Store::Range { spans, records } => {
                let i = spans.partition_point(|s| s.start <= addr);
                match i.checked_sub(1).map(|i| spans[i]) {
                    Some(span) if span.end >= addr => &records[span.record],
                    _ => &NULL_RECORD,
                }
            }
            Store::Point(table) => table.get(&addr).unwrap_or(&NULL_RECORD),
        }
    }

    pub fn coord(&self, ip: Ipv4Addr) -> Option<GeoCoord> {
        self.query(ip).coord
    }

    /// Number of disjoint spans (range kind) or addresses (point kind).
    pub fn len(&self) -> usize {
        match &self.store {
            Store::Range { spans, .. } => spans.len(),
            Store::Point(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Strips coordinates matching `nulls`, keeping country and city.
    /// Returns the number of records changed.
    pub fn apply_null_coords(&mut self, nulls: &NullCoords) -> usize {
        let records: Box<dyn Iterator<Item = &mut GeoRecord>> = match &mut self.store {
            Store::Range { records, .. } => Box::new(records.iter_mut()),
            Store::Point(t) => Box::new(t.values_mut()),
        };
        let mut changed = 0;
        for r in records {
            if r.coord.is_some_and(|c| nulls.contains(c)) {
                r.coord = None;
                changed += 1;
            }
        }
        changed
    }

    /// Writes a point database as `ip,lat,lon` lines.
    pub fn write_point_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let Store::Point(table) = &self.store else {
            return Err(Error::InvalidArgument(format!(
                "database {} is not a point database",
                self.name
            )));
        };
        for (&ip, r) in table {
            match r.coord {
                Some(c) => writeln!(w, "{},{},{}", Ipv4Addr::from(ip), c.lat(), c.lon())?,
                None => writeln!(w, "{},,", Ipv4Addr::from(ip))?,
            }
        }
        Ok(())
    }
}

fn paint(map: &mut BTreeMap<u32, (u32, usize)>, s: u32, e: u32, record: usize) {
    let overlapping: Vec<(u32, (u32, usize))> = map
        .range(..=e)
        .rev()
        .take_while(|(_, &(end, _))| end >= s)
        .map(|(&k, &v)| (k, v))
        .collect();
    for (start, (end, old)) in overlapping {
        map.remove(&start);
        if start < s {
            map.insert(start, (s - 1, old));
        }
        if end > e {
            map.insert(e + 1, (end, old));
        }
    }
    map.insert(s, (e, record));
}

fn coord_fields(
    rec: &csv::StringRecord,
    lat_idx: usize,
    lon_idx: usize,
) -> std::result::Result<Option<GeoCoord>, String> {
    match (
        parse_opt_f64(rec, lat_idx, "latitude")?,
        parse_opt_f64(rec, lon_idx, "longitude")?,
    ) {
        (None, None) => Ok(None),
        (Some(lat), Some(lon)) => GeoCoord::new(lat, lon).map(Some).map_err(|e| e.to_string()),
        _ => Err("latitude and longitude must both be present or both empty".into()),
    }
}

fn opt_text(rec: &csv::StringRecord, idx: usize) -> Option<String> {
    let s = &rec[idx];
    (!s.is_empty()).then(|| s.to_string())
}

/// Reads `start_ip,end_ip,country,city,lat,lon` lines.
pub fn load_range_db<R: Read>(
    reader: R,
    name: &str,
    error_cap: usize,
) -> Result<(GeoDatabase, Parsed<()>)> {
    let parsed = read_records(reader, error_cap, |rec| {
        expect_fields(rec, 6)?;
        let start: Ipv4Addr = parse_field(rec, 0, "start address")?;
        let end: Ipv4Addr = parse_field(rec, 1, "end address")?;
        if start > end {
            return Err(format!("range start {start} exceeds end {end}"));
        }
        let record = GeoRecord {
            coord: coord_fields(rec, 4, 5)?,
            country: opt_text(rec, 2),
            city: opt_text(rec, 3),
        };
        Ok((start, end, record))
    })?;
    let db = GeoDatabase::from_ranges(name, parsed.items)?;
    Ok((
        db,
        Parsed {
            items: Vec::new(),
            errors: parsed.errors,
        },
    ))
}

/// Reads `ip,lat,lon` lines; empty coordinates are NULL answers.
pub fn load_point_db<R: Read>(
    reader: R,
    name: &str,
    error_cap: usize,
) -> Result<(GeoDatabase, Parsed<()>)> {
    let parsed = read_records(reader, error_cap, |rec| {
        expect_fields(rec, 3)?;
        let ip: Ipv4Addr = parse_field(rec, 0, "address")?;
        Ok((
            ip,
            GeoRecord {
                coord: coord_fields(rec, 1, 2)?,
                ..GeoRecord::NULL
            },
        ))
    })?;
    let db = GeoDatabase::from_points(name, parsed.items);
    Ok((
        db,
        Parsed {
            items: Vec::new(),
            errors: parsed.errors,
        },
    ))
}

/// Coordinates that stand for "no specific location", such as
/// country-center placeholders. Matching is at micro-degree resolution.
#[derive(Debug, Clone, Default)]
pub struct NullCoords {
    keys: HashSet<(i64, i64)>,
}

impl NullCoords {
    fn key(c: GeoCoord) -> (i64, i64) {
        (
            (c.lat() * 1e6).round() as i64,
            (c.lon() * 1e6).round() as i64,
        )
    }

    pub fn contains(&self, c: GeoCoord) -> bool {
        self.keys.contains(&Self::key(c))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

impl FromIterator<GeoCoord> for NullCoords {
    fn from_iter<I: IntoIterator<Item = GeoCoord>>(iter: I) -> Self {
        NullCoords {
            keys: iter.into_iter().map(Self::key).collect(),
        }
    }
}

/// Reads one `lat,lon` per line.
pub fn load_null_coords<R: Read>(reader: R, error_cap: usize) -> Result<Parsed<GeoCoord>> {
    read_records(reader, error_cap, |rec| {
        expect_fields(rec, 2)?;
        coord_fields(rec, 0, 1)?.ok_or_else(|| "empty coordinate".to_string())
    })
}

/// Pins a share of one AS's addresses to a single coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HqOverride {
    pub asn: Asn,
    pub coord: GeoCoord,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDbParams {
    pub name: String,
    #[serde(default)]
    pub noise_km: f64,
    #[serde(default)]
    pub null_rate: f64,
    #[serde(default)]
    pub hq_override: Option<HqOverride>,
}

impl SynthDbParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_km.is_finite() && self.noise_km >= 0.0) {
            return Err(Error::Config(format!(
                "{}: noise_km must be non-negative",
                self.name
            )));
        }
        if !(0.0..=1.0).contains(&self.null_rate) {
            return Err(Error::Config(format!(
                "{}: null_rate must lie in [0, 1]",
                self.name
            )));
        }
        if let Some(hq) = &self.hq_override {
            if !(0.0..=1.0).contains(&hq.fraction) {
                return Err(Error::Config(format!(
                    "{}: override fraction must lie in [0, 1]",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Synthesizes a point database from planted PoP locations.
///
/// Every member (core and singleton) of every PoP is placed at its PoP's
/// true coordinate, displaced by a uniform bearing and a uniform distance
/// below `noise_km`, and nulled with probability `null_rate`. With an
/// override, `ceil(fraction * n)` of the AS's `n` addresses, chosen by a
/// seeded shuffle, sit at the override coordinate instead.
pub fn synth_db(
    truth: &BTreeMap<PopId, GeoCoord>,
    popmap: &PopMap,
    params: &SynthDbParams,
    seed: u64,
) -> Result<GeoDatabase> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pinned = BTreeSet::new();
    if let Some(hq) = &params.hq_override {
        let mut ips: Vec<Ipv4Addr> = popmap
            .pops
            .iter()
            .filter(|p| p.asn == hq.asn)
            .flat_map(|p| p.members(true))
            .collect();
        ips.sort();
        ips.shuffle(&mut rng);
        let take = ((hq.fraction * ips.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        pinned.extend(ips.into_iter().take(take));
    }

    let mut points = Vec::new();
    for pop in &popmap.pops {
        let center = *truth
            .get(&pop.id)
            .ok_or_else(|| Error::Config(format!("no true location for PoP {}", pop.id)))?;
        let mut members: Vec<Ipv4Addr> = pop.members(true).collect();
        members.sort();
        for ip in members {
            let nulled = rng.gen::<f64>() < params.null_rate;
            let bearing = rng.gen_range(0.0..360.0);
            let distance = rng.gen::<f64>() * params.noise_km;
            let record = if pinned.contains(&ip) {
                GeoRecord::at(params.hq_override.expect("override set").coord)
            } else if nulled {
                GeoRecord::NULL
            } else if distance > 0.0 {
                GeoRecord::at(center.destination(bearing, distance))
            } else {
                GeoRecord::at(center)
            };
            points.push((ip, record));
        }
    }
    Ok(GeoDatabase::from_points(params.name.clone(), points))
}
