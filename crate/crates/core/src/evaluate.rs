//! Database quality metrics computed against extracted PoPs.
//!
//! A coordinate-less answer counts as NULL everywhere in this module, even
//! when the database still knows the country.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{PopId, PopMap};
use crate::geo::{haversine_km, GeoCoord};
use crate::geodb::GeoDatabase;
use crate::ingest::Asn;
use crate::locate::{collect_elements, largest_group, locate_all, PopLocation, VoteConfig};
use crate::par;
use crate::records::{expect_fields, parse_field, read_records};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NullStats {
    pub db_name: String,
    pub pct_null_ip_core: f64,
    pub pct_null_pop_core: f64,
    pub pct_null_ip_all: f64,
    pub pct_null_pop_all: f64,
}

/// `(null addresses, addresses, fully-null PoPs, PoPs)` for one map.
fn null_counts(
    map: &PopMap,
    include_singletons: bool,
    db: &GeoDatabase,
) -> (usize, usize, usize, usize) {
    let mut counts = (0, 0, 0, map.pops.len());
    for pop in &map.pops {
        let mut all_null = true;
        for ip in pop.members(include_singletons) {
            counts.1 += 1;
            if db.query(ip).is_null() {
                counts.0 += 1;
            } else {
                all_null = false;
            }
        }
        if all_null {
            counts.2 += 1;
        }
    }
    counts
}

/// Address- and PoP-level NULL percentages, without and with singletons.
/// A PoP is NULL only when every one of its members is.
pub fn null_stats(
    popmap_core: &PopMap,
    popmap_all: &PopMap,
    db: &GeoDatabase,
) -> Result<NullStats> {
    if popmap_core.pops.is_empty() || popmap_all.pops.is_empty() {
        return Err(Error::Empty("PoP map"));
    }
    let pct = |num: usize, den: usize| 100.0 * num as f64 / den as f64;
    let (ni, ti, np, tp) = null_counts(popmap_core, false, db);
    let (ani, ati, anp, atp) = null_counts(popmap_all, true, db);
    Ok(NullStats {
        db_name: db.name().to_string(),
        pct_null_ip_core: pct(ni, ti),
        pct_null_pop_core: pct(np, tp),
        pct_null_ip_all: pct(ani, ati),
        pct_null_pop_all: pct(anp, atp),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfPoint {
    pub x: f64,
    pub fraction: f64,
}

/// Empirical CDF over `total` items, of which `unresolved` have no value and
/// sit in a terminal bucket beyond every `x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfSeries {
    pub label: String,
    pub points: Vec<CdfPoint>,
    pub total: usize,
    pub unresolved: usize,
}

impl CdfSeries {
    /// Builds the CDF of `samples`, counting `total - samples.len()` items
    /// as unresolved.
    pub fn from_samples(label: impl Into<String>, mut samples: Vec<f64>, total: usize) -> Self {
        debug_assert!(samples.len() <= total);
        samples.sort_by(f64::total_cmp);
        let mut points: Vec<CdfPoint> = Vec::new();
        for (i, &x) in samples.iter().enumerate() {
            let fraction = (i + 1) as f64 / total as f64;
            match points.last_mut() {
                Some(last) if last.x == x => last.fraction = fraction,
                _ => points.push(CdfPoint { x, fraction }),
            }
        }
        CdfSeries {
            label: label.into(),
            points,
            total,
            unresolved: total - samples.len(),
        }
    }

    pub fn terminal_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.unresolved as f64 / self.total as f64
        }
    }

    /// Cumulative fraction at `x` (inclusive).
    pub fn at(&self, x: f64) -> f64 {
        let i = self.points.partition_point(|p| p.x <= x);
        i.checked_sub(1).map_or(0.0, |i| self.points[i].fraction)
    }

    /// Strictly increasing `x`, non-decreasing fractions ending at most at 1,
    /// and a terminal bucket that exactly accounts for the remainder.
    pub fn check(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if w[0].x.partial_cmp(&w[1].x) != Some(std::cmp::Ordering::Less)
                || w[0].fraction > w[1].fraction
            {
                return Err(Error::Invariant(format!(
                    "CDF {} is not monotone",
                    self.label
                )));
            }
        }
        let last = self.points.last().map_or(0.0, |p| p.fraction);
        let resolved = (self.total - self.unresolved) as f64 / self.total.max(1) as f64;
        if last > 1.0 || (last - resolved).abs() > 1e-12 {
            return Err(Error::Invariant(format!(
                "CDF {} ends at {last}, expected {resolved}",
                self.label
            )));
        }
        Ok(())
    }
}

/// CDF of single-database convergence ranges; PoPs that are all-NULL or
/// never reach a majority form the terminal bucket.
pub fn convergence_cdf_from(label: impl Into<String>, locations: &[PopLocation]) -> CdfSeries {
    let samples = locations.iter().filter_map(|l| l.range_km).collect();
    CdfSeries::from_samples(label, samples, locations.len())
}

pub fn convergence_cdf(popmap: &PopMap, db: &GeoDatabase, cfg: &VoteConfig) -> CdfSeries {
    let locations = locate_all(
        popmap,
        std::slice::from_ref(db),
        cfg,
        popmap.with_singletons,
    );
    convergence_cdf_from(db.name(), &locations)
}

/// Largest fraction of a PoP's located answers inside one circle of
/// `radius_km`, centered on any located answer or on their median.
/// `None` when the database has no answer for any member.
pub fn pop_agreement(
    popmap: &PopMap,
    pop_index: usize,
    db: &GeoDatabase,
    radius_km: f64,
) -> Option<f64> {
    let pop = &popmap.pops[pop_index];
    let elements = collect_elements(pop, std::slice::from_ref(db), popmap.with_singletons);
    let located = elements.iter().filter(|e| e.coord.is_some()).count();
    if located == 0 {
        return None;
    }
    Some(largest_group(&elements, radius_km).len() as f64 / located as f64)
}

pub fn agreement_values(popmap: &PopMap, db: &GeoDatabase, radius_km: f64) -> Vec<Option<f64>> {
    let idx: Vec<usize> = (0..popmap.pops.len()).collect();
    par::map(&idx, |&i| pop_agreement(popmap, i, db, radius_km))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementCdf {
    pub radius_km: f64,
    pub series: CdfSeries,
    /// PoPs left out because every answer was NULL.
    pub null_pops: usize,
}

pub fn agreement_cdf(popmap: &PopMap, db: &GeoDatabase, radius_km: f64) -> AgreementCdf {
    let values = agreement_values(popmap, db, radius_km);
    let samples: Vec<f64> = values.iter().flatten().copied().collect();
    let null_pops = values.len() - samples.len();
    let total = samples.len();
    AgreementCdf {
        radius_km,
        series: CdfSeries::from_samples(db.name(), samples, total),
        null_pops,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationSample {
    pub pop_id: PopId,
    pub ip: Ipv4Addr,
    pub deviation_km: f64,
    /// The database's own convergence range for the PoP.
    pub range_km: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    pub db_name: String,
    pub samples: Vec<DeviationSample>,
    /// PoPs without a cross-database location.
    pub skipped_pops: usize,
}

impl DeviationReport {
    pub fn cdf(&self) -> CdfSeries {
        let samples: Vec<f64> = self.samples.iter().map(|s| s.deviation_km).collect();
        let n = samples.len();
        CdfSeries::from_samples(self.db_name.clone(), samples, n)
    }
}

/// Distance of every located answer of `db` from its PoP's voted location.
/// `cross` and `single` are per-PoP locations in map order: the vote over
/// all databases and the vote over `db` alone.
pub fn deviation_samples_from(
    popmap: &PopMap,
    db: &GeoDatabase,
    cross: &[PopLocation],
    single: &[PopLocation],
) -> DeviationReport {
    let mut samples = Vec::new();
    let mut skipped_pops = 0;
    for ((pop, c), s) in popmap.pops.iter().zip(cross).zip(single) {
        let Some(center) = c.coord else {
            skipped_pops += 1;
            continue;
        };
        for ip in pop.members(popmap.with_singletons) {
            if let Some(answer) = db.coord(ip) {
                samples.push(DeviationSample {
                    pop_id: pop.id,
                    ip,
                    deviation_km: haversine_km(center, answer),
                    range_km: s.range_km,
                });
            }
        }
    }
    DeviationReport {
        db_name: db.name().to_string(),
        samples,
        skipped_pops,
    }
}

pub fn deviation_samples(
    popmap: &PopMap,
    dbs: &[GeoDatabase],
    db_under_test: usize,
    cfg: &VoteConfig,
) -> Result<DeviationReport> {
    let db = dbs
        .get(db_under_test)
        .ok_or_else(|| Error::InvalidArgument(format!("no database at index {db_under_test}")))?;
    let cross = locate_all(popmap, dbs, cfg, popmap.with_singletons);
    let single = locate_all(
        popmap,
        std::slice::from_ref(db),
        cfg,
        popmap.with_singletons,
    );
    Ok(deviation_samples_from(popmap, db, &cross, &single))
}

/// Pearson coefficient; `None` for fewer than two values or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    pub db_names: Vec<String>,
    /// `None` marks an undefined coefficient.
    pub values: Vec<Vec<Option<f64>>>,
    pub include_nulls: bool,
}

fn location_vectors(
    a: &GeoDatabase,
    b: &GeoDatabase,
    ips: &[Ipv4Addr],
    include_nulls: bool,
) -> (Vec<f64>, Vec<f64>) {
    let sentinel = GeoCoord::new(0.0, 0.0).expect("valid");
    let pairs: Vec<(GeoCoord, GeoCoord)> = ips
        .iter()
        .filter_map(|&ip| match (a.coord(ip), b.coord(ip)) {
            (Some(x), Some(y)) => Some((x, y)),
            (x, y) if include_nulls => Some((x.unwrap_or(sentinel), y.unwrap_or(sentinel))),
            _ => None,
        })
        .collect();
    let xs = pairs
        .iter()
        .map(|p| p.0.lat())
        .chain(pairs.iter().map(|p| p.0.lon()))
        .collect();
    let ys = pairs
        .iter()
        .map(|p| p.1.lat())
        .chain(pairs.iter().map(|p| p.1.lon()))
        .collect();
    (xs, ys)
}

/// Pearson correlation between every pair of databases over the
/// concatenated latitude and longitude sequences of `ips`. By default only
/// addresses both databases locate are used; with `include_nulls`, NULL
/// answers enter as (0, 0).
pub fn correlation_matrix(
    dbs: &[GeoDatabase],
    ips: &[Ipv4Addr],
    include_nulls: bool,
) -> Result<CorrelationMatrix> {
    if dbs.len() < 2 {
        return Err(Error::InvalidArgument(
            "correlation needs at least two databases".into(),
        ));
    }
    let n = dbs.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let coeffs = par::map(&pairs, |&(i, j)| {
        let (xs, ys) = location_vectors(&dbs[i], &dbs[j], ips, include_nulls);
        pearson(&xs, &ys)
    });
    let mut values = vec![vec![None; n]; n];
    for (&(i, j), v) in pairs.iter().zip(coeffs) {
        values[i][j] = v;
        values[j][i] = v;
    }
    Ok(CorrelationMatrix {
        db_names: dbs.iter().map(|d| d.name().to_string()).collect(),
        values,
        include_nulls,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyParams {
    pub min_ips: usize,
    pub share_threshold: f64,
    pub rounding_deg: f64,
}

impl Default for AnomalyParams {
    fn default() -> Self {
        AnomalyParams {
            min_ips: 50,
            share_threshold: 0.8,
            rounding_deg: 0.01,
        }
    }
}

impl AnomalyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rounding_deg > 0.0 && self.rounding_deg.is_finite()) {
            return Err(Error::Config("rounding_deg must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.share_threshold) {
            return Err(Error::Config("share_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyReport {
    pub db_name: String,
    pub asn: Asn,
    pub dominant_coord: GeoCoord,
    pub share: f64,
    /// Located answers for the AS.
    pub ip_count: usize,
}

/// Flags ASes whose located answers pile onto a single (rounded) coordinate.
pub fn detect_default_location(
    db: &GeoDatabase,
    popmap: &PopMap,
    params: &AnomalyParams,
) -> Result<Vec<AnomalyReport>> {
    params.validate()?;
    let r = params.rounding_deg;
    let mut per_as: BTreeMap<Asn, BTreeMap<(i64, i64), usize>> = BTreeMap::new();
    for pop in &popmap.pops {
        let cells = per_as.entry(pop.asn).or_default();
        for ip in pop.members(popmap.with_singletons) {
            if let Some(c) = db.coord(ip) {
                let key = ((c.lat() / r).round() as i64, (c.lon() / r).round() as i64);
                *cells.entry(key).or_default() += 1;
            }
        }
    }
    let mut out = Vec::new();
    for (asn, cells) in per_as {
        let located: usize = cells.values().sum();
        if located == 0 || located < params.min_ips {
            continue;
        }
        let (&(klat, klon), &top) = cells
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("non-empty");
        let share = top as f64 / located as f64;
        if share >= params.share_threshold {
            out.push(AnomalyReport {
                db_name: db.name().to_string(),
                asn,
                dominant_coord: GeoCoord::new(
                    (klat as f64 / (1.0 / r)).clamp(-90.0, 90.0),
                    klon as f64 / (1.0 / r),
                )?,
                share,
                ip_count: located,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChurnReport {
    pub ip_count: usize,
    pub changed: usize,
    pub fraction: f64,
}

/// Share of addresses whose answer moved more than `epsilon_km` or switched
/// between NULL and located.
pub fn churn(
    db_old: &GeoDatabase,
    db_new: &GeoDatabase,
    ips: &[Ipv4Addr],
    epsilon_km: f64,
) -> Result<ChurnReport> {
    if ips.is_empty() {
        return Err(Error::Empty("address list"));
    }
    let changed = ips
        .iter()
        .filter(|&&ip| match (db_old.coord(ip), db_new.coord(ip)) {
            (None, None) => false,
            (Some(a), Some(b)) => haversine_km(a, b) > epsilon_km,
            _ => true,
        })
        .count();
    Ok(ChurnReport {
        ip_count: ips.len(),
        changed,
        fraction: changed as f64 / ips.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let ok = lat_min <= lat_max
            && lon_min <= lon_max
            && lat_min >= -90.0
            && lat_max <= 90.0
            && lon_min >= -180.0
            && lon_max <= 180.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid box lat {lat_min}..{lat_max}, lon {lon_min}..{lon_max}"
            )));
        }
        Ok(BoundingBox {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        })
    }

    pub fn contains(&self, c: GeoCoord) -> bool {
        (self.lat_min..=self.lat_max).contains(&c.lat())
            && (self.lon_min..=self.lon_max).contains(&c.lon())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSpec {
    pub name: String,
    pub boxes: Vec<BoundingBox>,
}

impl RegionSpec {
    pub fn contains(&self, c: GeoCoord) -> bool {
        self.boxes.iter().any(|b| b.contains(c))
    }
}

/// Europe, the United States, and the whole globe.
pub fn default_regions() -> Vec<RegionSpec> {
    let b = |a, b, c, d| BoundingBox::new(a, b, c, d).expect("static box");
    vec![
        RegionSpec {
            name: "Europe".into(),
            boxes: vec![b(35.0, 72.0, -11.0, 40.0)],
        },
        RegionSpec {
            name: "USA".into(),
            boxes: vec![
                b(24.0, 50.0, -125.0, -66.0),
                b(51.0, 72.0, -170.0, -129.0),
                b(18.5, 22.5, -161.0, -154.0),
            ],
        },
        RegionSpec {
            name: "World".into(),
            boxes: vec![b(-90.0, 90.0, -180.0, 180.0)],
        },
    ]
}

/// Reads `name,lat_min,lat_max,lon_min,lon_max` rows; rows sharing a name
/// are unioned. Regions keep the order of their first row.
pub fn load_regions<R: Read>(reader: R, error_cap: usize) -> Result<Vec<RegionSpec>> {
    let rows = read_records(reader, error_cap, |rec| {
        expect_fields(rec, 5)?;
        let name = rec[0].to_string();
        if name.is_empty() {
            return Err("empty region name".into());
        }
        let vals: Vec<f64> = (1..5)
            .map(|i| parse_field(rec, i, "bound"))
            .collect::<std::result::Result<_, _>>()?;
        let bbox =
            BoundingBox::new(vals[0], vals[1], vals[2], vals[3]).map_err(|e| e.to_string())?;
        Ok((name, bbox))
    })?
    .strict()?;

    let mut regions: Vec<RegionSpec> = Vec::new();
    for (name, bbox) in rows {
        match regions.iter_mut().find(|r| r.name == name) {
            Some(r) => r.boxes.push(bbox),
            None => regions.push(RegionSpec {
                name,
                boxes: vec![bbox],
            }),
        }
    }
    Ok(regions)
}

/// PoPs whose cross-database location falls inside `region`. PoPs without a
/// location belong to no region.
pub fn filter_by_region(popmap: &PopMap, locations: &[PopLocation], region: &RegionSpec) -> PopMap {
    let coords: HashMap<PopId, GeoCoord> = locations
        .iter()
        .filter_map(|l| l.coord.map(|c| (l.pop_id, c)))
        .collect();
    popmap.subset(|p| coords.get(&p.id).is_some_and(|&c| region.contains(c)))
}
