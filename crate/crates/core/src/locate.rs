//! PoP geolocation by majority vote over per-address database answers.
//!
//! Every (address, database) pair is one vote. The vote starts at the
//! component-wise median of all located votes and grows a circle around it
//! in fixed kilometer steps until it holds the required share of located
//! votes. The final position is the median of the votes inside that circle.
//! When no radius up to the limit reaches a majority, the position comes
//! from the largest group of votes that fits in a circle of the limit radius.

use std::io::Write;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{Pop, PopId, PopMap};
use crate::geo::{coordinate_median, haversine_km, GeoCoord};
use crate::geodb::GeoDatabase;
use crate::par;

/// One database's answer for one address.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpElement<'a> {
    pub ip: Ipv4Addr,
    pub db_name: &'a str,
    pub coord: Option<GeoCoord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteConfig {
    pub step_km: f64,
    pub max_radius_km: f64,
    pub majority_fraction: f64,
}

impl Default for VoteConfig {
    /// 0.01 degree steps up to 5 degrees.
    fn default() -> Self {
        VoteConfig {
            step_km: 1.11,
            max_radius_km: 555.0,
            majority_fraction: 0.5,
        }
    }
}

impl VoteConfig {
    /// 0.01 degree steps up to 1 degree.
    pub fn one_degree() -> Self {
        VoteConfig {
            max_radius_km: 111.0,
            ..Self::default()
        }
    }

    /// 1 km steps up to 500 km, the grid used for convergence curves.
    pub fn km_grid_500() -> Self {
        VoteConfig {
            step_km: 1.0,
            max_radius_km: 500.0,
            majority_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_km.is_finite() && self.step_km > 0.0 && self.step_km <= self.max_radius_km) {
            return Err(Error::Config(format!(
                "need 0 < step_km ({}) <= max_radius_km ({})",
                self.step_km, self.max_radius_km
            )));
        }
        if !self.max_radius_km.is_finite() {
            return Err(Error::Config("max_radius_km must be finite".into()));
        }
        if !(self.majority_fraction > 0.0 && self.majority_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "majority_fraction must lie in (0, 1], got {}",
                self.majority_fraction
            )));
        }
        Ok(())
    }

    /// Number of radii in the grid `step, 2*step, ..., max_radius`.
    pub fn radius_count(&self) -> usize {
        ((self.max_radius_km / self.step_km) - 1e-9).ceil().max(1.0) as usize
    }

    /// The `k`-th grid radius, 1-based; the last one is exactly `max_radius_km`.
    pub fn radius(&self, k: usize) -> f64 {
        if k >= self.radius_count() {
            self.max_radius_km
        } else {
            k as f64 * self.step_km
        }
    }
}

/// Smallest vote count that satisfies `count >= fraction * located`.
pub fn required_votes(located: usize, fraction: f64) -> usize {
    let need = fraction * located as f64;
    let mut m = need.ceil().max(0.0) as usize;
    while m > 0 && (m - 1) as f64 >= need {
        m -= 1;
    }
    while (m as f64) < need {
        m += 1;
    }
    m
}

/// The `N x M` answer grid for a PoP, address-major.
pub fn collect_elements<'a>(
    pop: &Pop,
    dbs: &'a [GeoDatabase],
    include_singletons: bool,
) -> Vec<IpElement<'a>> {
    pop.members(include_singletons)
        .flat_map(|ip| {
            dbs.iter().map(move |db| IpElement {
                ip,
                db_name: db.name(),
                coord: db.coord(ip),
            })
        })
        .collect()
}

fn located<'e>(elements: &'e [IpElement<'_>]) -> impl Iterator<Item = GeoCoord> + 'e {
    elements.iter().filter_map(|e| e.coord)
}

/// Smallest grid radius around `center` holding the required share of
/// located elements, and whether one was found. Without a majority the
/// limit radius is returned with `false`.
pub fn majority_vote_range(
    elements: &[IpElement<'_>],
    center: GeoCoord,
    cfg: &VoteConfig,
) -> Result<(f64, bool)> {
    let mut dists: Vec<f64> = located(elements).map(|c| haversine_km(center, c)).collect();
    if dists.is_empty() {
        return Err(Error::Empty("located element list"));
    }
    dists.sort_by(f64::total_cmp);
    let needed = required_votes(dists.len(), cfg.majority_fraction).max(1);
    let reach = dists[needed - 1];

    let n = cfg.radius_count();
    if reach > cfg.radius(n) {
        return Ok((cfg.max_radius_km, false));
    }
    // first k in 1..=n with radius(k) >= reach
    let k = 1
        + (1..=n)
            .collect::<Vec<_>>()
            .partition_point(|&k| cfg.radius(k) < reach);
    Ok((cfg.radius(k), true))
}

/// Median of the located elements within `range_km` of `center`, if any.
pub fn refine_location(
    elements: &[IpElement<'_>],
    center: GeoCoord,
    range_km: f64,
) -> Option<GeoCoord> {
    let inside: Vec<GeoCoord> = located(elements)
        .filter(|&c| haversine_km(center, c) <= range_km)
        .collect();
    coordinate_median(&inside).ok()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopLocation {
    pub pop_id: PopId,
    pub coord: Option<GeoCoord>,
    /// `None` when no majority was reached within the limit radius.
    pub range_km: Option<f64>,
    pub frac_all: f64,
    pub frac_located: f64,
    pub majority_found: bool,
}

impl PopLocation {
    fn null(pop_id: PopId) -> Self {
        PopLocation {
            pop_id,
            coord: None,
            range_km: None,
            frac_all: 0.0,
            frac_located: 0.0,
            majority_found: false,
        }
    }
}

/// Coordinates within `radius_km` of the candidate center that captures the
/// most located elements. Candidates are every located coordinate plus
/// their median; ties go to the lowest (lat, lon).
pub fn largest_group(elements: &[IpElement<'_>], radius_km: f64) -> Vec<GeoCoord> {
    let coords: Vec<GeoCoord> = located(elements).collect();
    let Ok(median) = coordinate_median(&coords) else {
        return Vec::new();
    };
    let mut candidates = coords.clone();
    candidates.push(median);
    candidates.sort_by(GeoCoord::total_cmp);
    candidates.dedup();

    let mut best: Option<(usize, GeoCoord)> = None;
    for cand in candidates {
        let count = coords
            .iter()
            .filter(|&&c| haversine_km(cand, c) <= radius_km)
            .count();
        if best.is_none_or(|(b, _)| count > b) {
            best = Some((count, cand));
        }
    }
    let (_, center) = best.expect("at least one candidate");
    coords
        .into_iter()
        .filter(|&c| haversine_km(center, c) <= radius_km)
        .collect()
}

/// Locates a PoP from its element grid.
pub fn locate_elements(pop_id: PopId, elements: &[IpElement<'_>], cfg: &VoteConfig) -> PopLocation {
    let coords: Vec<GeoCoord> = located(elements).collect();
    let Ok(center) = coordinate_median(&coords) else {
        return PopLocation::null(pop_id);
    };
    let total = elements.len() as f64;
    let n_located = coords.len() as f64;

    let (range, found) =
        majority_vote_range(elements, center, cfg).expect("located elements exist");
    if found {
        let coord = refine_location(elements, center, range).unwrap_or(center);
        let inside = coords
            .iter()
            .filter(|&&c| haversine_km(coord, c) <= range)
            .count() as f64;
        PopLocation {
            pop_id,
            coord: Some(coord),
            range_km: Some(range),
            frac_all: inside / total,
            frac_located: inside / n_located,
            majority_found: true,
        }
    } else {
        let group = largest_group(elements, cfg.max_radius_km);
        let coord = coordinate_median(&group).expect("largest group is non-empty");
        let inside = group.len() as f64;
        PopLocation {
            pop_id,
            coord: Some(coord),
            range_km: None,
            frac_all: inside / total,
            frac_located: inside / n_located,
            majority_found: false,
        }
    }
}

pub fn locate_pop(
    pop: &Pop,
    dbs: &[GeoDatabase],
    cfg: &VoteConfig,
    include_singletons: bool,
) -> PopLocation {
    let elements = collect_elements(pop, dbs, include_singletons);
    locate_elements(pop.id, &elements, cfg)
}

pub fn locate_pop_single_db(
    pop: &Pop,
    db: &GeoDatabase,
    cfg: &VoteConfig,
    include_singletons: bool,
) -> PopLocation {
    locate_pop(pop, std::slice::from_ref(db), cfg, include_singletons)
}

/// Locates every PoP of the map, in map order.
pub fn locate_all(
    popmap: &PopMap,
    dbs: &[GeoDatabase],
    cfg: &VoteConfig,
    include_singletons: bool,
) -> Vec<PopLocation> {
    par::map(&popmap.pops, |pop| {
        locate_pop(pop, dbs, cfg, include_singletons)
    })
}

/// Serialized form of a [`PopLocation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationRow {
    pub pop_id: PopId,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub range_km: Option<f64>,
    pub converged: bool,
    pub frac_all: f64,
    pub frac_located: f64,
}

impl From<&PopLocation> for LocationRow {
    fn from(l: &PopLocation) -> Self {
        LocationRow {
            pop_id: l.pop_id,
            lat: l.coord.map(|c| c.lat()),
            lon: l.coord.map(|c| c.lon()),
            range_km: l.range_km,
            converged: l.majority_found,
            frac_all: l.frac_all,
            frac_located: l.frac_located,
        }
    }
}

pub fn write_locations_json<W: Write>(locations: &[PopLocation], writer: W) -> Result<()> {
    let rows: Vec<LocationRow> = locations.iter().map(LocationRow::from).collect();
    serde_json::to_writer_pretty(writer, &rows)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodb::GeoRecord;
    use crate::ingest::Asn;
    use proptest::prelude::*;

    fn c(lat: f64, lon: f64) -> GeoCoord {
        GeoCoord::new(lat, lon).unwrap()
    }

    fn ip(i: u32) -> Ipv4Addr {
        Ipv4Addr::from(0x0a00_0000 + i)
    }

    fn el(i: u32, coord: Option<GeoCoord>) -> IpElement<'static> {
        IpElement {
            ip: ip(i),
            db_name: "d",
            coord,
        }
    }

    fn km_cfg() -> VoteConfig {
        VoteConfig {
            step_km: 1.0,
            max_radius_km: 500.0,
            majority_fraction: 0.5,
        }
    }

    fn pop(n: u32) -> Pop {
        Pop::new(Asn(1), (0..n).map(ip).collect())
    }

    fn point_db(name: &str, coords: &[Option<GeoCoord>]) -> GeoDatabase {
        GeoDatabase::from_points(
            name,
            coords.iter().enumerate().map(|(i, &coord)| {
                (
                    ip(i as u32),
                    GeoRecord {
                        coord,
                        ..GeoRecord::NULL
                    },
                )
            }),
        )
    }

    #[test]
    fn grid_shape() {
        let d = VoteConfig::default();
        assert_eq!(d.radius_count(), 500);
        assert_eq!(d.radius(1), 1.11);
        assert_eq!(d.radius(500), 555.0);
        assert_eq!(VoteConfig::one_degree().radius_count(), 100);
        let odd = VoteConfig {
            step_km: 1.11,
            max_radius_km: 500.0,
            majority_fraction: 0.5,
        };
        assert_eq!(odd.radius_count(), 451);
        assert_eq!(odd.radius(451), 500.0);
        assert!(odd.radius(450) < 500.0);
        assert!(VoteConfig {
            step_km: 0.0,
            ..d.clone()
        }
        .validate()
        .is_err());
        assert!(VoteConfig {
            majority_fraction: 1.5,
            ..d
        }
        .validate()
        .is_err());
    }

    #[test]
    fn required_votes_edges() {
        assert_eq!(required_votes(5, 0.5), 3);
        assert_eq!(required_votes(4, 0.5), 2);
        assert_eq!(required_votes(1, 0.5), 1);
        assert_eq!(required_votes(10, 1.0), 10);
        assert_eq!(required_votes(3, 0.1), 1);
    }

    #[test]
    fn collect_examples() {
        let p = pop(2);
        let dbs = vec![
            point_db("a", &[Some(c(1.0, 1.0)), Some(c(1.0, 1.0))]),
            point_db("b", &[Some(c(1.0, 1.0))]),
            point_db("c", &[None, None]),
        ];
        let e = collect_elements(&p, &dbs, false);
        assert_eq!(e.len(), 6);
        assert_eq!(e.iter().filter(|x| x.coord.is_none()).count(), 3);
        assert_eq!(e[4].db_name, "b");
        assert_eq!(e[4].ip, ip(1));
        assert!(e[4].coord.is_none());

        let mut p = pop(2);
        p.singleton_members.insert(ip(9));
        assert_eq!(collect_elements(&p, &dbs, true).len(), 9);
        assert_eq!(collect_elements(&p, &dbs, false).len(), 6);
    }

    #[test]
    fn vote_range_examples() {
        let center = c(10.0, 10.0);
        let all_center: Vec<_> = (0..4).map(|i| el(i, Some(center))).collect();
        assert_eq!(
            majority_vote_range(&all_center, center, &km_cfg()).unwrap(),
            (1.0, true)
        );

        // 3 of 5 within 2 km, the rest ~1000 km away
        let near = |km: f64| center.destination(90.0, km);
        let mixed = vec![
            el(0, Some(near(0.5))),
            el(1, Some(near(1.5))),
            el(2, Some(near(1.9))),
            el(3, Some(near(1000.0))),
            el(4, Some(near(1001.0))),
        ];
        assert_eq!(
            majority_vote_range(&mixed, center, &km_cfg()).unwrap(),
            (2.0, true)
        );

        let sparse = vec![
            el(0, Some(center)),
            el(1, Some(center)),
            el(2, Some(near(900.0))),
            el(3, Some(near(900.0))),
            el(4, Some(near(900.0))),
        ];
        assert_eq!(
            majority_vote_range(&sparse, center, &km_cfg()).unwrap(),
            (500.0, false)
        );

        assert!(majority_vote_range(&[el(0, None)], center, &km_cfg()).is_err());
    }

    #[test]
    fn refine_examples() {
        let p = c(5.0, 5.0);
        let same = vec![el(0, Some(p)), el(1, Some(p)), el(2, None)];
        assert_eq!(refine_location(&same, p, 1.0), Some(p));

        let with_outlier = vec![el(0, Some(p)), el(1, Some(p)), el(2, Some(c(50.0, 50.0)))];
        assert_eq!(refine_location(&with_outlier, p, 10.0), Some(p));

        let spread = vec![
            el(0, Some(c(0.0, 0.0))),
            el(1, Some(c(0.0, 2.0))),
            el(2, Some(c(0.0, 4.0))),
        ];
        assert_eq!(
            refine_location(&spread, c(0.0, 2.0), 500.0),
            Some(c(0.0, 2.0))
        );

        assert_eq!(refine_location(&spread, c(40.0, 40.0), 1.0), None);
    }

    #[test]
    fn locate_identical_answers() {
        let p = c(48.85, 2.35);
        let dbs = vec![point_db("a", &[Some(p); 3]), point_db("b", &[Some(p); 3])];
        let loc = locate_pop(&pop(3), &dbs, &VoteConfig::default(), false);
        assert_eq!(loc.coord, Some(p));
        assert_eq!(loc.range_km, Some(1.11));
        assert_eq!((loc.frac_all, loc.frac_located), (1.0, 1.0));
        assert!(loc.majority_found);
    }

    #[test]
    fn locate_london_new_york() {
        let london = c(51.5074, -0.1278);
        let ny = c(40.7128, -74.006);
        let tokyo = c(35.6762, 139.6503);

        // 3:2 split: the median already sits on the London cluster
        let dbs: Vec<_> = [london, london, london, ny, ny]
            .iter()
            .enumerate()
            .map(|(i, &x)| point_db(&format!("db{i}"), &[Some(x)]))
            .collect();
        let loc = locate_pop(&pop(1), &dbs, &VoteConfig::default(), false);
        assert_eq!(loc.coord, Some(london));
        assert_eq!(loc.frac_located, 0.6);

        // 3:2:2 split: no majority anywhere, the largest group wins
        let split = [london, london, london, ny, ny, tokyo, tokyo];
        let dbs: Vec<_> = split
            .iter()
            .enumerate()
            .map(|(i, &x)| point_db(&format!("db{i}"), &[Some(x)]))
            .collect();
        let loc = locate_pop(&pop(1), &dbs, &VoteConfig::default(), false);
        assert!(!loc.majority_found);
        assert_eq!(loc.range_km, None);
        assert_eq!(loc.coord, Some(london));
        assert!((loc.frac_located - 3.0 / 7.0).abs() < 1e-12);

        // exhaustive check over every candidate center
        let elements: Vec<_> = split
            .iter()
            .enumerate()
            .map(|(i, &x)| el(i as u32, Some(x)))
            .collect();
        let best = split
            .iter()
            .map(|&cand| {
                split
                    .iter()
                    .filter(|&&x| haversine_km(cand, x) <= 555.0)
                    .count()
            })
            .max()
            .unwrap();
        assert_eq!(largest_group(&elements, 555.0).len(), best);
    }

    #[test]
    fn locate_half_null() {
        let p = c(1.0, 2.0);
        let dbs = vec![
            point_db("nulls", &[None, None]),
            point_db("full", &[Some(p), Some(p)]),
        ];
        let loc = locate_pop(&pop(2), &dbs, &VoteConfig::default(), false);
        assert_eq!(loc.coord, Some(p));
        assert_eq!(loc.frac_located, 1.0);
        assert_eq!(loc.frac_all, 0.5);
    }

    #[test]
    fn single_db_examples() {
        let p = c(-33.86, 151.2);
        let db = point_db("a", &[Some(p); 4]);
        let loc = locate_pop_single_db(&pop(4), &db, &VoteConfig::default(), false);
        assert_eq!(loc.range_km, Some(1.11));

        let db = point_db("a", &[None; 4]);
        let loc = locate_pop_single_db(&pop(4), &db, &VoteConfig::default(), false);
        assert_eq!(loc.coord, None);
        assert!(!loc.majority_found);

        // 2/2 split 1200 km apart: the median sits 600 km from both halves
        let (a, b) = (c(0.0, 0.0), c(0.0, 0.0).destination(90.0, 1200.0));
        let db = point_db("a", &[Some(a), Some(a), Some(b), Some(b)]);
        let loc = locate_pop_single_db(&pop(4), &db, &km_cfg(), false);
        assert_eq!(loc.range_km, None);
        assert_eq!(loc.coord, Some(a));
        assert_eq!(loc.frac_located, 0.5);
    }

    #[test]
    fn location_row_json() {
        let loc = PopLocation {
            pop_id: PopId(ip(1)),
            coord: None,
            range_km: None,
            frac_all: 0.0,
            frac_located: 0.0,
            majority_found: false,
        };
        let mut buf = Vec::new();
        write_locations_json(&[loc], &mut buf).unwrap();
        let rows: Vec<LocationRow> = serde_json::from_slice(&buf).unwrap();
        assert_eq!(rows[0].lat, None);
        assert_eq!(rows[0].pop_id.to_string(), "10.0.0.1");
        assert!(String::from_utf8(buf)
            .unwrap()
            .contains("\"converged\": false"));
    }

    /// Scans the whole radius grid from the smallest radius upward.
    fn brute_force_range(
        elements: &[IpElement<'_>],
        center: GeoCoord,
        cfg: &VoteConfig,
    ) -> (f64, bool) {
        let coords: Vec<GeoCoord> = elements.iter().filter_map(|e| e.coord).collect();
        let need = cfg.majority_fraction * coords.len() as f64;
        let n = ((cfg.max_radius_km / cfg.step_km) - 1e-9).ceil() as usize;
        for k in 1..=n {
            let r = if k == n {
                cfg.max_radius_km
            } else {
                k as f64 * cfg.step_km
            };
            let count = coords
                .iter()
                .filter(|&&c| haversine_km(center, c) <= r)
                .count();
            if count as f64 >= need {
                return (r, true);
            }
        }
        (cfg.max_radius_km, false)
    }

    fn elements_strategy() -> impl Strategy<Value = Vec<(Option<(f64, f64)>,)>> {
        prop::collection::vec(
            (prop::option::weighted(0.8, (-3.0f64..3.0, -3.0f64..3.0)),),
            2..40,
        )
    }

    proptest! {
        #[test]
        fn vote_range_matches_brute_force(raw in elements_strategy(), step in prop::sample::select(vec![1.0, 1.11]), max in prop::sample::select(vec![111.0, 500.0, 555.0])) {
            let base = c(45.0, 7.0);
            let elements: Vec<_> = raw.iter().enumerate().map(|(i, (o,))| {
                el(i as u32, o.map(|(dl, dn)| c(base.lat() + dl, base.lon() + dn)))
            }).collect();
            prop_assume!(elements.iter().any(|e| e.coord.is_some()));
            let cfg = VoteConfig { step_km: step, max_radius_km: max, majority_fraction: 0.5 };
            let center = coordinate_median(&elements.iter().filter_map(|e| e.coord).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(majority_vote_range(&elements, center, &cfg).unwrap(), brute_force_range(&elements, center, &cfg));
        }

        #[test]
        fn location_invariants(raw in elements_strategy(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let base = c(-20.0, 100.0);
            let mut elements: Vec<_> = raw.iter().enumerate().map(|(i, (o,))| {
                el(i as u32, o.map(|(dl, dn)| c(base.lat() + dl, base.lon() + dn)))
            }).collect();
            let cfg = VoteConfig::default();
            let loc = locate_elements(PopId(ip(0)), &elements, &cfg);
            prop_assert!(loc.frac_located >= loc.frac_all);
            prop_assert!((0.0..=1.0).contains(&loc.frac_all) && (0.0..=1.0).contains(&loc.frac_located));
            let n_located = elements.iter().filter(|e| e.coord.is_some()).count();
            prop_assert_eq!(loc.coord.is_none(), n_located == 0);
            if n_located == elements.len() {
                prop_assert_eq!(loc.frac_all, loc.frac_located);
            }
            if loc.majority_found {
                let coords: Vec<_> = elements.iter().filter_map(|e| e.coord).collect();
                let center = coordinate_median(&coords).unwrap();
                let inside = coords.iter().filter(|&&x| haversine_km(center, x) <= loc.range_km.unwrap()).count();
                prop_assert!(inside >= required_votes(n_located, cfg.majority_fraction));
            }

            elements.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(locate_elements(PopId(ip(0)), &elements, &cfg), loc);
        }
    }
}
