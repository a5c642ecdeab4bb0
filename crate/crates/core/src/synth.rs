//! Planted-partition fixtures: an interface graph whose PoPs are known,
//! together with true PoP locations and synthetic databases describing them.
//!
//! AS `k` (0-based) is numbered `64512 + k` and owns `10.k.0.0/16`; the
//! `j`-th PoP of that AS lives in `10.k.j.0/24`. Inside a PoP roughly a third
//! of the interfaces are parents chained to each other, and every child hangs
//! off two parents. Neighboring PoPs are joined by slow edges.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{InterfaceSet, Pop, PopId, PopMap};
use crate::geo::GeoCoord;
use crate::geodb::{synth_db, GeoDatabase, SynthDbParams};
use crate::ingest::{Asn, DelayObservation};

pub const FIRST_ASN: u32 = 64512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub pop_count: usize,
    pub ips_per_pop: usize,
    pub as_count: usize,
    /// Range of per-observation delays on intra-PoP edges (ms).
    pub intra_delay_ms: [f64; 2],
    /// Range of per-observation delays on inter-PoP edges (ms).
    pub inter_delay_ms: [f64; 2],
    pub measurements_per_edge: u32,
    /// Pendant interfaces per PoP, reachable by one poorly measured edge.
    pub singletons_per_pop: usize,
    pub singleton_measurements: u32,
    pub seed: u64,
    pub databases: Vec<SynthDbParams>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            pop_count: 50,
            ips_per_pop: 10,
            as_count: 5,
            intra_delay_ms: [0.1, 2.0],
            inter_delay_ms: [10.0, 40.0],
            measurements_per_edge: 5,
            singletons_per_pop: 0,
            singleton_measurements: 2,
            seed: 1,
            databases: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.pop_count == 0 || self.as_count == 0 {
            return bad("pop_count and as_count must be positive".into());
        }
        if self.as_count > 200 || self.pop_count.div_ceil(self.as_count) > 255 {
            return bad("at most 200 ASes with 255 PoPs each".into());
        }
        if self.ips_per_pop < 2 || self.ips_per_pop + self.singletons_per_pop > 250 {
            return bad("ips_per_pop must be at least 2, and members per PoP at most 250".into());
        }
        for (name, [lo, hi]) in [
            ("intra_delay_ms", self.intra_delay_ms),
            ("inter_delay_ms", self.inter_delay_ms),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return bad(format!("{name} must be an ordered, non-negative range"));
            }
        }
        if self.intra_delay_ms[1] >= self.inter_delay_ms[0] {
            return bad(format!(
                "intra-PoP delays (up to {} ms) must stay below inter-PoP delays (from {} ms)",
                self.intra_delay_ms[1], self.inter_delay_ms[0]
            ));
        }
        if self.measurements_per_edge == 0 || self.singleton_measurements == 0 {
            return bad("measurement counts must be positive".into());
        }
        let mut names: Vec<&str> = self.databases.iter().map(|d| d.name.as_str()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("database names must be unique".into());
        }
        for db in &self.databases {
            db.validate()?;
        }
        Ok(())
    }

    pub fn asn(k: usize) -> Asn {
        Asn(FIRST_ASN + k as u32)
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub observations: Vec<DelayObservation>,
    pub prefixes: Vec<(Ipv4Net, Asn)>,
    /// Planted PoPs; pendant interfaces appear as singleton members.
    pub planted: PopMap,
    pub truth: BTreeMap<PopId, GeoCoord>,
    pub databases: Vec<GeoDatabase>,
}

impl Fixture {
    pub fn planted_core(&self) -> PopMap {
        PopMap {
            pops: self
                .planted
                .pops
                .iter()
                .map(|p| Pop {
                    singleton_members: InterfaceSet::new(),
                    ..p.clone()
                })
                .collect(),
            with_singletons: false,
        }
    }

    pub fn write_observations<W: Write>(&self, mut w: W) -> Result<()> {
        for o in &self.observations {
            writeln!(w, "{},{},{}", o.src, o.dst, o.delay_ms)?;
        }
        Ok(())
    }

    pub fn write_ip2as<W: Write>(&self, mut w: W) -> Result<()> {
        for (p, a) in &self.prefixes {
            writeln!(w, "{p},{a}")?;
        }
        Ok(())
    }

    /// `ip,asn,pop_id,role,lat,lon` rows with a header.
    pub fn write_truth<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "ip,asn,pop_id,role,lat,lon")?;
        for pop in &self.planted.pops {
            let c = self.truth[&pop.id];
            for ip in &pop.core_members {
                writeln!(
                    w,
                    "{ip},{},{},core,{},{}",
                    pop.asn,
                    pop.id,
                    c.lat(),
                    c.lon()
                )?;
            }
            for ip in &pop.singleton_members {
                writeln!(
                    w,
                    "{ip},{},{},singleton,{},{}",
                    pop.asn,
                    pop.id,
                    c.lat(),
                    c.lon()
                )?;
            }
        }
        Ok(())
    }
}

fn addr(as_idx: usize, local_pop: usize, host: usize) -> Ipv4Addr {
    Ipv4Addr::new(10, as_idx as u8, local_pop as u8, host as u8 + 1)
}

/// Builds the full fixture; identical scenarios give identical fixtures.
pub fn generate(scenario: &Scenario) -> Result<Fixture> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let [intra_lo, intra_hi] = scenario.intra_delay_ms;
    let [inter_lo, inter_hi] = scenario.inter_delay_ms;
    let mut observations = Vec::new();
    let mut emit =
        |rng: &mut ChaCha8Rng, src: Ipv4Addr, dst: Ipv4Addr, lo: f64, hi: f64, n: u32| {
            for _ in 0..n {
                let delay_ms = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                observations.push(DelayObservation { src, dst, delay_ms });
            }
        };

    let mut pops = Vec::with_capacity(scenario.pop_count);
    let mut truth = BTreeMap::new();
    let mut layout = Vec::with_capacity(scenario.pop_count);
    for p in 0..scenario.pop_count {
        let (as_idx, local) = (p % scenario.as_count, p / scenario.as_count);
        let core: Vec<Ipv4Addr> = (0..scenario.ips_per_pop)
            .map(|h| addr(as_idx, local, h))
            .collect();
        let n_parents = (scenario.ips_per_pop / 3).max(2);
        let (parents, children) = core.split_at(n_parents);

        for w in parents.windows(2) {
            emit(
                &mut rng,
                w[0],
                w[1],
                intra_lo,
                intra_hi,
                scenario.measurements_per_edge,
            );
        }
        for &child in children {
            for i in sample(&mut rng, parents.len(), 2) {
                emit(
                    &mut rng,
                    parents[i],
                    child,
                    intra_lo,
                    intra_hi,
                    scenario.measurements_per_edge,
                );
            }
        }

        let mut pop = Pop::new(Scenario::asn(as_idx), core.iter().copied().collect());
        for s in 0..scenario.singletons_per_pop {
            let pendant = addr(as_idx, local, scenario.ips_per_pop + s);
            let anchor = core[rng.gen_range(0..core.len())];
            emit(
                &mut rng,
                anchor,
                pendant,
                intra_lo,
                intra_hi,
                scenario.singleton_measurements,
            );
            pop.singleton_members.insert(pendant);
        }

        let lat = rng.gen_range(-55.0..70.0);
        let lon = rng.gen_range(-180.0..180.0);
        truth.insert(pop.id, GeoCoord::new(lat, lon)?);
        layout.push(core);
        pops.push(pop);
    }

    // slow links: consecutive PoPs of one AS, and each PoP to the next PoP overall
    for p in 0..scenario.pop_count {
        let mut peers = Vec::new();
        if p + scenario.as_count < scenario.pop_count {
            peers.push(p + scenario.as_count);
        }
        let next = (p + 1) % scenario.pop_count;
        if next != p && !peers.contains(&next) {
            peers.push(next);
        }
        for q in peers {
            let a = layout[p][rng.gen_range(0..layout[p].len())];
            let b = layout[q][rng.gen_range(0..layout[q].len())];
            emit(
                &mut rng,
                a,
                b,
                inter_lo,
                inter_hi,
                scenario.measurements_per_edge,
            );
        }
    }

    let prefixes = (0..scenario.as_count)
        .map(|k| {
            let net = Ipv4Net::new(Ipv4Addr::new(10, k as u8, 0, 0), 16).expect("valid prefix");
            (net, Scenario::asn(k))
        })
        .collect();

    pops.sort_by_key(|p| p.id);
    let planted = PopMap {
        pops,
        with_singletons: scenario.singletons_per_pop > 0,
    };
    let databases = scenario
        .databases
        .iter()
        .enumerate()
        .map(|(i, params)| {
            let seed = scenario
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(i as u64 + 1);
            synth_db(&truth, &planted, params, seed)
        })
        .collect::<Result<_>>()?;

    Ok(Fixture {
        observations,
        prefixes,
        planted,
        truth,
        databases,
    })
}
