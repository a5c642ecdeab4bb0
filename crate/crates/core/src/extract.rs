//! PoP extraction from the delay-annotated interface graph.
//!
//! Pipeline: filter short, well-measured intra-AS edges; split the result
//! into connected components; classify each component's interfaces into
//! parents and children by measurement direction; group them into
//! collocations; unify loosely connected candidates; optionally attach
//! low-degree singletons.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::net::Ipv4Addr;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::median;
use crate::ingest::{annotate_as, Asn, DelayEdge, PrefixMap};
use crate::par;

pub type InterfaceSet = BTreeSet<Ipv4Addr>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Maximum median delay of an intra-PoP edge (ms).
    pub pop_max_delay_ms: f64,
    /// Minimum number of observations for an edge to be trusted.
    pub pop_min_measurements: u32,
    /// Parent/child group merge threshold; follows `pop_max_delay_ms` when unset.
    pub group_merge_delay_ms: Option<f64>,
    pub singleton_max_links: usize,
    /// Follows `pop_max_delay_ms` when unset.
    pub singleton_max_median_ms: Option<f64>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            pop_max_delay_ms: 5.0,
            pop_min_measurements: 5,
            group_merge_delay_ms: None,
            singleton_max_links: 2,
            singleton_max_median_ms: None,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("pop_max_delay_ms", self.pop_max_delay_ms)?;
        positive("group_merge_delay_ms", self.group_merge_delay_ms())?;
        positive("singleton_max_median_ms", self.singleton_max_median_ms())?;
        if self.pop_min_measurements < 1 {
            return Err(Error::Config(
                "pop_min_measurements must be at least 1".into(),
            ));
        }
        if self.singleton_max_links < 1 {
            return Err(Error::Config(
                "singleton_max_links must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn group_merge_delay_ms(&self) -> f64 {
        self.group_merge_delay_ms.unwrap_or(self.pop_max_delay_ms)
    }

    pub fn singleton_max_median_ms(&self) -> f64 {
        self.singleton_max_median_ms
            .unwrap_or(self.pop_max_delay_ms)
    }
}

/// PoP identifier: the numerically lowest core member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PopId(pub Ipv4Addr);

impl fmt::Display for PopId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pop {
    pub id: PopId,
    pub asn: Asn,
    pub core_members: InterfaceSet,
    #[serde(default)]
    pub singleton_members: InterfaceSet,
}

impl Pop {
    pub fn new(asn: Asn, core_members: InterfaceSet) -> Self {
        let id = PopId(*core_members.first().expect("PoP without members"));
        Pop {
            id,
            asn,
            core_members,
            singleton_members: InterfaceSet::new(),
        }
    }

    /// Core members, followed by singleton members when requested.
    pub fn members(&self, include_singletons: bool) -> impl Iterator<Item = Ipv4Addr> + '_ {
        let extra = include_singletons.then_some(&self.singleton_members);
        self.core_members
            .iter()
            .chain(extra.into_iter().flatten())
            .copied()
    }

    pub fn member_count(&self, include_singletons: bool) -> usize {
        self.core_members.len()
            + if include_singletons {
                self.singleton_members.len()
            } else {
                0
            }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PopMap {
    pub pops: Vec<Pop>,
    pub with_singletons: bool,
}

impl PopMap {
    pub fn pop_count(&self) -> usize {
        self.pops.len()
    }

    pub fn ip_count(&self) -> usize {
        self.pops
            .iter()
            .map(|p| p.member_count(self.with_singletons))
            .sum()
    }

    pub fn get(&self, id: PopId) -> Option<&Pop> {
        self.pops
            .binary_search_by_key(&id, |p| p.id)
            .ok()
            .map(|i| &self.pops[i])
    }

    /// Serializes as a JSON array of PoPs ordered by id.
    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.pops)?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R, with_singletons: bool) -> Result<Self> {
        let mut pops: Vec<Pop> = serde_json::from_reader(reader)?;
        pops.sort_by_key(|p| p.id);
        let map = PopMap {
            pops,
            with_singletons,
        };
        map.check()?;
        Ok(map)
    }

    /// Verifies non-empty cores, disjoint member sets and id conventions.
    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for pop in &self.pops {
            if pop.core_members.first().map(|&ip| PopId(ip)) != Some(pop.id) {
                return Err(Error::Invariant(format!(
                    "PoP {} id is not its lowest core member",
                    pop.id
                )));
            }
            for ip in pop.core_members.iter().chain(&pop.singleton_members) {
                if !seen.insert(*ip) {
                    return Err(Error::Invariant(format!(
                        "interface {ip} belongs to more than one PoP"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Keeps only PoPs accepted by `keep`.
    pub fn subset<F: Fn(&Pop) -> bool>(&self, keep: F) -> PopMap {
        PopMap {
            pops: self.pops.iter().filter(|p| keep(p)).cloned().collect(),
            with_singletons: self.with_singletons,
        }
    }
}

/// Keeps edges short enough, measured often enough, and inside one known AS.
pub fn filter_graph(edges: &[DelayEdge], cfg: &ExtractionConfig) -> Vec<DelayEdge> {
    edges
        .iter()
        .filter(|e| {
            e.median_delay_ms <= cfg.pop_max_delay_ms
                && e.count >= cfg.pop_min_measurements
                && e.intra_as().is_some()
        })
        .cloned()
        .collect()
}

/// Undirected connected components, ordered by lowest member.
pub fn connected_components(graph: &[DelayEdge]) -> Vec<InterfaceSet> {
    let nodes: Vec<Ipv4Addr> = graph
        .iter()
        .flat_map(|e| [e.src, e.dst])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index = |ip: Ipv4Addr| nodes.binary_search(&ip).expect("node indexed");

    let mut uf = UnionFind::<usize>::new(nodes.len());
    for e in graph {
        uf.union(index(e.src), index(e.dst));
    }
    let mut comps: BTreeMap<usize, InterfaceSet> = BTreeMap::new();
    for (i, ip) in nodes.iter().enumerate() {
        comps.entry(uf.find(i)).or_default().insert(*ip);
    }
    let mut out: Vec<InterfaceSet> = comps.into_values().collect();
    out.sort_by_key(|c| *c.first().expect("non-empty component"));
    out
}

/// Splits a component into parents (out-degree at least in-degree) and
/// children (in-degree greater), counting only edges inside the component.
pub fn classify_bipartite(
    component: &InterfaceSet,
    graph: &[DelayEdge],
) -> (InterfaceSet, InterfaceSet) {
    let mut degree: BTreeMap<Ipv4Addr, (usize, usize)> =
        component.iter().map(|&ip| (ip, (0, 0))).collect();
    for e in graph {
        if component.contains(&e.src) && component.contains(&e.dst) {
            degree.get_mut(&e.src).expect("member").0 += 1;
            degree.get_mut(&e.dst).expect("member").1 += 1;
        }
    }
    let (parents, children): (Vec<_>, Vec<_>) = degree
        .into_iter()
        .partition(|(_, (out_deg, in_deg))| out_deg >= in_deg);
    (
        parents.into_iter().map(|(ip, _)| ip).collect(),
        children.into_iter().map(|(ip, _)| ip).collect(),
    )
}

/// Measurement-count-weighted mean delay over edges crossing between the two
/// groups in either direction, or `None` when no edge crosses.
pub fn weighted_group_distance(
    a: &InterfaceSet,
    b: &InterfaceSet,
    graph: &[DelayEdge],
) -> Option<f64> {
    let mut acc = CrossingStats::default();
    for e in graph {
        let crosses = (a.contains(&e.src) && b.contains(&e.dst))
            || (b.contains(&e.src) && a.contains(&e.dst));
        if crosses {
            acc.add(e);
        }
    }
    acc.mean()
}

/// Additive summary of crossing edges: merging groups adds their stats.
#[derive(Debug, Clone, Copy, Default)]
struct CrossingStats {
    weight: u64,
    weighted_delay: f64,
}

impl CrossingStats {
    fn add(&mut self, e: &DelayEdge) {
        self.weight += u64::from(e.count);
        self.weighted_delay += f64::from(e.count) * e.median_delay_ms;
    }

    fn merge(&mut self, other: CrossingStats) {
        self.weight += other.weight;
        self.weighted_delay += other.weighted_delay;
    }

    fn mean(&self) -> Option<f64> {
        (self.weight > 0).then(|| self.weighted_delay / self.weight as f64)
    }
}

/// Groups parents that share a child (transitively) and children that share
/// a parent, then merges every connected parent/child group pair whose
/// weighted distance is within the merge threshold.
pub fn partition_collocations(
    parents: &InterfaceSet,
    children: &InterfaceSet,
    graph: &[DelayEdge],
    cfg: &ExtractionConfig,
) -> Vec<InterfaceSet> {
    let parent_list: Vec<Ipv4Addr> = parents.iter().copied().collect();
    let child_list: Vec<Ipv4Addr> = children.iter().copied().collect();
    let p_idx = |ip: &Ipv4Addr| parent_list.binary_search(ip).ok();
    let c_idx = |ip: &Ipv4Addr| child_list.binary_search(ip).ok();

    // parent/child links regardless of direction
    let links: Vec<(usize, usize, &DelayEdge)> = graph
        .iter()
        .filter_map(
            |e| match (p_idx(&e.src), c_idx(&e.dst), c_idx(&e.src), p_idx(&e.dst)) {
                (Some(p), Some(c), _, _) | (_, _, Some(c), Some(p)) => Some((p, c, e)),
                _ => None,
            },
        )
        .collect();

    let mut parent_uf = UnionFind::<usize>::new(parent_list.len());
    let mut child_uf = UnionFind::<usize>::new(child_list.len());
    let mut parents_of_child: BTreeMap<usize, usize> = BTreeMap::new();
    let mut children_of_parent: BTreeMap<usize, usize> = BTreeMap::new();
    for &(p, c, _) in &links {
        match parents_of_child.get(&c) {
            Some(&first) => {
                parent_uf.union(first, p);
            }
            None => {
                parents_of_child.insert(c, p);
            }
        }
        match children_of_parent.get(&p) {
            Some(&first) => {
                child_uf.union(first, c);
            }
            None => {
                children_of_parent.insert(p, c);
            }
        }
    }

    // groups: parent groups first, then child groups
    let n_parents = parent_list.len();
    let mut groups = UnionFind::<usize>::new(n_parents + child_list.len());
    let mut crossing: BTreeMap<(usize, usize), CrossingStats> = BTreeMap::new();
    for &(p, c, e) in &links {
        let key = (parent_uf.find(p), n_parents + child_uf.find(c));
        crossing.entry(key).or_default().add(e);
    }
    for p in 0..n_parents {
        groups.union(p, parent_uf.find(p));
    }
    for c in 0..child_list.len() {
        groups.union(n_parents + c, n_parents + child_uf.find(c));
    }
    let threshold = cfg.group_merge_delay_ms();
    for ((pg, cg), stats) in &crossing {
        if stats.mean().is_some_and(|d| d <= threshold) {
            groups.union(*pg, *cg);
        }
    }

    let mut out: BTreeMap<usize, InterfaceSet> = BTreeMap::new();
    for (i, ip) in parent_list.iter().chain(&child_list).enumerate() {
        out.entry(groups.find(i)).or_default().insert(*ip);
    }
    let mut out: Vec<InterfaceSet> = out.into_values().collect();
    out.sort_by_key(|s| *s.first().expect("non-empty group"));
    out
}

/// Repeatedly merges the closest pair of candidates whose weighted distance
/// is within `pop_max_delay_ms`, until no such pair remains.
pub fn unify_pops(
    candidates: Vec<InterfaceSet>,
    graph: &[DelayEdge],
    cfg: &ExtractionConfig,
) -> Vec<InterfaceSet> {
    let mut owner: HashMap<Ipv4Addr, usize> = HashMap::new();
    for (i, c) in candidates.iter().enumerate() {
        for ip in c {
            owner.insert(*ip, i);
        }
    }
    let mut stats: BTreeMap<(usize, usize), CrossingStats> = BTreeMap::new();
    for e in graph {
        if let (Some(&a), Some(&b)) = (owner.get(&e.src), owner.get(&e.dst)) {
            if a != b {
                stats.entry((a.min(b), a.max(b))).or_default().add(e);
            }
        }
    }

    let mut sets: Vec<Option<InterfaceSet>> = candidates.into_iter().map(Some).collect();
    let threshold = cfg.pop_max_delay_ms;
    loop {
        let best = stats
            .iter()
            .filter_map(|(&k, s)| s.mean().map(|d| (d, k)))
            .filter(|(d, _)| *d <= threshold)
            .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let Some((_, (keep, absorb))) = best else {
            break;
        };

        let absorbed = sets[absorb].take().expect("live candidate");
        sets[keep]
            .as_mut()
            .expect("live candidate")
            .extend(absorbed);

        let moved: Vec<((usize, usize), CrossingStats)> = stats
            .iter()
            .filter(|(&(a, b), _)| a == absorb || b == absorb)
            .map(|(&k, &s)| (k, s))
            .collect();
        for (k, s) in moved {
            stats.remove(&k);
            let other = if k.0 == absorb { k.1 } else { k.0 };
            if other != keep {
                stats
                    .entry((other.min(keep), other.max(keep)))
                    .or_default()
                    .merge(s);
            }
        }
    }

    let mut out: Vec<InterfaceSet> = sets.into_iter().flatten().collect();
    out.sort_by_key(|s| *s.first().expect("non-empty candidate"));
    out
}

/// Assigns low-degree interfaces outside every PoP to the same-AS PoP with
/// the smallest median delay over their edges into its core.
pub fn attach_singletons(pops: PopMap, all_edges: &[DelayEdge], cfg: &ExtractionConfig) -> PopMap {
    let mut owner: HashMap<Ipv4Addr, usize> = HashMap::new();
    for (i, pop) in pops.pops.iter().enumerate() {
        for ip in &pop.core_members {
            owner.insert(*ip, i);
        }
    }

    let mut neighbors: BTreeMap<Ipv4Addr, BTreeSet<Ipv4Addr>> = BTreeMap::new();
    let mut asn_of: HashMap<Ipv4Addr, Option<Asn>> = HashMap::new();
    for e in all_edges {
        if e.src == e.dst {
            continue;
        }
        neighbors.entry(e.src).or_default().insert(e.dst);
        neighbors.entry(e.dst).or_default().insert(e.src);
        asn_of.entry(e.src).or_insert(e.as_src);
        asn_of.entry(e.dst).or_insert(e.as_dst);
    }

    let max_median = cfg.singleton_max_median_ms();
    let mut assigned: BTreeMap<usize, Vec<Ipv4Addr>> = BTreeMap::new();
    for (ip, nbrs) in &neighbors {
        if owner.contains_key(ip) || nbrs.len() > cfg.singleton_max_links {
            continue;
        }
        let Some(asn) = asn_of.get(ip).copied().flatten() else {
            continue;
        };
        let mut delays: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for e in all_edges {
            let other = if e.src == *ip {
                e.dst
            } else if e.dst == *ip {
                e.src
            } else {
                continue;
            };
            if let Some(&p) = owner.get(&other) {
                if pops.pops[p].asn == asn {
                    delays.entry(p).or_default().push(e.median_delay_ms);
                }
            }
        }
        let best = delays
            .into_iter()
            .map(|(p, mut d)| (median(&mut d), p))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((m, p)) = best {
            if m <= max_median {
                assigned.entry(p).or_default().push(*ip);
            }
        }
    }

    let mut out = pops;
    for (p, ips) in assigned {
        out.pops[p].singleton_members.extend(ips);
    }
    out.with_singletons = true;
    out
}

/// Full extraction pipeline. Components are processed in parallel; the
/// result is independent of edge order and worker count.
pub fn extract_pops(
    edges: &[DelayEdge],
    prefix_map: &PrefixMap,
    cfg: &ExtractionConfig,
    with_singletons: bool,
) -> Result<PopMap> {
    cfg.validate()?;
    let mut annotated = edges.to_vec();
    annotate_as(&mut annotated, prefix_map);
    annotated.sort_by(|a, b| {
        (a.src, a.dst, a.count)
            .cmp(&(b.src, b.dst, b.count))
            .then(a.median_delay_ms.total_cmp(&b.median_delay_ms))
    });

    let graph = filter_graph(&annotated, cfg);
    let components = connected_components(&graph);

    let mut comp_of: HashMap<Ipv4Addr, usize> = HashMap::new();
    for (i, c) in components.iter().enumerate() {
        for ip in c {
            comp_of.insert(*ip, i);
        }
    }
    let mut comp_edges: Vec<Vec<DelayEdge>> = vec![Vec::new(); components.len()];
    for e in &graph {
        comp_edges[comp_of[&e.src]].push(e.clone());
    }
    let work: Vec<(InterfaceSet, Vec<DelayEdge>)> =
        components.into_iter().zip(comp_edges).collect();

    let per_component = par::map_owned(work, |(component, sub)| {
        let asn = sub[0].intra_as().expect("filtered edges are intra-AS");
        let (parents, children) = classify_bipartite(&component, &sub);
        let candidates = partition_collocations(&parents, &children, &sub, cfg);
        unify_pops(candidates, &sub, cfg)
            .into_iter()
            .filter(|c| c.len() >= 2)
            .map(|c| Pop::new(asn, c))
            .collect::<Vec<_>>()
    });

    let mut pops: Vec<Pop> = per_component.into_iter().flatten().collect();
    pops.sort_by_key(|p| p.id);
    let map = PopMap {
        pops,
        with_singletons: false,
    };
    let map = if with_singletons {
        attach_singletons(map, &annotated, cfg)
    } else {
        map
    };
    map.check()?;
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold_ms: f64,
    pub pop_count: usize,
    pub ip_count: usize,
}

/// Re-runs core extraction for each `pop_max_delay_ms` in `grid`, holding
/// every other setting fixed.
pub fn threshold_sweep(
    edges: &[DelayEdge],
    prefix_map: &PrefixMap,
    cfg: &ExtractionConfig,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    if grid
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::InvalidArgument(
            "threshold grid must be strictly ascending".into(),
        ));
    }
    let rows = par::map(grid, |&threshold_ms| {
        let cfg = ExtractionConfig {
            pop_max_delay_ms: threshold_ms,
            ..cfg.clone()
        };
        extract_pops(edges, prefix_map, &cfg, false).map(|m| SweepRow {
            threshold_ms,
            pop_count: m.pop_count(),
            ip_count: m.ip_count(),
        })
    });
    rows.into_iter().collect()
}
