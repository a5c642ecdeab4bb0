//! Evaluation report bundle: one JSON summary plus one CSV per figure.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{
    agreement_cdf, churn, convergence_cdf_from, correlation_matrix, detect_default_location,
    deviation_samples_from, filter_by_region, null_stats, AgreementCdf, AnomalyParams,
    AnomalyReport, CdfSeries, ChurnReport, CorrelationMatrix, DeviationReport, NullStats,
    RegionSpec,
};
use crate::extract::{PopId, PopMap};
use crate::geodb::GeoDatabase;
use crate::locate::{locate_all, PopLocation, VoteConfig};
use crate::par;

/// Name reserved for the vote over every database.
pub const ALL_DATABASES: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Grid for convergence curves and per-database ranges.
    pub convergence: VoteConfig,
    pub agreement_radii_km: Vec<f64>,
    pub anomaly: AnomalyParams,
    pub churn_epsilon_km: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            convergence: VoteConfig::km_grid_500(),
            agreement_radii_km: vec![100.0, 500.0],
            anomaly: AnomalyParams::default(),
            churn_epsilon_km: 1.0,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        self.convergence.validate()?;
        self.anomaly.validate()?;
        if self
            .agreement_radii_km
            .iter()
            .any(|r| !(r.is_finite() && *r > 0.0))
        {
            return Err(Error::Config("agreement radii must be positive".into()));
        }
        if !(self.churn_epsilon_km.is_finite() && self.churn_epsilon_km >= 0.0) {
            return Err(Error::Config(
                "churn_epsilon_km must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

pub struct EvalInputs<'a> {
    pub core: &'a PopMap,
    pub all: &'a PopMap,
    pub dbs: &'a [GeoDatabase],
    /// Older snapshots, keyed by the name of the database they precede.
    pub previous: &'a [(String, GeoDatabase)],
    pub regions: &'a [RegionSpec],
}

#[derive(Debug, Clone, Serialize)]
pub struct DbFigures {
    pub name: String,
    pub convergence: CdfSeries,
    pub agreement: Vec<AgreementCdf>,
    pub deviation: DeviationReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionFigures {
    pub name: String,
    pub pop_count: usize,
    pub databases: Vec<DbFigures>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChurnRow {
    pub db_name: String,
    #[serde(flatten)]
    pub report: ChurnReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportBundle {
    pub pop_count: usize,
    pub ip_count: usize,
    pub unlocated_pops: usize,
    pub null_stats: Vec<NullStats>,
    pub all_convergence: CdfSeries,
    pub databases: Vec<DbFigures>,
    pub correlation: Option<CorrelationMatrix>,
    pub correlation_with_nulls: Option<CorrelationMatrix>,
    pub anomalies: Vec<AnomalyReport>,
    pub churn: Vec<ChurnRow>,
    pub regions: Vec<RegionFigures>,
}

fn figures_for(
    map: &PopMap,
    db: &GeoDatabase,
    cross: &[PopLocation],
    single: &[PopLocation],
    settings: &EvalSettings,
) -> DbFigures {
    DbFigures {
        name: db.name().to_string(),
        convergence: convergence_cdf_from(db.name(), single),
        agreement: settings
            .agreement_radii_km
            .iter()
            .map(|&r| agreement_cdf(map, db, r))
            .collect(),
        deviation: deviation_samples_from(map, db, cross, single),
    }
}

fn select(
    locations: &[PopLocation],
    order: &HashMap<PopId, usize>,
    subset: &PopMap,
) -> Vec<PopLocation> {
    subset
        .pops
        .iter()
        .map(|p| locations[order[&p.id]])
        .collect()
}

/// Computes every metric. `vote` drives the cross-database locations used
/// for deviations and regions; per-database ranges use the convergence grid.
pub fn evaluate_all(
    inputs: &EvalInputs<'_>,
    vote: &VoteConfig,
    settings: &EvalSettings,
    include_singletons: bool,
) -> Result<ReportBundle> {
    vote.validate()?;
    settings.validate()?;
    if inputs.dbs.is_empty() {
        return Err(Error::Empty("database list"));
    }
    let map = if include_singletons {
        inputs.all
    } else {
        inputs.core
    };
    let grid = &settings.convergence;

    let null_stats = inputs
        .dbs
        .iter()
        .map(|db| null_stats(inputs.core, inputs.all, db))
        .collect::<Result<Vec<_>>>()?;

    let cross = locate_all(map, inputs.dbs, vote, include_singletons);
    let cross_grid = locate_all(map, inputs.dbs, grid, include_singletons);
    let singles: Vec<Vec<PopLocation>> = par::map(inputs.dbs, |db| {
        locate_all(map, std::slice::from_ref(db), grid, include_singletons)
    });

    let idx: Vec<usize> = (0..inputs.dbs.len()).collect();
    let databases = par::map(&idx, |&i| {
        figures_for(map, &inputs.dbs[i], &cross, &singles[i], settings)
    });

    let order: HashMap<PopId, usize> = map
        .pops
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id, i))
        .collect();
    let regions = inputs
        .regions
        .iter()
        .map(|region| {
            let subset = filter_by_region(map, &cross, region);
            let sub_cross = select(&cross, &order, &subset);
            let databases = par::map(&idx, |&i| {
                let sub_single = select(&singles[i], &order, &subset);
                figures_for(&subset, &inputs.dbs[i], &sub_cross, &sub_single, settings)
            });
            RegionFigures {
                name: region.name.clone(),
                pop_count: subset.pop_count(),
                databases,
            }
        })
        .collect();

    let ips: Vec<_> = map
        .pops
        .iter()
        .flat_map(|p| p.members(include_singletons))
        .collect();
    let (correlation, correlation_with_nulls) = if inputs.dbs.len() >= 2 {
        (
            Some(correlation_matrix(inputs.dbs, &ips, false)?),
            Some(correlation_matrix(inputs.dbs, &ips, true)?),
        )
    } else {
        (None, None)
    };

    let mut anomalies = Vec::new();
    for db in inputs.dbs {
        anomalies.extend(detect_default_location(db, map, &settings.anomaly)?);
    }

    let mut churn_rows = Vec::new();
    for (name, old) in inputs.previous {
        let Some(new) = inputs.dbs.iter().find(|d| d.name() == name) else {
            return Err(Error::Config(format!(
                "previous snapshot for unknown database {name}"
            )));
        };
        if !ips.is_empty() {
            churn_rows.push(ChurnRow {
                db_name: name.clone(),
                report: churn(old, new, &ips, settings.churn_epsilon_km)?,
            });
        }
    }

    Ok(ReportBundle {
        pop_count: map.pop_count(),
        ip_count: ips.len(),
        unlocated_pops: cross.iter().filter(|l| l.coord.is_none()).count(),
        null_stats,
        all_convergence: convergence_cdf_from(ALL_DATABASES, &cross_grid),
        databases,
        correlation,
        correlation_with_nulls,
        anomalies,
        churn: churn_rows,
        regions,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(
        path,
    )?)))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_cdf(path: &Path, x_name: &str, series: &CdfSeries) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([x_name, "cumulative_fraction"])
        .map_err(csv_err)?;
    for p in &series.points {
        w.write_record([p.x.to_string(), p.fraction.to_string()])
            .map_err(csv_err)?;
    }
    if series.unresolved > 0 {
        w.write_record(["inf", "1"]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_db_figures(dir: &Path, f: &DbFigures, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(format!("convergence_{}.csv", f.name));
    write_cdf(&path, "range_km", &f.convergence)?;
    written.push(path);

    for a in &f.agreement {
        let path = dir.join(format!("agreement_{}_{}.csv", f.name, a.radius_km));
        write_cdf(&path, "agreement", &a.series)?;
        written.push(path);
    }

    let path = dir.join(format!("deviation_{}.csv", f.name));
    write_cdf(&path, "deviation_km", &f.deviation.cdf())?;
    written.push(path);

    let path = dir.join(format!("range_vs_deviation_{}.csv", f.name));
    let mut w = csv_writer(&path)?;
    w.write_record(["pop_id", "ip", "range_km", "deviation_km"])
        .map_err(csv_err)?;
    for s in &f.deviation.samples {
        w.write_record([
            s.pop_id.to_string(),
            s.ip.to_string(),
            fmt_opt(s.range_km),
            s.deviation_km.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    written.push(path);
    Ok(())
}

/// Replaces characters that are unsafe in file names.
pub fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Serialize)]
struct DbSummary<'a> {
    name: &'a str,
    converged_at_first_step: f64,
    converged_within_100km: f64,
    converged_within_500km: f64,
    not_converged: f64,
    agreement: Vec<AgreementSummary>,
    deviation_samples: usize,
    deviation_within_40km: f64,
    deviation_within_500km: f64,
    deviation_beyond_5000km: f64,
    deviation_skipped_pops: usize,
}

#[derive(Serialize)]
struct AgreementSummary {
    radius_km: f64,
    full_agreement: f64,
    majority: f64,
    null_pops: usize,
}

#[derive(Serialize)]
struct RegionSummary<'a> {
    name: &'a str,
    pop_count: usize,
    databases: Vec<DbSummary<'a>>,
}

#[derive(Serialize)]
struct Summary<'a> {
    pop_count: usize,
    ip_count: usize,
    unlocated_pops: usize,
    null_stats: &'a [NullStats],
    all_convergence_at_first_step: f64,
    databases: Vec<DbSummary<'a>>,
    correlation: &'a Option<CorrelationMatrix>,
    correlation_with_nulls: &'a Option<CorrelationMatrix>,
    anomalies: &'a [AnomalyReport],
    churn: &'a [ChurnRow],
    regions: Vec<RegionSummary<'a>>,
}

fn summarize<'a>(f: &'a DbFigures, first_step: f64) -> DbSummary<'a> {
    let dev = f.deviation.cdf();
    let beyond = if dev.total == 0 {
        0.0
    } else {
        1.0 - dev.at(5000.0 - 1e-9)
    };
    DbSummary {
        name: &f.name,
        converged_at_first_step: f.convergence.at(first_step),
        converged_within_100km: f.convergence.at(100.0),
        converged_within_500km: f.convergence.at(500.0),
        not_converged: f.convergence.terminal_fraction(),
        agreement: f
            .agreement
            .iter()
            .map(|a| AgreementSummary {
                radius_km: a.radius_km,
                full_agreement: 1.0 - a.series.at(1.0 - 1e-12),
                majority: 1.0 - a.series.at(0.5 - 1e-12),
                null_pops: a.null_pops,
            })
            .collect(),
        deviation_samples: f.deviation.samples.len(),
        deviation_within_40km: dev.at(40.0),
        deviation_within_500km: dev.at(500.0),
        deviation_beyond_5000km: beyond,
        deviation_skipped_pops: f.deviation.skipped_pops,
    }
}

/// Writes the bundle into `dir` and returns the files written.
pub fn write_bundle(
    bundle: &ReportBundle,
    settings: &EvalSettings,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let first_step = settings.convergence.radius(1);

    for f in &bundle.databases {
        write_db_figures(dir, f, &mut written)?;
    }
    let path = dir.join(format!("convergence_{ALL_DATABASES}.csv"));
    write_cdf(&path, "range_km", &bundle.all_convergence)?;
    written.push(path);

    let path = dir.join("null_stats.csv");
    let mut w = csv_writer(&path)?;
    w.write_record([
        "db",
        "null_ip_core_pct",
        "null_pop_core_pct",
        "null_ip_all_pct",
        "null_pop_all_pct",
    ])
    .map_err(csv_err)?;
    for s in &bundle.null_stats {
        w.write_record([
            s.db_name.clone(),
            s.pct_null_ip_core.to_string(),
            s.pct_null_pop_core.to_string(),
            s.pct_null_ip_all.to_string(),
            s.pct_null_pop_all.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("correlation.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["db_a", "db_b", "pearson", "pearson_with_nulls"])
        .map_err(csv_err)?;
    if let (Some(m), Some(mn)) = (&bundle.correlation, &bundle.correlation_with_nulls) {
        for (i, a) in m.db_names.iter().enumerate() {
            for (j, b) in m.db_names.iter().enumerate() {
                w.write_record([
                    a.clone(),
                    b.clone(),
                    fmt_opt(m.values[i][j]),
                    fmt_opt(mn.values[i][j]),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("anomalies.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["db", "asn", "lat", "lon", "share", "ip_count"])
        .map_err(csv_err)?;
    for a in &bundle.anomalies {
        w.write_record([
            a.db_name.clone(),
            a.asn.to_string(),
            a.dominant_coord.lat().to_string(),
            a.dominant_coord.lon().to_string(),
            a.share.to_string(),
            a.ip_count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("churn.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["db", "ip_count", "changed", "fraction", "epsilon_km"])
        .map_err(csv_err)?;
    for c in &bundle.churn {
        w.write_record([
            c.db_name.clone(),
            c.report.ip_count.to_string(),
            c.report.changed.to_string(),
            c.report.fraction.to_string(),
            settings.churn_epsilon_km.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    written.push(path);

    for region in &bundle.regions {
        let sub = dir.join(format!("region_{}", file_safe(&region.name)));
        fs::create_dir_all(&sub)?;
        for f in &region.databases {
            write_db_figures(&sub, f, &mut written)?;
        }
    }

    let summary = Summary {
        pop_count: bundle.pop_count,
        ip_count: bundle.ip_count,
        unlocated_pops: bundle.unlocated_pops,
        null_stats: &bundle.null_stats,
        all_convergence_at_first_step: bundle.all_convergence.at(first_step),
        databases: bundle
            .databases
            .iter()
            .map(|f| summarize(f, first_step))
            .collect(),
        correlation: &bundle.correlation,
        correlation_with_nulls: &bundle.correlation_with_nulls,
        anomalies: &bundle.anomalies,
        churn: &bundle.churn,
        regions: bundle
            .regions
            .iter()
            .map(|r| RegionSummary {
                name: &r.name,
                pop_count: r.pop_count,
                databases: r
                    .databases
                    .iter()
                    .map(|f| summarize(f, first_step))
                    .collect(),
            })
            .collect(),
    };
    let path = dir.join("summary.json");
    serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), &summary)?;
    written.push(path);
    Ok(written)
}

fn is_cdf_file(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".csv")
        && (name.starts_with("convergence_")
            || name.starts_with("agreement_")
            || name.starts_with("deviation_"))
}

/// Re-reads every CDF file under `dir` (one level of subdirectories) and
/// checks that x strictly increases and fractions never decrease or exceed 1.
/// Returns the number of files checked.
pub fn verify_cdf_files(dir: &Path) -> Result<usize> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            for inner in fs::read_dir(&path)? {
                files.push(inner?.path());
            }
        } else {
            files.push(path);
        }
    }
    files.retain(|p| is_cdf_file(p));
    files.sort();

    for path in &files {
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut prev: Option<(f64, f64)> = None;
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::Invariant(format!("{}: unreadable row {rec:?}", path.display()))
                    })
            };
            let (x, frac) = (parse(0)?, parse(1)?);
            let ok = frac <= 1.0 + 1e-12 && prev.is_none_or(|(px, pf)| x > px && frac >= pf);
            if !ok {
                return Err(Error::Invariant(format!(
                    "{} is not a monotone CDF",
                    path.display()
                )));
            }
            prev = Some((x, frac));
        }
    }
    Ok(files.len())
}
