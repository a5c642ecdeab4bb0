//! `popgeo`: PoP extraction, localization and geolocation database evaluation.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use popgeo::evaluate::{default_regions, load_regions};
use popgeo::extract::{extract_pops, threshold_sweep, PopMap};
use popgeo::geodb::{
    load_null_coords, load_point_db, load_range_db, DbKind, GeoDatabase, NullCoords,
};
use popgeo::ingest::{aggregate_edges, load_ip2as, parse_observations, DelayEdge, PrefixMap};
use popgeo::locate::{locate_all, write_locations_json};
use popgeo::records::DEFAULT_ERROR_CAP;
use popgeo::report::{evaluate_all, verify_cdf_files, write_bundle, EvalInputs, ALL_DATABASES};
use popgeo::synth::generate;
use popgeo::{par, LineError};

use config::{DbSpec, Paths, RunConfig};

const POPMAP_CORE: &str = "popmap_core.json";
const POPMAP_SINGLETONS: &str = "popmap_singletons.json";

#[derive(Parser, Debug)]
#[command(name = "popgeo", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides paths.out)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker thread cap
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Use the PoP map extended with singletons
    #[arg(long, global = true)]
    with_singletons: bool,
    #[arg(long, global = true, value_name = "KM")]
    max_radius_km: Option<f64>,
    #[arg(long, global = true, value_name = "KM")]
    step_km: Option<f64>,
    /// `lat,lon` rows whose database answers are treated as null
    #[arg(long, global = true, value_name = "PATH")]
    null_coords_file: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the core and singleton-extended PoP maps
    Extract,
    /// Locate every PoP per database and across all databases
    Locate,
    /// Write the evaluation report bundle
    Evaluate,
    /// Count PoPs and addresses over a grid of delay thresholds
    Sweep {
        /// Ascending thresholds in ms
        #[arg(long, default_value = "1,3,5,7,9", value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Generate a synthetic fixture with a matching config
    Synth,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e.chain().any(|c| {
                c.downcast_ref::<popgeo::Error>()
                    .is_some_and(|p| p.is_internal())
            });
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let c = cli.common;
    if let Some(out) = c.out {
        cfg.paths.out = Some(out);
    }
    if let Some(n) = c.threads {
        cfg.threads = Some(n);
    }
    cfg.with_singletons |= c.with_singletons;
    if let Some(r) = c.max_radius_km {
        cfg.vote.max_radius_km = r;
    }
    if let Some(s) = c.step_km {
        cfg.vote.step_km = s;
    }
    if let Some(p) = c.null_coords_file {
        cfg.paths.null_coords = Some(p);
    }
    if let Some(seed) = cfg.seed {
        cfg.synth.seed = seed;
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        par::init_threads(n);
    }

    let out = cfg.out_dir();
    fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;

    match cli.command {
        Command::Extract => cmd_extract(&cfg, &out),
        Command::Locate => cmd_locate(&cfg, &out),
        Command::Evaluate => cmd_evaluate(&cfg, &out),
        Command::Sweep { grid } => cmd_sweep(&cfg, &out, &grid),
        Command::Synth => cmd_synth(&cfg, &out),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn warn_skipped(path: &Path, errors: &[LineError]) {
    for e in errors.iter().take(5) {
        warn!("{}: skipped {e}", path.display());
    }
    if errors.len() > 5 {
        warn!(
            "{}: skipped {} malformed lines in total",
            path.display(),
            errors.len()
        );
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .with_context(|| format!("paths.{key} is not configured"))
}

fn load_inputs(paths: &Paths) -> Result<(Vec<DelayEdge>, PrefixMap)> {
    let obs_path = required(&paths.observations, "observations")?;
    let ip2as_path = required(&paths.ip2as, "ip2as")?;

    let prefixes = load_ip2as(open(ip2as_path)?, DEFAULT_ERROR_CAP)
        .with_context(|| format!("reading {}", ip2as_path.display()))?;
    warn_skipped(ip2as_path, &prefixes.errors);
    let prefix_map: PrefixMap = prefixes.items.into_iter().collect();

    let obs = parse_observations(open(obs_path)?, DEFAULT_ERROR_CAP)
        .with_context(|| format!("reading {}", obs_path.display()))?;
    warn_skipped(obs_path, &obs.errors);
    if obs.items.is_empty() {
        warn!(
            "{} holds no observations; PoP maps will be empty",
            obs_path.display()
        );
    }
    Ok((aggregate_edges(&obs.items), prefix_map))
}

fn load_db(spec: &DbSpec, path: &Path, nulls: Option<&NullCoords>) -> Result<GeoDatabase> {
    let reader = open(path)?;
    let (mut db, parsed) = match spec.kind {
        DbKind::Range => load_range_db(reader, &spec.name, DEFAULT_ERROR_CAP),
        DbKind::Point => load_point_db(reader, &spec.name, DEFAULT_ERROR_CAP),
    }
    .with_context(|| format!("reading database {}", path.display()))?;
    warn_skipped(path, &parsed.errors);
    if let Some(nulls) = nulls {
        let n = db.apply_null_coords(nulls);
        if n > 0 {
            info!(
                "{}: nulled {n} records at placeholder coordinates",
                spec.name
            );
        }
    }
    Ok(db)
}

fn load_nulls(cfg: &RunConfig) -> Result<Option<NullCoords>> {
    let Some(path) = &cfg.paths.null_coords else {
        return Ok(None);
    };
    let parsed = load_null_coords(open(path)?, DEFAULT_ERROR_CAP)
        .with_context(|| format!("reading {}", path.display()))?;
    warn_skipped(path, &parsed.errors);
    Ok(Some(parsed.items.into_iter().collect()))
}

/// Current databases and the older snapshots that precede some of them.
type Databases = (Vec<GeoDatabase>, Vec<(String, GeoDatabase)>);

fn load_dbs(cfg: &RunConfig) -> Result<Databases> {
    if cfg.databases.is_empty() {
        bail!("no databases configured");
    }
    let nulls = load_nulls(cfg)?;
    let mut current = Vec::new();
    let mut previous = Vec::new();
    for spec in &cfg.databases {
        current.push(load_db(spec, &spec.path, nulls.as_ref())?);
        if let Some(p) = &spec.previous {
            previous.push((spec.name.clone(), load_db(spec, p, nulls.as_ref())?));
        }
    }
    Ok((current, previous))
}

fn read_popmap(out: &Path, with_singletons: bool) -> Result<PopMap> {
    let path = out.join(if with_singletons {
        POPMAP_SINGLETONS
    } else {
        POPMAP_CORE
    });
    PopMap::read_json(open(&path)?, with_singletons)
        .with_context(|| format!("reading {} (run `popgeo extract` first)", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_popmap(path: &Path, map: &PopMap) -> Result<()> {
    let mut w = create(path)?;
    map.write_json(&mut w)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ExtractStats {
    core_pops: usize,
    core_ips: usize,
    all_pops: usize,
    all_ips: usize,
}

fn cmd_extract(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (edges, prefix_map) = load_inputs(&cfg.paths)?;
    let core = extract_pops(&edges, &prefix_map, &cfg.extraction, false)?;
    let all = extract_pops(&edges, &prefix_map, &cfg.extraction, true)?;
    write_popmap(&out.join(POPMAP_CORE), &core)?;
    write_popmap(&out.join(POPMAP_SINGLETONS), &all)?;
    let stats = ExtractStats {
        core_pops: core.pop_count(),
        core_ips: core.ip_count(),
        all_pops: all.pop_count(),
        all_ips: all.ip_count(),
    };
    write_json(&out.join("extract_stats.json"), &stats)?;
    info!(
        "{} PoPs with {} addresses; {} addresses including singletons",
        stats.core_pops, stats.core_ips, stats.all_ips
    );
    Ok(())
}

fn cmd_locate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (dbs, _) = load_dbs(cfg)?;
    let map = read_popmap(out, cfg.with_singletons)?;
    for db in &dbs {
        let locs = locate_all(
            &map,
            std::slice::from_ref(db),
            &cfg.vote,
            cfg.with_singletons,
        );
        let path = out.join(format!("locations_{}.json", db.name()));
        write_locations_json(&locs, create(&path)?)?;
    }
    let locs = locate_all(&map, &dbs, &cfg.vote, cfg.with_singletons);
    write_locations_json(
        &locs,
        create(&out.join(format!("locations_{ALL_DATABASES}.json")))?,
    )?;
    let located = locs.iter().filter(|l| l.coord.is_some()).count();
    info!(
        "located {located} of {} PoPs across {} databases",
        locs.len(),
        dbs.len()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (dbs, previous) = load_dbs(cfg)?;
    let core = read_popmap(out, false)?;
    let all = read_popmap(out, true)?;
    let regions = match &cfg.paths.regions {
        Some(p) => load_regions(open(p)?, DEFAULT_ERROR_CAP)
            .with_context(|| format!("reading {}", p.display()))?,
        None => default_regions(),
    };
    let inputs = EvalInputs {
        core: &core,
        all: &all,
        dbs: &dbs,
        previous: &previous,
        regions: &regions,
    };
    let bundle = evaluate_all(&inputs, &cfg.vote, &cfg.evaluation, cfg.with_singletons)?;
    let written = write_bundle(&bundle, &cfg.evaluation, out)?;
    let checked = verify_cdf_files(out)?;
    info!(
        "wrote {} report files; {checked} CDFs verified",
        written.len()
    );
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, out: &Path, grid: &[f64]) -> Result<()> {
    let (edges, prefix_map) = load_inputs(&cfg.paths)?;
    let rows = threshold_sweep(&edges, &prefix_map, &cfg.extraction, grid)?;
    let mut w = create(&out.join("sweep.csv"))?;
    writeln!(w, "threshold_ms,pop_count,ip_count")?;
    for r in &rows {
        writeln!(w, "{},{},{}", r.threshold_ms, r.pop_count, r.ip_count)?;
        info!(
            "{} ms: {} PoPs, {} addresses",
            r.threshold_ms, r.pop_count, r.ip_count
        );
    }
    w.flush()?;
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let fixture = generate(&cfg.synth)?;

    let mut w = create(&out.join("observations.csv"))?;
    fixture.write_observations(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("ip2as.csv"))?;
    fixture.write_ip2as(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("truth.csv"))?;
    fixture.write_truth(&mut w)?;
    w.flush()?;
    write_popmap(&out.join("planted_core.json"), &fixture.planted_core())?;
    write_popmap(&out.join("planted_singletons.json"), &fixture.planted)?;

    let mut databases = Vec::new();
    for db in &fixture.databases {
        let file = format!("db_{}.csv", db.name());
        let mut w = create(&out.join(&file))?;
        db.write_point_csv(&mut w)?;
        w.flush()?;
        databases.push(DbSpec {
            name: db.name().to_string(),
            kind: DbKind::Point,
            path: PathBuf::from(file),
            previous: None,
        });
    }

    let run = RunConfig {
        seed: Some(cfg.synth.seed),
        with_singletons: false,
        threads: None,
        paths: Paths {
            observations: Some("observations.csv".into()),
            ip2as: Some("ip2as.csv".into()),
            regions: None,
            null_coords: None,
            out: Some(".".into()),
        },
        extraction: cfg.extraction.clone(),
        vote: cfg.vote.clone(),
        evaluation: cfg.evaluation.clone(),
        databases,
        synth: cfg.synth.clone(),
    };
    let text = toml::to_string_pretty(&run).context("serializing generated config")?;
    fs::write(out.join("config.toml"), text)?;
    info!(
        "planted {} PoPs with {} addresses and {} databases in {}",
        fixture.planted.pop_count(),
        fixture.planted.ip_count(),
        fixture.databases.len(),
        out.display()
    );
    Ok(())
}
