use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn popgeo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popgeo"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = popgeo(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Two PoPs of three routers each in AS 100, joined by one slow link.
fn two_pop_fixture(dir: &Path) {
    let mut obs = String::new();
    let links = [
        ("10.0.0.1", "10.0.0.2", 0.5),
        ("10.0.0.1", "10.0.0.3", 0.7),
        ("10.0.1.1", "10.0.1.2", 0.4),
        ("10.0.1.1", "10.0.1.3", 1.1),
        ("10.0.0.1", "10.0.1.1", 25.0),
    ];
    for (a, b, d) in links {
        for k in 0..5 {
            obs.push_str(&format!("{a},{b},{}\n", d + 0.01 * k as f64));
        }
    }
    write(dir, "obs.csv", &obs);
    write(dir, "ip2as.csv", "10.0.0.0/16,100\n");
    write(
        dir,
        "db_good.csv",
        "10.0.0.1,48.85,2.35\n10.0.0.2,48.85,2.35\n10.0.0.3,48.85,2.35\n\
         10.0.1.1,52.52,13.40\n10.0.1.2,52.52,13.40\n10.0.1.3,52.52,13.40\n",
    );
    write(dir, "db_empty.csv", "10.0.0.1,,\n10.0.1.1,,\n");
    write(
        dir,
        "config.toml",
        r#"
[paths]
observations = "obs.csv"
ip2as = "ip2as.csv"
out = "out"

[[databases]]
name = "good"
kind = "point"
path = "db_good.csv"

[[databases]]
name = "empty"
kind = "point"
path = "db_empty.csv"
"#,
    );
}

#[test]
fn extract_two_pop_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_pop_fixture(dir);
    ok(dir, &["extract", "--config", "config.toml"]);
    let core = json(&dir.join("out/popmap_core.json"));
    let pops = core.as_array().unwrap();
    assert_eq!(pops.len(), 2);
    assert_eq!(pops[0]["id"], "10.0.0.1");
    assert_eq!(pops[1]["core_members"].as_array().unwrap().len(), 3);
    assert!(dir.join("out/popmap_singletons.json").exists());
    let stats = json(&dir.join("out/extract_stats.json"));
    assert_eq!(stats["core_pops"], 2);
    assert_eq!(stats["core_ips"], 6);
}

#[test]
fn empty_observations_give_empty_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_pop_fixture(dir);
    write(dir, "obs.csv", "");
    let out = ok(dir, &["extract", "--config", "config.toml"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no observations"));
    assert_eq!(
        json(&dir.join("out/popmap_core.json")),
        Value::Array(vec![])
    );
    assert_eq!(
        json(&dir.join("out/popmap_singletons.json")),
        Value::Array(vec![])
    );
}

#[test]
fn missing_ip2as_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_pop_fixture(dir);
    fs::remove_file(dir.join("ip2as.csv")).unwrap();
    let out = popgeo(dir, &["extract", "--config", "config.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ip2as.csv"));
}

#[test]
fn locate_perfect_and_null_databases() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_pop_fixture(dir);
    ok(dir, &["extract", "--config", "config.toml"]);
    ok(dir, &["locate", "--config", "config.toml"]);

    let good = json(&dir.join("out/locations_good.json"));
    let row = &good[0];
    assert_eq!(row["pop_id"], "10.0.0.1");
    assert!((row["lat"].as_f64().unwrap() - 48.85).abs() < 1e-9);
    assert!((row["lon"].as_f64().unwrap() - 2.35).abs() < 1e-9);
    assert_eq!(row["range_km"], 1.11);
    assert_eq!(row["frac_all"], 1.0);

    let empty = json(&dir.join("out/locations_empty.json"));
    assert_eq!(empty.as_array().unwrap().len(), 2);
    assert!(empty[0]["lat"].is_null() && empty[0]["range_km"].is_null());

    let all = json(&dir.join("out/locations_all.json"));
    assert_eq!(all[1]["frac_all"], 0.5);
    assert_eq!(all[1]["frac_located"], 1.0);
}

#[test]
fn locate_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_pop_fixture(dir);
    ok(dir, &["extract", "--config", "config.toml"]);
    ok(dir, &["locate", "--config", "config.toml"]);
    let first = fs::read(dir.join("out/locations_all.json")).unwrap();
    ok(
        dir,
        &["locate", "--config", "config.toml", "--threads", "3"],
    );
    assert_eq!(first, fs::read(dir.join("out/locations_all.json")).unwrap());
}

#[test]
fn flags_override_vote_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_pop_fixture(dir);
    ok(dir, &["extract", "--config", "config.toml"]);
    ok(
        dir,
        &[
            "locate",
            "--config",
            "config.toml",
            "--step-km",
            "2.5",
            "--max-radius-km",
            "50",
        ],
    );
    let good = json(&dir.join("out/locations_good.json"));
    assert_eq!(good[0]["range_km"], 2.5);
}

#[test]
fn null_coords_file_masks_placeholders() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_pop_fixture(dir);
    write(dir, "nulls.csv", "# country centers\n52.52,13.40\n");
    ok(dir, &["extract", "--config", "config.toml"]);
    ok(
        dir,
        &[
            "locate",
            "--config",
            "config.toml",
            "--null-coords-file",
            "nulls.csv",
        ],
    );
    let good = json(&dir.join("out/locations_good.json"));
    assert!(good[0]["lat"].is_number());
    assert!(good[1]["lat"].is_null());
}

#[test]
fn locate_without_databases_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_pop_fixture(dir);
    write(
        dir,
        "bare.toml",
        "[paths]\nobservations = \"obs.csv\"\nip2as = \"ip2as.csv\"\nout = \"out\"\n",
    );
    ok(dir, &["extract", "--config", "bare.toml"]);
    let out = popgeo(dir, &["locate", "--config", "bare.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no databases"));
}

#[test]
fn corrupt_popmap_is_an_internal_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_pop_fixture(dir);
    fs::create_dir_all(dir.join("out")).unwrap();
    write(
        dir,
        "out/popmap_core.json",
        r#"[{"id":"10.0.0.1","asn":100,"core_members":["10.0.0.1","10.0.0.2"],"singleton_members":[]},
            {"id":"10.0.0.2","asn":100,"core_members":["10.0.0.2","10.0.0.3"],"singleton_members":[]}]"#,
    );
    let out = popgeo(dir, &["locate", "--config", "config.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_pop_fixture(dir);
    ok(
        dir,
        &["sweep", "--config", "config.toml", "--grid", "1,3,5,7,9"],
    );
    let text = fs::read_to_string(dir.join("out/sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0], "threshold_ms,pop_count,ip_count");
    assert_eq!(lines[3], "5,2,6");

    let out = popgeo(dir, &["sweep", "--config", "config.toml", "--grid", "5,3"]);
    assert_eq!(out.status.code(), Some(1));
}

fn synth_config(dir: &Path, extra: &str) {
    write(
        dir,
        "scenario.toml",
        &format!(
            r#"
[synth]
pop_count = 20
ips_per_pop = 6
seed = 3
{extra}
[[synth.databases]]
name = "hq"
noise_km = 5.0
hq_override = {{ asn = 64513, coord = {{ lat = 40.0, lon = -100.0 }}, fraction = 0.9 }}

[[synth.databases]]
name = "twin1"

[[synth.databases]]
name = "twin2"

[evaluation.anomaly]
min_ips = 10
"#
        ),
    );
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_config(dir, "");
    ok(dir, &["synth", "--config", "scenario.toml", "--out", "a"]);
    ok(dir, &["synth", "--config", "scenario.toml", "--out", "b"]);
    for f in [
        "observations.csv",
        "ip2as.csv",
        "truth.csv",
        "db_hq.csv",
        "config.toml",
    ] {
        assert_eq!(
            fs::read(dir.join("a").join(f)).unwrap(),
            fs::read(dir.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let truth = fs::read_to_string(dir.join("a/truth.csv")).unwrap();
    assert_eq!(truth.lines().next(), Some("ip,asn,pop_id,role,lat,lon"));
    assert_eq!(truth.lines().count(), 121);
}

#[test]
fn synth_rejects_overlapping_delay_ranges() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_config(
        dir,
        "intra_delay_ms = [0.1, 12.0]\ninter_delay_ms = [10.0, 40.0]",
    );
    let out = popgeo(dir, &["synth", "--config", "scenario.toml", "--out", "a"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("intra-PoP"));
}

#[test]
fn evaluate_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_config(dir, "");
    ok(dir, &["synth", "--config", "scenario.toml", "--out", "run"]);
    let run = dir.join("run");
    ok(&run, &["extract", "--config", "config.toml"]);
    ok(&run, &["evaluate", "--config", "config.toml"]);

    let corr = fs::read_to_string(run.join("correlation.csv")).unwrap();
    assert!(corr.lines().any(|l| l == "twin1,twin2,1,1"), "{corr}");

    let anomalies = fs::read_to_string(run.join("anomalies.csv")).unwrap();
    let flagged: Vec<&str> = anomalies.lines().skip(1).collect();
    assert_eq!(flagged.len(), 1, "{anomalies}");
    assert!(flagged[0].starts_with("hq,64513,40,-100,"));

    for name in [
        "convergence_all.csv",
        "convergence_twin1.csv",
        "deviation_hq.csv",
        "agreement_hq_500.csv",
    ] {
        assert!(run.join(name).exists(), "{name}");
    }
    let conv = fs::read_to_string(run.join("convergence_twin1.csv")).unwrap();
    assert_eq!(conv.lines().nth(1), Some("1,1"));
    let summary = json(&run.join("summary.json"));
    assert_eq!(summary["pop_count"], 20);
    assert!(run.join("region_World/convergence_hq.csv").exists());
}

#[test]
fn evaluate_with_regions_and_churn() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_pop_fixture(dir);
    write(dir, "regions.csv", "paris,48,49,2,3\n");
    write(
        dir,
        "db_old.csv",
        "10.0.0.1,48.85,2.35\n10.0.0.2,48.85,2.35\n10.0.0.3,40.0,2.35\n\
         10.0.1.1,52.52,13.40\n10.0.1.2,52.52,13.40\n10.0.1.3,52.52,13.40\n",
    );
    let cfg = fs::read_to_string(dir.join("config.toml"))
        .unwrap()
        .replace(
            "path = \"db_good.csv\"",
            "path = \"db_good.csv\"\nprevious = \"db_old.csv\"",
        )
        .replace("out = \"out\"", "out = \"out\"\nregions = \"regions.csv\"");
    write(dir, "config.toml", &cfg);
    ok(dir, &["extract", "--config", "config.toml"]);
    ok(dir, &["evaluate", "--config", "config.toml"]);
    let churn = fs::read_to_string(dir.join("out/churn.csv")).unwrap();
    assert_eq!(churn.lines().nth(1), Some("good,6,1,0.16666666666666666,1"));
    let paris = dir.join("out/region_paris");
    assert!(paris.join("convergence_good.csv").exists());
    let summary = json(&dir.join("out/summary.json"));
    assert_eq!(summary["regions"][0]["pop_count"], 1);
}
