//! Run configuration, read from TOML. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use popgeo::extract::ExtractionConfig;
use popgeo::geodb::DbKind;
use popgeo::locate::VoteConfig;
use popgeo::report::{EvalSettings, ALL_DATABASES};
use popgeo::synth::Scenario;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub observations: Option<PathBuf>,
    pub ip2as: Option<PathBuf>,
    /// CSV of `name,lat_min,lat_max,lon_min,lon_max` boxes.
    pub regions: Option<PathBuf>,
    pub null_coords: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbSpec {
    pub name: String,
    pub kind: DbKind,
    pub path: PathBuf,
    /// Older snapshot of the same database, for churn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub with_singletons: bool,
    pub threads: Option<usize>,
    pub paths: Paths,
    pub extraction: ExtractionConfig,
    pub vote: VoteConfig,
    pub evaluation: EvalSettings,
    pub databases: Vec<DbSpec>,
    pub synth: Scenario,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.observations,
            &mut paths.ip2as,
            &mut paths.regions,
            &mut paths.null_coords,
            &mut paths.out,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for db in &mut self.databases {
            fix(&mut db.path);
            if let Some(p) = &mut db.previous {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.extraction.validate()?;
        self.vote.validate()?;
        self.evaluation.validate()?;
        let mut names = Vec::new();
        for db in &self.databases {
            let ok = !db.name.is_empty()
                && db
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !ok {
                bail!(
                    "database name {:?} must use only letters, digits, '-', '_' or '.'",
                    db.name
                );
            }
            if db.name == ALL_DATABASES {
                bail!("database name {ALL_DATABASES:?} is reserved");
            }
            names.push(db.name.as_str());
        }
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            bail!("duplicate database name {:?}", w[0]);
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}
