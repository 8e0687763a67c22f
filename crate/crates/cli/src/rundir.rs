//! On-disk layout of a recorded run:
//!
//! ```text
//! <dir>/scenario.toml   scenario as loaded
//! <dir>/run.json        seed, auto-confirm and report hash
//! <dir>/externals.json  the range.external log, replayable
//! <dir>/report.json     run report
//! <dir>/store/          broker segments
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use byztwin_core::harness::ScenarioError;
use byztwin_core::store::{Body, StoreError};
use byztwin_core::{Broker, ExternalEvent, RunReport, Scenario, Topic};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RunDirError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0} already holds a store")]
    NotEmpty(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_hash: String,
    pub seed: u64,
    pub auto_confirm: bool,
    pub report_hash: String,
}

pub fn store_dir(dir: &Path) -> PathBuf {
    dir.join("store")
}

/// Open a fresh store under `dir`, refusing to reuse one.
pub fn create_store(dir: &Path) -> Result<Broker, RunDirError> {
    let s = store_dir(dir);
    if s.exists() && fs::read_dir(&s).map_err(|e| io(&s, e))?.next().is_some() {
        return Err(RunDirError::NotEmpty(s));
    }
    Ok(Broker::open_dir(&s)?)
}

pub fn open_store(dir: &Path) -> Result<Broker, RunDirError> {
    Ok(Broker::open_dir(&store_dir(dir))?)
}

/// The recorded external log, in application order.
pub fn externals(broker: &Broker) -> Vec<ExternalEvent> {
    broker
        .records(Topic::RangeExternal)
        .iter()
        .filter_map(|r| match &r.body {
            Body::External(e) => Some(e.clone()),
            _ => None,
        })
        .collect()
}

/// Write everything but the store, which the run wrote as it went.
pub fn write(dir: &Path, scenario: &Scenario, broker: &Broker, report: &RunReport) -> Result<(), RunDirError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let manifest = RunManifest {
        scenario_hash: report.scenario_hash.clone(),
        seed: report.seed,
        auto_confirm: report.auto_confirm,
        report_hash: report.hash(),
    };
    put(&dir.join("scenario.toml"), scenario.to_toml().as_bytes())?;
    put_json(&dir.join("run.json"), &manifest)?;
    put_json(&dir.join("externals.json"), &externals(broker))?;
    put_json(&dir.join("report.json"), report)?;
    Ok(())
}

pub struct Loaded {
    pub scenario: Scenario,
    pub manifest: RunManifest,
    pub externals: Vec<ExternalEvent>,
    pub report: RunReport,
}

pub fn load(dir: &Path) -> Result<Loaded, RunDirError> {
    Ok(Loaded {
        scenario: Scenario::load(&dir.join("scenario.toml"))?,
        manifest: get_json(&dir.join("run.json"))?,
        externals: get_json(&dir.join("externals.json"))?,
        report: get_json(&dir.join("report.json"))?,
    })
}

fn io(path: &Path, source: std::io::Error) -> RunDirError {
    RunDirError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn put(path: &Path, bytes: &[u8]) -> Result<(), RunDirError> {
    fs::write(path, bytes).map_err(|e| io(path, e))
}

fn put_json<T: Serialize>(path: &Path, v: &T) -> Result<(), RunDirError> {
    let s = serde_json::to_vec_pretty(v).map_err(|source| RunDirError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    put(path, &s)
}

fn get_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RunDirError> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| RunDirError::Json {
        path: path.to_path_buf(),
        source,
    })
}
