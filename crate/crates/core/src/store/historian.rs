use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::StoreError;
use crate::time_gateway::CanonicalTimestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Verified,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistorianEntry {
    pub id: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Run-report ids.
    pub evidence: Vec<String>,
    pub verdict: Verdict,
    pub created: CanonicalTimestamp,
}

#[derive(Clone, Debug, Default)]
pub struct HistorianFilter {
    pub config_hash: Option<String>,
    pub verdict: Option<Verdict>,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(config).expect("json value encodes")))
}

/// Verified configurations with their supporting run reports. Entries are
/// appended to `historian.ndjson`; reports live under `reports/<id>.json`.
#[derive(Debug, Default)]
pub struct Historian {
    dir: Option<PathBuf>,
    entries: Vec<HistorianEntry>,
    reports: BTreeSet<String>,
}

impl Historian {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir.join("reports"))?;
        let mut entries = Vec::new();
        let log = dir.join("historian.ndjson");
        if log.exists() {
            for line in fs::read_to_string(&log)?.lines().filter(|l| !l.trim().is_empty()) {
                entries.push(serde_json::from_str(line)?);
            }
        }
        let reports = fs::read_dir(dir.join("reports"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "json").then(|| p.file_stem()?.to_str().map(String::from))?
            })
            .collect();
        Ok(Historian {
            dir: Some(dir.to_path_buf()),
            entries,
            reports,
        })
    }

    pub fn has_report(&self, id: &str) -> bool {
        self.reports.contains(id)
    }

    pub fn store_report(&mut self, id: &str, json: &[u8]) -> Result<(), StoreError> {
        if let Some(dir) = &self.dir {
            fs::write(dir.join("reports").join(format!("{id}.json")), json)?;
        }
        self.reports.insert(id.to_string());
        Ok(())
    }

    pub fn load_report(&self, id: &str) -> Result<Option<Vec<u8>>, StoreError> {
        if !self.reports.contains(id) {
            return Ok(None);
        }
        match &self.dir {
            Some(dir) => Ok(Some(fs::read(dir.join("reports").join(format!("{id}.json")))?)),
            None => Ok(None),
        }
    }

    pub fn put(
        &mut self,
        config: serde_json::Value,
        evidence: Vec<String>,
        verdict: Verdict,
        created: CanonicalTimestamp,
    ) -> Result<String, StoreError> {
        if let Some(missing) = evidence.iter().find(|e| !self.reports.contains(*e)) {
            return Err(StoreError::DanglingEvidence(missing.clone()));
        }
        let config_hash = config_hash(&config);
        let mut entry = HistorianEntry {
            id: String::new(),
            config,
            config_hash,
            evidence,
            verdict,
            created,
        };
        let body = serde_json::to_vec(&entry)?;
        entry.id = hex::encode(&Sha256::digest(&body)[..8]);
        if let Some(dir) = &self.dir {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join("historian.ndjson"))?;
            f.write_all(&line)?;
            f.sync_data()?;
        }
        let id = entry.id.clone();
        self.entries.push(entry);
        Ok(id)
    }

    pub fn query(&self, filter: &HistorianFilter) -> Vec<HistorianEntry> {
        self.entries
            .iter()
            .filter(|e| filter.config_hash.as_ref().is_none_or(|h| *h == e.config_hash))
            .filter(|e| filter.verdict.is_none_or(|v| v == e.verdict))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts() -> CanonicalTimestamp {
        CanonicalTimestamp {
            real: crate::sim::SimTime(5),
            logical: 1,
            twin: crate::time_gateway::TwinTime::from_micros(5),
            mapping: 0,
        }
    }

    #[test]
    fn put_query_and_persist() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = serde_json::json!({"timeout": "20ms"});
        let id = {
            let mut h = Historian::open(dir.path()).unwrap();
            assert!(matches!(
                h.put(cfg.clone(), vec!["nope".into()], Verdict::Verified, ts()),
                Err(StoreError::DanglingEvidence(_))
            ));
            h.store_report("run-1", b"{}").unwrap();
            h.put(cfg.clone(), vec!["run-1".into()], Verdict::Verified, ts()).unwrap()
        };
        let h = Historian::open(dir.path()).unwrap();
        let got = h.query(&HistorianFilter {
            config_hash: Some(config_hash(&cfg)),
            verdict: None,
        });
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].id, id);
        assert!(h.query(&HistorianFilter { config_hash: None, verdict: Some(Verdict::Rejected) }).is_empty());
    }
}
