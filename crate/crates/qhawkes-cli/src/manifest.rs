//! Run manifest: a JSON ledger in the output directory recording, for
//! every stage that ran, the hash of each file it read and wrote. A
//! stage starts by checking its predecessors' entries, so a missing or
//! edited artifact is caught before any work happens, with the refusal
//! naming the files involved.

use qhawkes::error::{Error, Result};
use qhawkes::io::{sha256_hex, TOOL_VERSION};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Out-relative (or external) input paths with their content hashes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn fresh(config_hash: &str) -> Self {
        Manifest {
            version: TOOL_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            stages: BTreeMap::new(),
        }
    }

    /// Loads the manifest for a stage run. Root stages reset a manifest
    /// recorded under a different configuration (they regenerate
    /// everything downstream anyway); later stages refuse instead, since
    /// their inputs would mix settings.
    pub fn load(out: &Path, config_hash: &str, is_root: bool) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        if !path.is_file() {
            return Ok(Self::fresh(config_hash));
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("corrupt manifest {}: {e}", path.display())))?;
        if m.config_hash != config_hash {
            if is_root {
                return Ok(Self::fresh(config_hash));
            }
            let short = |h: &str| h.chars().take(12).collect::<String>();
            return Err(Error::config(format!(
                "configuration changed since this pipeline ran (hash {} recorded, {} now); \
                 re-run from the first stage or use a fresh output directory",
                short(&m.config_hash),
                short(config_hash)
            )));
        }
        Ok(m)
    }

    /// Verifies that `stage` ran and that every artifact it recorded is
    /// still present and unmodified. Returns the record for input
    /// bookkeeping.
    pub fn require_stage(&self, out: &Path, stage: &str) -> Result<&StageRecord> {
        let rec = self.stages.get(stage).ok_or_else(|| {
            Error::data(format!("no artifacts from '{stage}': run `qhawkes {stage}` first"))
        })?;
        let mut missing = Vec::new();
        let mut stale = Vec::new();
        for (rel, recorded) in &rec.outputs {
            let path = out.join(rel);
            if !path.is_file() {
                missing.push(rel.as_str());
                continue;
            }
            if hash_file(&path)? != *recorded {
                stale.push(rel.as_str());
            }
        }
        if !missing.is_empty() {
            return Err(Error::data(format!(
                "missing artifacts from '{stage}': {}; re-run `qhawkes {stage}`",
                missing.join(", ")
            )));
        }
        if !stale.is_empty() {
            return Err(Error::data(format!(
                "stale artifacts from '{stage}' (changed on disk since recorded): {}; \
                 re-run `qhawkes {stage}`",
                stale.join(", ")
            )));
        }
        Ok(rec)
    }

    pub fn record(&mut self, stage: &str, rec: StageRecord) {
        self.stages.insert(stage.to_string(), rec);
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("manifest not encodable: {e}")))?;
        std::fs::write(out.join(MANIFEST_FILE), text + "\n")
            .map_err(|e| Error::data(format!("cannot write manifest: {e}")))?;
        Ok(())
    }
}
