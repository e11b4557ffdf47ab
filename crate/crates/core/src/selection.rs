//! Snapshot persistence and model selection.
//!
//! After every batch the trained model and its regularizer state are saved
//! as `<run_dir>/snapshots/batch_<i>.snap`. A strategy then picks the
//! snapshot that continues training:
//!
//! * `NS` keeps only the latest snapshot and always continues from it.
//! * `RW3` keeps the latest three and continues from the lowest dev WER.
//! * `BoA` keeps everything and continues from the lowest dev WER so far.
//!
//! Ties go to the most recent batch.
//!
//! A snapshot file is an 8-byte magic, a little-endian `u32` header length,
//! a JSON header, then the payload: every array as little-endian `f64`s in
//! the order the header lists them. The header carries a SHA-256 of the
//! payload.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nncore::{Layout, MlpConfig, Network, ParamVector};
use crate::regularizers::{EwcState, Method, RegState, SiState};

pub const SNAPSHOT_DIR: &str = "snapshots";
pub const INDEX_FILE: &str = "index.json";
const SNAPSHOT_MAGIC: [u8; 8] = *b"DLSNAP\0\0";
const SNAPSHOT_VERSION: u32 = 1;
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "NS")]
    Ns,
    #[serde(rename = "RW3")]
    Rw3,
    #[serde(rename = "BoA")]
    BoA,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Ns, Strategy::Rw3, Strategy::BoA];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ns => "NS",
            Strategy::Rw3 => "RW3",
            Strategy::BoA => "BoA",
        }
    }

    pub fn capacity(self) -> CapacityPolicy {
        match self {
            Strategy::Ns => CapacityPolicy::Window(1),
            Strategy::Rw3 => CapacityPolicy::Window(3),
            Strategy::BoA => CapacityPolicy::Unbounded,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        match s.to_ascii_lowercase().as_str() {
            "ns" => Ok(Strategy::Ns),
            "rw3" => Ok(Strategy::Rw3),
            "boa" => Ok(Strategy::BoA),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "k", rename_all = "lowercase")]
pub enum CapacityPolicy {
    Unbounded,
    Window(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRecord {
    pub batch_index: usize,
    pub dev_wer: f64,
    pub created_at: u64,
    /// File name inside the snapshot directory.
    pub payload_path: String,
    pub method: Method,
    pub reg_state_included: bool,
}

/// Pure selection over a set of retained records.
pub fn select(records: &[SnapshotRecord], strategy: Strategy) -> Result<&SnapshotRecord> {
    let latest = records
        .iter()
        .max_by_key(|r| r.batch_index)
        .ok_or_else(|| Error::State("cannot select from an empty snapshot store".into()))?;
    fn best_of(pool: Vec<&SnapshotRecord>) -> &SnapshotRecord {
        let mut best = pool[0];
        for r in pool {
            let better = r.dev_wer < best.dev_wer
                || (r.dev_wer == best.dev_wer && r.batch_index > best.batch_index);
            if better {
                best = r;
            }
        }
        best
    }
    Ok(match strategy {
        Strategy::Ns => latest,
        Strategy::Rw3 => {
            let mut recent: Vec<&SnapshotRecord> = records.iter().collect();
            recent.sort_by_key(|r| std::cmp::Reverse(r.batch_index));
            recent.truncate(3);
            best_of(recent)
        }
        Strategy::BoA => best_of(records.iter().collect()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum RegHeader {
    None,
    Ewc { lambda: f64, consolidations: u32 },
    Si { alpha: f64, xi: f64, consolidations: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    len: usize,
}

/// Metadata block at the front of every snapshot file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotHeader {
    pub format_version: u32,
    pub batch_index: usize,
    pub dev_wer: f64,
    pub created_at: u64,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub mlp: MlpConfig,
    reg: RegHeader,
    arrays: Vec<ArrayEntry>,
    pub payload_sha256: String,
}

/// A decoded snapshot: metadata plus the restored model and regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub header: SnapshotHeader,
    pub network: Network,
    pub reg_state: RegState,
}

/// Identity of the run a store belongs to; copied into every header.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

fn reg_arrays(reg: &RegState) -> (RegHeader, Vec<(&'static str, &ParamVector)>) {
    match reg {
        RegState::None => (RegHeader::None, Vec::new()),
        RegState::Ewc(s) => (
            RegHeader::Ewc {
                lambda: s.lambda,
                consolidations: s.consolidations,
            },
            vec![("ewc.theta_star", &s.theta_star), ("ewc.fisher_diag", &s.fisher_diag)],
        ),
        RegState::Si(s) => (
            RegHeader::Si {
                alpha: s.alpha,
                xi: s.xi,
                consolidations: s.consolidations,
            },
            vec![
                ("si.omega_running", &s.omega_running),
                ("si.big_omega", &s.big_omega),
                ("si.theta_anchor", &s.theta_anchor),
                ("si.theta_task_start", &s.theta_task_start),
            ],
        ),
    }
}

impl Snapshot {
    pub fn new(
        network: Network,
        reg_state: RegState,
        batch_index: usize,
        dev_wer: f64,
        created_at: u64,
        provenance: &Provenance,
    ) -> Snapshot {
        let (reg, _) = reg_arrays(&reg_state);
        let header = SnapshotHeader {
            format_version: SNAPSHOT_VERSION,
            batch_index,
            dev_wer,
            created_at,
            method: reg_state.method(),
            seed: provenance.seed,
            config_hash: provenance.config_hash.clone(),
            mlp: network.config().clone(),
            reg,
            arrays: Vec::new(),
            payload_sha256: String::new(),
        };
        Snapshot {
            header,
            network,
            reg_state,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let (reg, arrays) = reg_arrays(&self.reg_state);
        let mut all: Vec<(&str, &ParamVector)> = vec![("params", self.network.params())];
        all.extend(arrays);
        let mut payload = Vec::with_capacity(all.iter().map(|(_, v)| v.len() * 8).sum());
        for (_, v) in &all {
            for x in v.values() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut header = self.header.clone();
        header.format_version = SNAPSHOT_VERSION;
        header.method = self.reg_state.method();
        header.mlp = self.network.config().clone();
        header.reg = reg;
        header.arrays = all
            .iter()
            .map(|(n, v)| ArrayEntry {
                name: (*n).to_string(),
                len: v.len(),
            })
            .collect();
        header.payload_sha256 = hex::encode(Sha256::digest(&payload));
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("snapshot header encoding: {e}")))?;
        let len = u32::try_from(json.len())
            .map_err(|_| Error::Format("snapshot header too large".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(&SNAPSHOT_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Snapshot> {
        let corrupt = |msg: String| Error::Format(format!("corrupt snapshot: {msg}"));
        if bytes.len() < 12 || bytes[..8] != SNAPSHOT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(corrupt("truncated header".into()));
        }
        let header: SnapshotHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.format_version != SNAPSHOT_VERSION {
            return Err(corrupt(format!("unsupported version {}", header.format_version)));
        }
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch".into()));
        }
        let expected: Vec<&str> = match header.reg {
            RegHeader::None => vec!["params"],
            RegHeader::Ewc { .. } => vec!["params", "ewc.theta_star", "ewc.fisher_diag"],
            RegHeader::Si { .. } => vec![
                "params",
                "si.omega_running",
                "si.big_omega",
                "si.theta_anchor",
                "si.theta_task_start",
            ],
        };
        let names: Vec<&str> = header.arrays.iter().map(|a| a.name.as_str()).collect();
        if names != expected {
            return Err(corrupt(format!("unexpected arrays {names:?}")));
        }
        let layout = Layout::for_layers(&header.mlp.layer_sizes);
        let total: usize = header.arrays.iter().map(|a| a.len).sum();
        if header.arrays.iter().any(|a| a.len != layout.len()) || payload.len() != total * 8 {
            return Err(corrupt("array sizes disagree with the model layout".into()));
        }
        let mut vectors = payload
            .chunks_exact(layout.len() * 8)
            .map(|chunk| {
                let values = chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                ParamVector::new(values, layout.clone())
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let mut next = || vectors.next().expect("count checked above");
        let network = Network::from_params(header.mlp.clone(), next())?;
        let reg_state = match header.reg {
            RegHeader::None => RegState::None,
            RegHeader::Ewc {
                lambda,
                consolidations,
            } => {
                let mut s = EwcState::new(next(), next(), lambda)?;
                s.consolidations = consolidations;
                RegState::Ewc(s)
            }
            RegHeader::Si {
                alpha,
                xi,
                consolidations,
            } => RegState::Si(SiState {
                omega_running: next(),
                big_omega: next(),
                theta_anchor: next(),
                theta_task_start: next(),
                alpha,
                xi,
                consolidations,
            }),
        };
        Ok(Snapshot {
            header,
            network,
            reg_state,
        })
    }

    pub fn read(path: &Path) -> Result<Snapshot> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Snapshot::decode(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::io(path, io::Error::new(io::ErrorKind::InvalidData, msg)),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    format_version: u32,
    policy: CapacityPolicy,
    provenance: Provenance,
    next_created_at: u64,
    records: Vec<SnapshotRecord>,
    evicted: Vec<SnapshotRecord>,
}

/// On-disk store of snapshots for one run. Single writer.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotStore {
    dir: PathBuf,
    index: IndexFile,
}

impl SnapshotStore {
    /// Start an empty store under `<run_dir>/snapshots`. Fails if one already exists.
    pub fn create(run_dir: &Path, policy: CapacityPolicy, provenance: Provenance) -> Result<SnapshotStore> {
        if policy == CapacityPolicy::Window(0) {
            return Err(Error::Config("snapshot window must hold at least one record".into()));
        }
        let dir = run_dir.join(SNAPSHOT_DIR);
        if dir.join(INDEX_FILE).exists() {
            return Err(Error::State(format!("snapshot store already exists at {}", dir.display())));
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let store = SnapshotStore {
            dir,
            index: IndexFile {
                format_version: INDEX_VERSION,
                policy,
                provenance,
                next_created_at: 0,
                records: Vec::new(),
                evicted: Vec::new(),
            },
        };
        store.write_index()?;
        Ok(store)
    }

    pub fn open(run_dir: &Path) -> Result<SnapshotStore> {
        let dir = run_dir.join(SNAPSHOT_DIR);
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: IndexFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if index.format_version != INDEX_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported index version {}",
                path.display(),
                index.format_version
            )));
        }
        Ok(SnapshotStore { dir, index })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn policy(&self) -> CapacityPolicy {
        self.index.policy
    }

    /// Retained records, oldest first.
    pub fn records(&self) -> &[SnapshotRecord] {
        &self.index.records
    }

    pub fn evicted(&self) -> &[SnapshotRecord] {
        &self.index.evicted
    }

    pub fn path_of(&self, record: &SnapshotRecord) -> PathBuf {
        self.dir.join(&record.payload_path)
    }

    fn write_index(&self) -> Result<()> {
        let path = self.dir.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(&self.index)
            .map_err(|e| Error::Format(format!("snapshot index encoding: {e}")))?;
        write_atomic(&path, (json + "\n").as_bytes())
    }

    /// Persist `net` and `reg_state` as the snapshot for `batch_index`, then evict per policy.
    pub fn record_snapshot(
        &mut self,
        net: &Network,
        reg_state: &RegState,
        batch_index: usize,
        dev_wer: f64,
    ) -> Result<SnapshotRecord> {
        if !dev_wer.is_finite() {
            return Err(Error::numerical(
                format!("snapshot for batch {batch_index}"),
                format!("dev WER is {dev_wer}"),
            ));
        }
        let taken = self
            .index
            .records
            .iter()
            .chain(&self.index.evicted)
            .any(|r| r.batch_index == batch_index);
        if taken {
            return Err(Error::State(format!("batch {batch_index} already has a snapshot")));
        }
        let created_at = self.index.next_created_at;
        let snap = Snapshot::new(
            net.clone(),
            reg_state.clone(),
            batch_index,
            dev_wer,
            created_at,
            &self.index.provenance,
        );
        let name = format!("batch_{batch_index}.snap");
        write_atomic(&self.dir.join(&name), &snap.encode()?)?;
        let record = SnapshotRecord {
            batch_index,
            dev_wer,
            created_at,
            payload_path: name,
            method: reg_state.method(),
            reg_state_included: !matches!(reg_state, RegState::None),
        };
        self.index.next_created_at += 1;
        self.index.records.push(record.clone());
        if let CapacityPolicy::Window(k) = self.index.policy {
            while self.index.records.len() > k {
                let old = self.index.records.remove(0);
                let path = self.path_of(&old);
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                self.index.evicted.push(old);
            }
        }
        self.write_index()?;
        Ok(record)
    }

    pub fn select(&self, strategy: Strategy) -> Result<&SnapshotRecord> {
        select(&self.index.records, strategy)
    }

    /// Restore the network and regularizer state stored for `record`.
    pub fn continue_from(&self, record: &SnapshotRecord) -> Result<(Network, RegState)> {
        let path = self.path_of(record);
        if self.index.evicted.iter().any(|r| r.batch_index == record.batch_index) {
            return Err(Error::io(
                path,
                io::Error::new(
                    io::ErrorKind::NotFound,
                    format!("snapshot for batch {} was evicted", record.batch_index),
                ),
            ));
        }
        let snap = Snapshot::read(&path)?;
        if snap.header.batch_index != record.batch_index {
            return Err(Error::io(
                path,
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!(
                        "file holds batch {} but the record names batch {}",
                        snap.header.batch_index, record.batch_index
                    ),
                ),
            ));
        }
        Ok((snap.network, snap.reg_state))
    }

    /// Plain-text table of every record, retained and evicted, by batch.
    pub fn listing(&self) -> String {
        let mut rows: Vec<(&SnapshotRecord, &str)> = self
            .index
            .records
            .iter()
            .map(|r| (r, "retained"))
            .chain(self.index.evicted.iter().map(|r| (r, "evicted")))
            .collect();
        rows.sort_by_key(|(r, _)| r.batch_index);
        let mut out = format!("{:>5}  {:<6}  {:>9}  {}\n", "batch", "method", "dev_wer", "status");
        for (r, status) in rows {
            out.push_str(&format!(
                "{:>5}  {:<6}  {:>8.2}%  {}\n",
                r.batch_index,
                r.method.as_str(),
                100.0 * r.dev_wer,
                status
            ));
        }
        out
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(batch_index: usize, dev_wer: f64) -> SnapshotRecord {
        SnapshotRecord {
            batch_index,
            dev_wer,
            created_at: batch_index as u64,
            payload_path: format!("batch_{batch_index}.snap"),
            method: Method::Ewc,
            reg_state_included: true,
        }
    }

    #[test]
    fn rw3_picks_lowest_of_window() {
        let rs = [rec(4, 0.1979), rec(5, 0.2107), rec(6, 0.1873)];
        assert_eq!(select(&rs, Strategy::Rw3).unwrap().batch_index, 6);
    }

    #[test]
    fn ns_ignores_wer() {
        let rs = [rec(1, 0.1875), rec(2, 0.30)];
        assert_eq!(select(&rs, Strategy::Ns).unwrap().batch_index, 2);
    }

    #[test]
    fn boa_picks_global_minimum() {
        let rs = [rec(1, 0.1857), rec(2, 0.1872), rec(3, 0.1979)];
        assert_eq!(select(&rs, Strategy::BoA).unwrap().batch_index, 1);
    }

    #[test]
    fn rw3_only_looks_at_three_most_recent() {
        let rs = [rec(1, 0.01), rec(2, 0.5), rec(3, 0.4), rec(4, 0.45)];
        assert_eq!(select(&rs, Strategy::Rw3).unwrap().batch_index, 3);
        assert_eq!(select(&rs, Strategy::BoA).unwrap().batch_index, 1);
    }

    #[test]
    fn ties_go_to_recent() {
        let rs = [rec(1, 0.2), rec(2, 0.2), rec(3, 0.3)];
        assert_eq!(select(&rs, Strategy::BoA).unwrap().batch_index, 2);
        assert_eq!(select(&rs, Strategy::Rw3).unwrap().batch_index, 2);
    }

    #[test]
    fn empty_store_is_a_state_error() {
        assert!(matches!(select(&[], Strategy::Ns), Err(Error::State(_))));
    }

    #[test]
    fn strategy_policies_and_parsing() {
        assert_eq!(Strategy::Ns.capacity(), CapacityPolicy::Window(1));
        assert_eq!(Strategy::Rw3.capacity(), CapacityPolicy::Window(3));
        assert_eq!(Strategy::BoA.capacity(), CapacityPolicy::Unbounded);
        assert_eq!("boa".parse::<Strategy>().unwrap(), Strategy::BoA);
        assert_eq!("RW3".parse::<Strategy>().unwrap(), Strategy::Rw3);
        assert!("best".parse::<Strategy>().is_err());
    }
}
