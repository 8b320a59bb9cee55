//! Append-only label store: one JSON record per line, later records for a
//! patch supersede earlier ones.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use terrain_core::retrieval::LabeledQuery;

pub const EXPORT_HEADER: &str = "patch_id\tclass_id\ttaxonomy_code";

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("label export line {line}: {reason}")]
    Export { line: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub patch_id: String,
    pub class_id: Option<u32>,
    /// Canonical taxonomy code.
    pub taxonomy_code: String,
    pub free_text: Option<String>,
    pub annotator: String,
    /// UTC seconds.
    pub timestamp: u64,
}

/// Immutable view of every record read so far.
#[derive(Clone, Debug, Default)]
pub struct LabelSnapshot {
    records: Vec<LabelRecord>,
    latest: HashMap<String, usize>,
}

impl LabelSnapshot {
    fn push(&mut self, record: LabelRecord) {
        self.latest.insert(record.patch_id.clone(), self.records.len());
        self.records.push(record);
    }

    /// Number of stored records, superseded ones included.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn latest(&self, patch_id: &str) -> Option<&LabelRecord> {
        self.latest.get(patch_id).map(|&i| &self.records[i])
    }

    /// Every record for a patch, oldest first.
    pub fn history(&self, patch_id: &str) -> Vec<&LabelRecord> {
        self.records.iter().filter(|r| r.patch_id == patch_id).collect()
    }

    /// Current record of every labelled patch, by patch id.
    pub fn current(&self) -> Vec<&LabelRecord> {
        let mut out: Vec<&LabelRecord> = self.latest.values().map(|&i| &self.records[i]).collect();
        out.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        out
    }

    /// `patch_id<TAB>class_id<TAB>taxonomy_code` with supersession applied;
    /// an unknown class is an empty field.
    pub fn export_tsv(&self) -> String {
        let mut out = format!("{EXPORT_HEADER}\n");
        for r in self.current() {
            let class = r.class_id.map(|c| c.to_string()).unwrap_or_default();
            out.push_str(&format!("{}\t{class}\t{}\n", r.patch_id, r.taxonomy_code));
        }
        out
    }
}

/// A row of the label export.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportRow {
    pub patch_id: String,
    pub class_id: Option<u32>,
    pub taxonomy_code: String,
}

pub fn parse_export(text: &str) -> Result<Vec<ExportRow>, LabelError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == EXPORT_HEADER => {}
        _ => return Err(LabelError::Export { line: 1, reason: format!("expected header {EXPORT_HEADER:?}") }),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| LabelError::Export { line: n + 1, reason: reason.into() };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad("expected three tab-separated fields"));
        }
        let class_id = match f[1] {
            "" => None,
            c => Some(c.parse().map_err(|_| bad("bad class id"))?),
        };
        out.push(ExportRow { patch_id: f[0].into(), class_id, taxonomy_code: f[2].into() });
    }
    Ok(out)
}

/// Queries and the label map for evaluation, from rows with a class id.
pub fn labeled_queries(rows: &[ExportRow]) -> (Vec<LabeledQuery>, HashMap<String, u32>) {
    let queries: Vec<LabeledQuery> = rows
        .iter()
        .filter_map(|r| r.class_id.map(|class_id| LabeledQuery { patch_id: r.patch_id.clone(), class_id }))
        .collect();
    let labels = queries.iter().map(|q| (q.patch_id.clone(), q.class_id)).collect();
    (queries, labels)
}

/// Durable store: a single writer appends and fsyncs, readers take the
/// current snapshot.
pub struct LabelStore {
    path: PathBuf,
    writer: Mutex<File>,
    snapshot: RwLock<Arc<LabelSnapshot>>,
}

impl LabelStore {
    /// Opens or creates the store. A trailing partial line left by an
    /// interrupted, unacknowledged write is dropped.
    pub fn open(path: &Path) -> Result<Self, LabelError> {
        let io = |source| LabelError::Io { path: path.to_path_buf(), source };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io(e)),
        };
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            log::warn!("{}: dropping partial trailing record", path.display());
        }
        let mut snapshot = LabelSnapshot::default();
        for (n, line) in text[..complete].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: LabelRecord = serde_json::from_str(line).map_err(|e| LabelError::Corrupt {
                path: path.to_path_buf(),
                line: n + 1,
                reason: e.to_string(),
            })?;
            snapshot.push(record);
        }
        let file = File::options().create(true).append(true).open(path).map_err(io)?;
        if complete < text.len() {
            file.set_len(complete as u64).map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            writer: Mutex::new(file),
            snapshot: RwLock::new(Arc::new(snapshot)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn snapshot(&self) -> Arc<LabelSnapshot> {
        self.snapshot.read().expect("label snapshot lock").clone()
    }

    /// Appends a record and returns once it is on disk.
    pub fn append(&self, record: LabelRecord) -> Result<(), LabelError> {
        let mut line = serde_json::to_string(&record).expect("label records serialize");
        line.push('\n');
        let mut file = self.writer.lock().expect("label writer lock");
        let io = |source| LabelError::Io { path: self.path.clone(), source };
        file.write_all(line.as_bytes()).map_err(io)?;
        file.sync_data().map_err(io)?;
        let mut snap = self.snapshot.write().expect("label snapshot lock");
        Arc::make_mut(&mut snap).push(record);
        Ok(())
    }
}
