//! Production data: a file tree with Unix-style permissions plus simple
//! tables, and the copy-on-write overlay that test runs read through.
//!
//! The lower [`DataState`] is shared read-only (behind an `Arc`); each
//! [`OverlayStore`] keeps its own upper layer. Reads resolve upper-first,
//! a whiteout hides the lower entry, and writes only ever touch the upper
//! layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acdl::Decision;
use crate::reqgen::Subject;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PathError {
    #[error("empty path")]
    Empty,
    #[error("path {0:?} escapes the root")]
    EscapesRoot(String),
    #[error("path {0:?} contains a NUL byte")]
    Nul(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("invalid permissions {0:?}")]
    InvalidPerms(String),
    #[error(transparent)]
    Path(#[from] PathError),
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
    #[error("{path}: table rows must be flat JSON objects")]
    NotFlat { path: PathBuf },
}

/// Normalizes an object path: leading `/`, single separators, `.` dropped
/// and `..` resolved. Paths that climb above the root are rejected.
pub fn normalize_path(path: &str) -> Result<String, PathError> {
    if path.is_empty() {
        return Err(PathError::Empty);
    }
    if path.contains('\0') {
        return Err(PathError::Nul(path.to_string()));
    }
    let mut parts: Vec<&str> = Vec::new();
    for seg in path.split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                if parts.pop().is_none() {
                    return Err(PathError::EscapesRoot(path.to_string()));
                }
            }
            s => parts.push(s),
        }
    }
    Ok(format!("/{}", parts.join("/")))
}

/// Nine permission bits, `rwxrwxrwx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Perms(u16);

impl Perms {
    pub fn new(bits: u16) -> Option<Self> {
        (bits <= 0o777).then_some(Perms(bits))
    }

    pub fn bits(self) -> u16 {
        self.0
    }
}

impl FromStr for Perms {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u16::from_str_radix(s.trim_start_matches("0o"), 8)
            .ok()
            .and_then(Perms::new)
            .ok_or_else(|| DataError::InvalidPerms(s.to_string()))
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04o}", self.0)
    }
}

impl Serialize for Perms {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Perms {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Need {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub owner: String,
    pub group: String,
    pub perms: Perms,
    #[serde(default)]
    pub size: u64,
    #[serde(default)]
    pub digest: String,
}

impl FileEntry {
    pub fn new(owner: &str, group: &str, perms: u16, size: u64) -> Self {
        FileEntry {
            owner: owner.to_string(),
            group: group.to_string(),
            perms: Perms::new(perms).expect("permission bits out of range"),
            size,
            digest: String::new(),
        }
    }

    /// Whether `subject` holds `need` on this entry under owner/group/other
    /// classification. Anonymous subjects are always "other".
    pub fn permits(&self, subject: &Subject, need: Need) -> bool {
        let shift = if subject.name() == Some(self.owner.as_str()) {
            6
        } else if subject.in_group(&self.group) {
            3
        } else {
            0
        };
        let bit = match need {
            Need::Read => 0o4,
            Need::Write => 0o2,
        };
        (self.perms.bits() >> shift) & bit != 0
    }
}

pub type Row = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataState {
    pub files: BTreeMap<String, FileEntry>,
    pub tables: BTreeMap<String, Vec<Row>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    path: String,
    #[serde(flatten)]
    entry: FileEntry,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    files: Vec<ManifestFile>,
    #[serde(default)]
    tables: BTreeMap<String, PathBuf>,
}

impl DataState {
    pub fn insert_file(&mut self, path: &str, entry: FileEntry) -> Result<(), PathError> {
        self.files.insert(normalize_path(path)?, entry);
        Ok(())
    }

    /// SHA-256 over a canonical serialization of every file and table.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("data state serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Loads a snapshot manifest: a JSON object with a `files` list of
    /// `{path, owner, group, perms, size, digest}` and a `tables` map from
    /// table name to a JSON file (relative to the manifest) holding an
    /// array of flat objects.
    pub fn load_manifest(path: &Path) -> Result<Self, DataError> {
        let text = read(path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut state = DataState::default();
        for f in manifest.files {
            state.insert_file(&f.path, f.entry)?;
        }
        for (name, rel) in manifest.tables {
            let tpath = base.join(rel);
            let rows: Vec<serde_json::Value> =
                serde_json::from_str(&read(&tpath)?).map_err(|source| DataError::Json {
                    path: tpath.clone(),
                    source,
                })?;
            let mut table = Vec::with_capacity(rows.len());
            for row in rows {
                let serde_json::Value::Object(obj) = row else {
                    return Err(DataError::NotFlat { path: tpath });
                };
                if obj.values().any(|v| v.is_object() || v.is_array()) {
                    return Err(DataError::NotFlat { path: tpath });
                }
                table.push(obj.into_iter().collect());
            }
            state.tables.insert(name, table);
        }
        Ok(state)
    }

    /// Writes the manifest plus one `tables/<name>.json` file per table.
    pub fn save_manifest(&self, path: &Path) -> Result<(), DataError> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut tables = BTreeMap::new();
        for (name, rows) in &self.tables {
            let rel = PathBuf::from("tables").join(format!("{name}.json"));
            let full = base.join(&rel);
            if let Some(dir) = full.parent() {
                fs::create_dir_all(dir).map_err(|source| DataError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            write(&full, &serde_json::to_string_pretty(rows).expect("rows serialize"))?;
            tables.insert(name.clone(), rel);
        }
        let manifest = Manifest {
            files: self
                .files
                .iter()
                .map(|(p, e)| ManifestFile {
                    path: p.clone(),
                    entry: e.clone(),
                })
                .collect(),
            tables,
        };
        write(path, &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), DataError> {
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpperEntry {
    File(FileEntry),
    Whiteout,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableDelta {
    /// Replaces the lower rows entirely when set.
    pub overwrite: Option<Vec<Row>>,
    pub appended: Vec<Row>,
}

/// Copy-on-write view over a shared, immutable [`DataState`].
///
/// All methods take `&self`; the upper layer is internally locked so one
/// overlay can back many concurrent interpreter runs.
#[derive(Debug)]
pub struct OverlayStore {
    lower: Arc<DataState>,
    upper: RwLock<BTreeMap<String, UpperEntry>>,
    upper_tables: RwLock<BTreeMap<String, TableDelta>>,
}

impl OverlayStore {
    pub fn new(lower: Arc<DataState>) -> Self {
        OverlayStore {
            lower,
            upper: RwLock::default(),
            upper_tables: RwLock::default(),
        }
    }

    pub fn lower(&self) -> &Arc<DataState> {
        &self.lower
    }

    fn upper_read(&self) -> RwLockReadGuard<'_, BTreeMap<String, UpperEntry>> {
        self.upper.read().expect("overlay lock poisoned")
    }

    fn upper_write(&self) -> RwLockWriteGuard<'_, BTreeMap<String, UpperEntry>> {
        self.upper.write().expect("overlay lock poisoned")
    }

    pub fn read(&self, path: &str) -> Option<FileEntry> {
        match self.upper_read().get(path) {
            Some(UpperEntry::File(e)) => Some(e.clone()),
            Some(UpperEntry::Whiteout) => None,
            None => self.lower.files.get(path).cloned(),
        }
    }

    pub fn exists(&self, path: &str) -> bool {
        match self.upper_read().get(path) {
            Some(UpperEntry::File(_)) => true,
            Some(UpperEntry::Whiteout) => false,
            None => self.lower.files.contains_key(path),
        }
    }

    pub fn write(&self, path: &str, entry: FileEntry) {
        self.upper_write()
            .insert(path.to_string(), UpperEntry::File(entry));
    }

    /// Hides `path` from readers; the lower layer keeps it.
    pub fn remove(&self, path: &str) {
        self.upper_write()
            .insert(path.to_string(), UpperEntry::Whiteout);
    }

    pub fn reset(&self) {
        self.upper_write().clear();
        self.upper_tables
            .write()
            .expect("overlay lock poisoned")
            .clear();
    }

    pub fn is_pristine(&self) -> bool {
        self.upper_read().is_empty()
            && self
                .upper_tables
                .read()
                .expect("overlay lock poisoned")
                .is_empty()
    }

    /// Visible files at or below `root`, sorted.
    pub fn list(&self, root: &str) -> Vec<String> {
        let upper = self.upper_read();
        let mut out: BTreeSet<&str> = self
            .lower
            .files
            .keys()
            .filter(|p| crate::acdl::path_has_prefix(p, root))
            .filter(|p| !matches!(upper.get(*p), Some(UpperEntry::Whiteout)))
            .map(String::as_str)
            .collect();
        for (p, e) in upper.iter() {
            if matches!(e, UpperEntry::File(_)) && crate::acdl::path_has_prefix(p, root) {
                out.insert(p);
            }
        }
        out.into_iter().map(str::to_string).collect()
    }

    pub fn table_query(
        &self,
        table: &str,
        predicate: impl Fn(&Row) -> bool,
    ) -> Result<Vec<Row>, DataError> {
        let deltas = self.upper_tables.read().expect("overlay lock poisoned");
        let delta = deltas.get(table);
        let base: &[Row] = match (delta.and_then(|d| d.overwrite.as_deref()), self.lower.tables.get(table)) {
            (Some(rows), _) => rows,
            (None, Some(rows)) => rows,
            (None, None) if delta.is_some() => &[],
            (None, None) => return Err(DataError::UnknownTable(table.to_string())),
        };
        let appended = delta.map_or(&[][..], |d| d.appended.as_slice());
        Ok(base
            .iter()
            .chain(appended)
            .filter(|r| predicate(r))
            .cloned()
            .collect())
    }

    pub fn table_insert(&self, table: &str, row: Row) {
        self.upper_tables
            .write()
            .expect("overlay lock poisoned")
            .entry(table.to_string())
            .or_default()
            .appended
            .push(row);
    }

    pub fn table_overwrite(&self, table: &str, rows: Vec<Row>) {
        let mut deltas = self.upper_tables.write().expect("overlay lock poisoned");
        let d = deltas.entry(table.to_string()).or_default();
        d.overwrite = Some(rows);
        d.appended.clear();
    }
}

pub fn overlay_read(store: &OverlayStore, path: &str) -> Option<FileEntry> {
    store.read(path)
}

pub fn overlay_write(store: &OverlayStore, path: &str, entry: FileEntry) {
    store.write(path, entry)
}

pub fn table_query(
    store: &OverlayStore,
    table: &str,
    predicate: impl Fn(&Row) -> bool,
) -> Result<Vec<Row>, DataError> {
    store.table_query(table, predicate)
}

pub fn reset_overlay(store: &OverlayStore) {
    store.reset()
}

/// ALLOW iff the file exists and the subject's permission class grants
/// `need`. Absent files are denied.
pub fn file_perm_check(store: &OverlayStore, path: &str, subject: &Subject, need: Need) -> Decision {
    Decision::from_bool(store.read(path).is_some_and(|e| e.permits(subject, need)))
}
