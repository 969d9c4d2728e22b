//! File-backed records for the registration center, server memories and cards.
//!
//! All three are versioned JSON documents with lowercase-hex byte fields.
//! Writes go to a temporary file in the target directory followed by an
//! atomic rename, so readers only ever see whole snapshots.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Digest256, IdField, LocField, RcKey, Timestamp32};
use crate::protocol::{RcState, ServerRecord, SmartCard, TamperResistantMemory, SERVER_ENTRY_LEN};

pub const FORMAT_VERSION: u32 = 1;

pub const RC_EXT: &str = ".rcdb.json";
pub const CARD_EXT: &str = ".card.json";
pub const TRM_EXT: &str = ".trm.json";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record in {path}: {reason}")]
    CorruptRecord { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, RegistryError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerRow {
    pub id: IdField,
    pub ssk: Digest256,
    pub q: Digest256,
    pub loc: LocField,
    pub srt: Timestamp32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRow {
    pub uid: Digest256,
    pub c: Digest256,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RcDatabaseFile {
    pub version: u32,
    pub k_rc: RcKey,
    pub servers: Vec<ServerRow>,
    /// Registration order; sync markers index into this list.
    pub users: Vec<UserRow>,
    pub sync_markers: BTreeMap<IdField, u64>,
}

impl From<&RcState> for RcDatabaseFile {
    fn from(rc: &RcState) -> Self {
        RcDatabaseFile {
            version: FORMAT_VERSION,
            k_rc: *rc.k_rc(),
            servers: rc
                .servers()
                .map(|(id, r)| ServerRow {
                    id: *id,
                    ssk: r.ssk,
                    q: r.q,
                    loc: r.loc,
                    srt: r.srt,
                })
                .collect(),
            users: rc.users().map(|(uid, c)| UserRow { uid: *uid, c: *c }).collect(),
            sync_markers: rc.servers().map(|(id, r)| (*id, r.synced as u64)).collect(),
        }
    }
}

impl RcDatabaseFile {
    pub fn into_state(self) -> std::result::Result<RcState, String> {
        check_version(self.version)?;
        let mut markers = self.sync_markers;
        let servers = self
            .servers
            .into_iter()
            .map(|row| {
                let synced = markers
                    .remove(&row.id)
                    .ok_or_else(|| format!("missing sync marker for {}", row.id))?;
                Ok((
                    row.id,
                    ServerRecord {
                        ssk: row.ssk,
                        q: row.q,
                        loc: row.loc,
                        srt: row.srt,
                        synced: synced as usize,
                    },
                ))
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        if let Some(id) = markers.keys().next() {
            return Err(format!("sync marker for unknown server {id}"));
        }
        let users = self.users.into_iter().map(|u| (u.uid, u.c)).collect();
        RcState::from_parts(self.k_rc, servers, users)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardFile {
    pub version: u32,
    #[serde(flatten)]
    pub card: SmartCard,
}

/// A server's provisioned memory plus the public identity it serves under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrmFile {
    pub version: u32,
    pub id: IdField,
    pub loc: LocField,
    pub ssk: Digest256,
    pub p: Digest256,
    pub list_uid: Vec<Digest256>,
    pub list_c: Vec<UserRow>,
}

/// Server-side state as persisted: identity plus tamper-resistant memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerState {
    pub id: IdField,
    pub loc: LocField,
    pub trm: TamperResistantMemory,
}

impl From<&ServerState> for TrmFile {
    fn from(s: &ServerState) -> Self {
        TrmFile {
            version: FORMAT_VERSION,
            id: s.id,
            loc: s.loc,
            ssk: s.trm.ssk,
            p: s.trm.p,
            list_uid: s.trm.list_uid.iter().copied().collect(),
            list_c: s
                .trm
                .list_c
                .iter()
                .map(|(uid, c)| UserRow { uid: *uid, c: *c })
                .collect(),
        }
    }
}

impl TrmFile {
    pub fn into_state(self) -> std::result::Result<ServerState, String> {
        check_version(self.version)?;
        let mut list_uid = BTreeSet::new();
        for uid in self.list_uid {
            if !list_uid.insert(uid) {
                return Err(format!("duplicate uid {uid} in list_uid"));
            }
        }
        let mut list_c = BTreeMap::new();
        for row in self.list_c {
            if list_c.insert(row.uid, row.c).is_some() {
                return Err(format!("duplicate uid {} in list_c", row.uid));
            }
        }
        let trm = TamperResistantMemory {
            ssk: self.ssk,
            p: self.p,
            list_uid,
            list_c,
        };
        if !trm.lists_consistent() {
            return Err("list_uid and list_c disagree".into());
        }
        Ok(ServerState {
            id: self.id,
            loc: self.loc,
            trm,
        })
    }
}

fn check_version(v: u32) -> std::result::Result<(), String> {
    if v == FORMAT_VERSION {
        Ok(())
    } else {
        Err(format!("unsupported format version {v} (expected {FORMAT_VERSION})"))
    }
}

fn validate_card(card: &SmartCard) -> std::result::Result<(), String> {
    if card.z.is_empty() || !card.z.len().is_multiple_of(SERVER_ENTRY_LEN) {
        return Err(format!(
            "z is {} bytes, expected a positive multiple of {SERVER_ENTRY_LEN}",
            card.z.len()
        ));
    }
    Ok(())
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn write_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let io = |source| RegistryError::Io {
        path: display(path),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    let json = serde_json::to_vec_pretty(value).expect("records always serialize");
    tmp.write_all(&json).map_err(io)?;
    tmp.write_all(b"\n").map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|source| RegistryError::Io {
        path: display(path),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| RegistryError::CorruptRecord {
        path: display(path),
        reason: e.to_string(),
    })
}

fn corrupt(path: &Path) -> impl FnOnce(String) -> RegistryError + '_ {
    move |reason| RegistryError::CorruptRecord {
        path: display(path),
        reason,
    }
}

pub fn store_rc(path: impl AsRef<Path>, rc: &RcState) -> Result<()> {
    write_atomic(path.as_ref(), &RcDatabaseFile::from(rc))
}

pub fn load_rc(path: impl AsRef<Path>) -> Result<RcState> {
    let path = path.as_ref();
    let file: RcDatabaseFile = read_json(path)?;
    file.into_state().map_err(corrupt(path))
}

pub fn store_card(path: impl AsRef<Path>, card: &SmartCard) -> Result<()> {
    write_atomic(
        path.as_ref(),
        &CardFile {
            version: FORMAT_VERSION,
            card: card.clone(),
        },
    )
}

pub fn load_card(path: impl AsRef<Path>) -> Result<SmartCard> {
    let path = path.as_ref();
    let file: CardFile = read_json(path)?;
    check_version(file.version).map_err(corrupt(path))?;
    validate_card(&file.card).map_err(corrupt(path))?;
    Ok(file.card)
}

pub fn store_trm(path: impl AsRef<Path>, state: &ServerState) -> Result<()> {
    write_atomic(path.as_ref(), &TrmFile::from(state))
}

pub fn load_trm(path: impl AsRef<Path>) -> Result<ServerState> {
    let path = path.as_ref();
    let file: TrmFile = read_json(path)?;
    file.into_state().map_err(corrupt(path))
}
