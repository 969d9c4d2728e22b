//! State-machine transforms for the five protocol phases.
//!
//! Every message construction and verification is a plain function over its
//! inputs. Mutable state lives only in [`RcState`] and
//! [`TamperResistantMemory`], and is touched only by the `rc_*` operations
//! and by applying a database delta at a server.

mod db_update;
mod login;
mod registration;
mod update;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    keystream_mask, CryptoError, Digest256, Encode, IdField, LocField, Nonce128, PwField, RcKey,
    Timestamp32,
};

pub use db_update::{
    rc_handle_db_update, server_db_update_begin, server_db_update_from_parts, DbUpdateRequest,
    UserListDelta,
};
pub use login::{
    server_handle_login, server_handle_login_cached, user_handle_response, user_login_begin,
    LoginContext, LoginRequest, LoginResponse, ReplayCache, SessionKey, Validity16,
};
pub use registration::{
    rc_register_server, rc_register_user, rc_register_user_with, server_register_begin,
    server_register_begin_with, user_finalize_card, user_register_begin, user_register_begin_with,
    CardProvision, PendingUser, ServerRegRequest, ServerSecrets, UserRegRequest,
};
pub use update::{
    rc_handle_update, user_apply_server_list, user_update_begin, UpdateContext, UpdateRequest,
};

/// Width of one `ID_j || SSK_j || Loc_j` record.
pub const SERVER_ENTRY_LEN: usize = 64;
/// Default lifetime of a session key in seconds.
pub const DEFAULT_VT_SECS: u64 = 900;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error, Serialize, Deserialize)]
pub enum ProtocolError {
    #[error("field too long")]
    FieldTooLong,
    #[error("invalid field encoding")]
    BadField,
    #[error("server id already registered")]
    DuplicateServerId,
    #[error("user id already registered")]
    DuplicateUid,
    #[error("no servers registered")]
    NoServersRegistered,
    #[error("identity, password or card do not match")]
    BadCredentials,
    #[error("unknown server")]
    UnknownServer,
    #[error("unknown user")]
    UnknownUser,
    #[error("request outside the freshness window")]
    StaleRequest,
    #[error("response outside the freshness window")]
    StaleResponse,
    #[error("verification failed")]
    AuthFail,
    #[error("request already seen")]
    Replayed,
    #[error("server list is not a positive multiple of 64 bytes")]
    MalformedList,
}

impl From<CryptoError> for ProtocolError {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::FieldTooLong { .. } => ProtocolError::FieldTooLong,
            _ => ProtocolError::BadField,
        }
    }
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// Freshness and session-key policy shared by the verifying parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPolicy {
    /// Maximum accepted transit age, seconds.
    pub delta_t: u32,
    /// Session key lifetime, seconds.
    pub vt_secs: u64,
    /// Reject a `(β, T1)` pair the server has already answered.
    pub replay_cache: bool,
}

impl Default for SessionPolicy {
    fn default() -> Self {
        SessionPolicy {
            delta_t: 5,
            vt_secs: DEFAULT_VT_SECS,
            replay_cache: false,
        }
    }
}

/// One `ID_j || SSK_j || Loc_j` record of the server list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerListEntry {
    pub id: IdField,
    pub ssk: Digest256,
    pub loc: LocField,
}

impl Encode for ServerListEntry {
    fn encode_into(&self, out: &mut Vec<u8>) {
        self.id.encode_into(out);
        self.ssk.encode_into(out);
        self.loc.encode_into(out);
    }
}

impl ServerListEntry {
    pub fn encode_list(entries: &[ServerListEntry]) -> Vec<u8> {
        let mut out = Vec::with_capacity(entries.len() * SERVER_ENTRY_LEN);
        for e in entries {
            e.encode_into(&mut out);
        }
        out
    }

    pub fn decode_list(bytes: &[u8]) -> Result<Vec<ServerListEntry>> {
        if bytes.is_empty() || !bytes.len().is_multiple_of(SERVER_ENTRY_LEN) {
            return Err(ProtocolError::MalformedList);
        }
        bytes
            .chunks_exact(SERVER_ENTRY_LEN)
            .map(|rec| {
                Ok(ServerListEntry {
                    id: IdField::from_bytes(&rec[..16]).map_err(|_| ProtocolError::MalformedList)?,
                    ssk: Digest256::from_slice(&rec[16..48])?,
                    loc: LocField::from_bytes(&rec[48..]).map_err(|_| ProtocolError::MalformedList)?,
                })
            })
            .collect()
    }
}

/// Server-side store provisioned by the registration center.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperResistantMemory {
    pub ssk: Digest256,
    pub p: Digest256,
    pub list_uid: BTreeSet<Digest256>,
    pub list_c: BTreeMap<Digest256, Digest256>,
}

impl TamperResistantMemory {
    pub fn lookup_c(&self, uid: &Digest256) -> Option<&Digest256> {
        if self.list_uid.contains(uid) {
            self.list_c.get(uid)
        } else {
            None
        }
    }

    pub fn insert_user(&mut self, uid: Digest256, c: Digest256) {
        self.list_uid.insert(uid);
        self.list_c.insert(uid, c);
    }

    pub fn apply_delta(&mut self, delta: &UserListDelta) {
        for (uid, c) in &delta.users {
            self.insert_user(*uid, *c);
        }
    }

    /// `List_UID` and the key set of `List_C` must coincide.
    pub fn lists_consistent(&self) -> bool {
        self.list_uid.len() == self.list_c.len()
            && self.list_c.keys().all(|k| self.list_uid.contains(k))
    }
}

/// The five values held on a user's card.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmartCard {
    pub w: Digest256,
    pub x: Digest256,
    pub y: Digest256,
    /// Server list masked under two user-derived keystreams.
    #[serde(with = "hex_bytes")]
    pub z: Vec<u8>,
    pub e: Digest256,
}

impl SmartCard {
    pub fn storage_bytes(&self) -> usize {
        4 * Digest256::LEN + self.z.len()
    }

    pub fn server_count(&self) -> usize {
        self.z.len() / SERVER_ENTRY_LEN
    }

    pub fn is_well_formed(&self) -> bool {
        !self.z.is_empty() && self.z.len().is_multiple_of(SERVER_ENTRY_LEN)
    }
}

/// Registration center's record of one server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerRecord {
    pub ssk: Digest256,
    pub q: Digest256,
    pub loc: LocField,
    pub srt: Timestamp32,
    /// Number of users in the RC log this server has received.
    pub synced: usize,
}

/// Registration center state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RcState {
    pub(crate) k_rc: RcKey,
    pub(crate) servers: BTreeMap<IdField, ServerRecord>,
    /// UID → C_i in registration order.
    pub(crate) users: IndexMap<Digest256, Digest256>,
}

impl RcState {
    pub fn new(k_rc: RcKey) -> Self {
        RcState {
            k_rc,
            servers: BTreeMap::new(),
            users: IndexMap::new(),
        }
    }

    pub fn random(rng: &mut impl rand::RngCore) -> Self {
        Self::new(RcKey::random(rng))
    }

    /// Rebuilds a state from stored parts, checking uniqueness and markers.
    pub fn from_parts(
        k_rc: RcKey,
        servers: Vec<(IdField, ServerRecord)>,
        users: Vec<(Digest256, Digest256)>,
    ) -> std::result::Result<Self, String> {
        let mut state = RcState::new(k_rc);
        for (id, rec) in servers {
            if rec.synced > users.len() {
                return Err(format!("sync marker for {id} exceeds user count"));
            }
            if state.servers.insert(id, rec).is_some() {
                return Err(format!("duplicate server id {id}"));
            }
        }
        for (uid, c) in users {
            if state.users.insert(uid, c).is_some() {
                return Err(format!("duplicate uid {uid}"));
            }
        }
        Ok(state)
    }

    pub fn k_rc(&self) -> &RcKey {
        &self.k_rc
    }

    pub fn servers(&self) -> impl Iterator<Item = (&IdField, &ServerRecord)> {
        self.servers.iter()
    }

    pub fn server(&self, id: &IdField) -> Option<&ServerRecord> {
        self.servers.get(id)
    }

    pub fn users(&self) -> impl Iterator<Item = (&Digest256, &Digest256)> {
        self.users.iter()
    }

    pub fn user_c(&self, uid: &Digest256) -> Option<&Digest256> {
        self.users.get(uid)
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    /// Current `List_S_j` in server-id order.
    pub fn server_list(&self) -> Vec<ServerListEntry> {
        self.servers
            .iter()
            .map(|(id, r)| ServerListEntry {
                id: *id,
                ssk: r.ssk,
                loc: r.loc,
            })
            .collect()
    }

    pub fn server_list_bytes(&self) -> Vec<u8> {
        ServerListEntry::encode_list(&self.server_list())
    }
}

/// Values a user re-derives from card, identity and password.
#[derive(Clone)]
pub(crate) struct UnlockedCard {
    pub r1: Nonce128,
    pub r2: Nonce128,
    pub uid: Digest256,
}

/// Step shared by login and card update: recover the nonces, re-derive
/// `USK`, `UID` and check `E`.
pub(crate) fn unlock_card(id: &IdField, pw: &PwField, card: &SmartCard) -> Result<UnlockedCard> {
    use crate::crypto::hash_fields;
    if !card.is_well_formed() {
        return Err(ProtocolError::MalformedList);
    }
    let a = hash_fields(&[id, pw]);
    let (r1, r2) = (card.w ^ a).split_nonces();
    let b = hash_fields(&[&r1, pw]) ^ hash_fields(&[&r2, pw]);
    // h(ID||PW) evaluated again for USK; the login budget counts both.
    let usk = hash_fields(&[id, pw]) ^ card.y ^ b;
    let uid = hash_fields(&[&r1, id, &r2]);
    let e = hash_fields(&[&uid, pw, &usk]);
    if e != card.e {
        return Err(ProtocolError::BadCredentials);
    }
    Ok(UnlockedCard { r1, r2, uid })
}

/// `Z` masking keys `h(r1||ID||PW)` and `h(ID||PW||r2)`.
pub(crate) fn list_mask(
    id: &IdField,
    pw: &PwField,
    r1: &Nonce128,
    r2: &Nonce128,
    payload: &[u8],
) -> Vec<u8> {
    use crate::crypto::hash_fields;
    let k1 = hash_fields(&[r1, id, pw]);
    let k2 = hash_fields(&[id, pw, r2]);
    keystream_mask(&k2, &keystream_mask(&k1, payload))
}

/// First-seen set over `(β, T1)` pairs, pruned by the freshness window.
pub(crate) fn seen_key(beta: &Digest256, t1: Timestamp32) -> (Digest256, u32) {
    (*beta, t1.0)
}

pub(crate) type SeenSet = HashSet<(Digest256, u32)>;

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
