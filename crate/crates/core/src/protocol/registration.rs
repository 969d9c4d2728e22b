//! Server and user enrollment with the registration center.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{
    list_mask, ProtocolError, RcState, Result, ServerRecord, SmartCard, TamperResistantMemory,
};
use crate::crypto::{hash_fields, Digest256, IdField, LocField, Nonce128, PwField, Timestamp32, Xor16};

/// Values a server keeps after enrolling. `pw` is the operator's secret.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerSecrets {
    pub id: IdField,
    pub pw: PwField,
    pub r_s: Nonce128,
    pub p: Digest256,
    pub loc: LocField,
}

impl ServerSecrets {
    /// `Q_j = h(ID_j||PW_j) ⊕ P_j`.
    pub fn q(&self) -> Digest256 {
        hash_fields(&[&self.id, &self.pw]) ^ self.p
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerRegRequest {
    pub id: IdField,
    pub p: Digest256,
    pub q: Digest256,
    pub loc: LocField,
}

pub fn server_register_begin(
    id: IdField,
    pw: PwField,
    loc: LocField,
    rng: &mut impl RngCore,
) -> (ServerSecrets, ServerRegRequest) {
    server_register_begin_with(id, pw, loc, Nonce128::random(rng))
}

/// Deterministic form of [`server_register_begin`] with a caller-chosen `r_S`.
pub fn server_register_begin_with(
    id: IdField,
    pw: PwField,
    loc: LocField,
    r_s: Nonce128,
) -> (ServerSecrets, ServerRegRequest) {
    let p = hash_fields(&[&id, &r_s, &pw]);
    let secrets = ServerSecrets { id, pw, r_s, p, loc };
    let q = secrets.q();
    (secrets, ServerRegRequest { id, p, q, loc })
}

/// Enrolls a server and hands back its provisioned memory, which carries a
/// snapshot of every user registered so far.
pub fn rc_register_server(
    rc: &mut RcState,
    req: &ServerRegRequest,
    srt: Timestamp32,
) -> Result<TamperResistantMemory> {
    if rc.servers.contains_key(&req.id) {
        return Err(ProtocolError::DuplicateServerId);
    }
    let ssk = hash_fields(&[&rc.k_rc, &req.p, &srt]);
    rc.servers.insert(
        req.id,
        ServerRecord {
            ssk,
            q: req.q,
            loc: req.loc,
            srt,
            synced: rc.users.len(),
        },
    );
    let mut trm = TamperResistantMemory {
        ssk,
        p: req.p,
        list_uid: Default::default(),
        list_c: Default::default(),
    };
    for (uid, c) in &rc.users {
        trm.insert_user(*uid, *c);
    }
    Ok(trm)
}

/// User-side state between sending the registration request and receiving
/// the card.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingUser {
    pub r1: Nonce128,
    pub r2: Nonce128,
    pub a: Digest256,
    pub uid: Digest256,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRegRequest {
    pub uid: Digest256,
    pub a: Digest256,
}

pub fn user_register_begin(
    id: &IdField,
    pw: &PwField,
    rng: &mut impl RngCore,
) -> (PendingUser, UserRegRequest) {
    let r1 = Nonce128::random(rng);
    let r2 = Nonce128::random(rng);
    user_register_begin_with(id, pw, r1, r2)
}

pub fn user_register_begin_with(
    id: &IdField,
    pw: &PwField,
    r1: Nonce128,
    r2: Nonce128,
) -> (PendingUser, UserRegRequest) {
    let a = hash_fields(&[id, pw]);
    let uid = hash_fields(&[&r1, id, &r2]);
    (PendingUser { r1, r2, a, uid }, UserRegRequest { uid, a })
}

/// What the registration center writes onto a fresh card.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardProvision {
    pub c: Digest256,
    pub d: Digest256,
    pub list_bytes: Vec<u8>,
}

pub fn rc_register_user(
    rc: &mut RcState,
    req: &UserRegRequest,
    rng: &mut impl RngCore,
) -> Result<CardProvision> {
    rc_register_user_with(rc, req, Nonce128::random(rng))
}

/// Deterministic form of [`rc_register_user`]; `r3` is used once and dropped.
pub fn rc_register_user_with(
    rc: &mut RcState,
    req: &UserRegRequest,
    r3: Nonce128,
) -> Result<CardProvision> {
    if rc.users.contains_key(&req.uid) {
        return Err(ProtocolError::DuplicateUid);
    }
    if rc.servers.is_empty() {
        return Err(ProtocolError::NoServersRegistered);
    }
    let usk = hash_fields(&[&req.uid, &rc.k_rc, &r3]);
    let c = hash_fields(&[&rc.k_rc, &r3, &req.a]) ^ usk ^ hash_fields(&[&req.uid, &req.a]);
    let d = req.a ^ usk;
    rc.users.insert(req.uid, c);
    Ok(CardProvision {
        c,
        d,
        list_bytes: rc.server_list_bytes(),
    })
}

/// Masks the provisioned values into the five stored card fields. `C`, `D`
/// and the clear server list are consumed here.
pub fn user_finalize_card(
    id: &IdField,
    pw: &PwField,
    pending: &PendingUser,
    prov: CardProvision,
) -> Result<SmartCard> {
    if prov.list_bytes.is_empty() || !prov.list_bytes.len().is_multiple_of(super::SERVER_ENTRY_LEN) {
        return Err(ProtocolError::MalformedList);
    }
    let PendingUser { r1, r2, a, uid } = pending;
    let w = Digest256::from_nonces(r1, r2) ^ *a;
    let x = hash_fields(&[&Xor16::of(&r2.0, id.as_bytes())])
        ^ prov.c
        ^ hash_fields(&[&Xor16::of(&r1.0, pw.as_bytes())]);
    let b = hash_fields(&[r1, pw]) ^ hash_fields(&[r2, pw]);
    let y = b ^ prov.d;
    let z = list_mask(id, pw, r1, r2, &prov.list_bytes);
    let usk = *a ^ prov.d;
    let e = hash_fields(&[uid, pw, &usk]);
    Ok(SmartCard { w, x, y, z, e })
}
