//! Authentication and key agreement between a user and a server.
//!
//! ```text
//! user                                    server
//!   {α, β, T1}            ───────────▶
//!                                         fresh(T1)? UID = h(ID_j||SSK_j||T1) ⊕ α
//!                                         β' = h(UID||SSK_j||C||T1) == β ?
//!                         ◀───────────    {γ, σ, T2}
//!   fresh(T2)? (VT||Loc) = γ ⊕ h(C||UID||ID_j||β)
//!   σ' = h(VT||C||T2−T1) == σ ?
//!   SK = h(UID||ID_j||C||Loc_j||VT)                 SK = h(...)
//! ```

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{
    list_mask, seen_key, unlock_card, ProtocolError, Result, SeenSet, ServerListEntry,
    SessionPolicy, SmartCard, TamperResistantMemory,
};
use crate::crypto::{
    concat, hash_fields, CryptoError, Digest256, Encode, IdField, LocField, PwField, Timestamp32, Xor16,
};

/// Session key lifetime: 8-byte big-endian expiry followed by 8-byte
/// big-endian duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validity16 {
    pub expiry: u64,
    pub duration_s: u64,
}

impl Validity16 {
    pub const LEN: usize = 16;

    pub fn issue(at: Timestamp32, duration_s: u64) -> Self {
        Validity16 {
            expiry: u64::from(at.0) + duration_s,
            duration_s,
        }
    }

    pub fn to_bytes(self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..8].copy_from_slice(&self.expiry.to_be_bytes());
        out[8..].copy_from_slice(&self.duration_s.to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; 16]) -> Self {
        Validity16 {
            expiry: u64::from_be_bytes(b[..8].try_into().unwrap()),
            duration_s: u64::from_be_bytes(b[8..].try_into().unwrap()),
        }
    }

    pub fn issued_at(&self) -> Option<u64> {
        self.expiry.checked_sub(self.duration_s)
    }
}

impl Encode for Validity16 {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bytes());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginRequest {
    pub alpha: Digest256,
    pub beta: Digest256,
    pub t1: Timestamp32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginResponse {
    /// `(VT||Loc_j)` masked under `h(C||UID||ID_j||β)`.
    pub gamma: Digest256,
    pub sigma: Digest256,
    pub t2: Timestamp32,
}

macro_rules! fixed_message {
    ($ty:ident { $a:ident, $b:ident, $t:ident }) => {
        impl $ty {
            pub const LEN: usize = 68;

            pub fn to_bytes(&self) -> [u8; 68] {
                let mut out = [0u8; 68];
                out[..32].copy_from_slice(&self.$a.0);
                out[32..64].copy_from_slice(&self.$b.0);
                out[64..].copy_from_slice(&self.$t.to_bytes());
                out
            }

            pub fn from_bytes(b: &[u8]) -> std::result::Result<Self, CryptoError> {
                if b.len() != Self::LEN {
                    return Err(CryptoError::BadWidth {
                        expected: Self::LEN,
                        actual: b.len(),
                    });
                }
                Ok($ty {
                    $a: Digest256::from_slice(&b[..32])?,
                    $b: Digest256::from_slice(&b[32..64])?,
                    $t: Timestamp32::from_bytes(b[64..].try_into().unwrap()),
                })
            }
        }
    };
}

fixed_message!(LoginRequest { alpha, beta, t1 });
fixed_message!(LoginResponse { gamma, sigma, t2 });

/// An agreed session key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionKey {
    pub sk: Digest256,
    pub vt: Validity16,
    pub peer_id: IdField,
}

/// User-side state carried from the request to the response.
#[derive(Debug, Clone)]
pub struct LoginContext {
    pub uid: Digest256,
    pub c: Digest256,
    pub ssk: Digest256,
    pub id_j: IdField,
    pub loc_j: LocField,
    pub beta: Digest256,
    pub t1: Timestamp32,
}

fn session_key(
    uid: &Digest256,
    id_j: &IdField,
    c: &Digest256,
    loc: &LocField,
    vt: &Validity16,
) -> Digest256 {
    hash_fields(&[uid, id_j, c, loc, vt])
}

fn elapsed(from: Timestamp32, to: Timestamp32) -> Timestamp32 {
    Timestamp32(to.0.wrapping_sub(from.0))
}

/// Unlocks the card and builds `{α, β, T1}` for `target`.
pub fn user_login_begin(
    id: &IdField,
    pw: &PwField,
    card: &SmartCard,
    target: &IdField,
    t1: Timestamp32,
) -> Result<(LoginRequest, LoginContext)> {
    let unlocked = unlock_card(id, pw, card)?;
    let (r1, r2, uid) = (unlocked.r1, unlocked.r2, unlocked.uid);
    let list = list_mask(id, pw, &r1, &r2, &card.z);
    let entry = ServerListEntry::decode_list(&list)
        .map_err(|_| ProtocolError::BadCredentials)?
        .into_iter()
        .find(|e| e.id == *target)
        .ok_or(ProtocolError::UnknownServer)?;
    let alpha = hash_fields(&[&entry.id, &entry.ssk, &t1]) ^ uid;
    let c = card.x
        ^ hash_fields(&[&Xor16::of(&r2.0, id.as_bytes())])
        ^ hash_fields(&[&Xor16::of(&r1.0, pw.as_bytes())]);
    let beta = hash_fields(&[&uid, &entry.ssk, &c, &t1]);
    Ok((
        LoginRequest { alpha, beta, t1 },
        LoginContext {
            uid,
            c,
            ssk: entry.ssk,
            id_j: entry.id,
            loc_j: entry.loc,
            beta,
            t1,
        },
    ))
}

/// Verifies a login request at the server and answers it.
///
/// A request is discarded without a response on any error. A bad `β` with a
/// well-formed `α` costs the server exactly two hashes.
pub fn server_handle_login(
    trm: &TamperResistantMemory,
    id_j: &IdField,
    loc_j: &LocField,
    req: &LoginRequest,
    t2: Timestamp32,
    policy: &SessionPolicy,
) -> Result<(LoginResponse, SessionKey)> {
    if !t2.is_fresh_after(req.t1, policy.delta_t) {
        return Err(ProtocolError::StaleRequest);
    }
    let uid = hash_fields(&[id_j, &trm.ssk, &req.t1]) ^ req.alpha;
    let c = *trm.lookup_c(&uid).ok_or(ProtocolError::UnknownUser)?;
    let beta = hash_fields(&[&uid, &trm.ssk, &c, &req.t1]);
    if beta != req.beta {
        return Err(ProtocolError::AuthFail);
    }
    let vt = Validity16::issue(t2, policy.vt_secs);
    let mask = hash_fields(&[&c, &uid, id_j, &beta]);
    let gamma = Digest256::from_slice(&concat(&[&vt, loc_j]))? ^ mask;
    let sigma = hash_fields(&[&vt, &c, &elapsed(req.t1, t2)]);
    let sk = session_key(&uid, id_j, &c, loc_j, &vt);
    Ok((
        LoginResponse { gamma, sigma, t2 },
        SessionKey {
            sk,
            vt,
            peer_id: *id_j,
        },
    ))
}

/// Remembers answered `(β, T1)` pairs for one freshness window.
#[derive(Debug, Default, Clone)]
pub struct ReplayCache {
    seen: SeenSet,
    order: VecDeque<(Digest256, u32)>,
}

impl ReplayCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn prune(&mut self, now: Timestamp32, delta_t: u32) {
        while let Some(&(beta, t1)) = self.order.front() {
            if Timestamp32(t1).plus(delta_t) >= now {
                break;
            }
            self.order.pop_front();
            self.seen.remove(&(beta, t1));
        }
    }

    pub fn contains(&self, req: &LoginRequest) -> bool {
        self.seen.contains(&seen_key(&req.beta, req.t1))
    }

    fn insert(&mut self, req: &LoginRequest) {
        let key = seen_key(&req.beta, req.t1);
        if self.seen.insert(key) {
            self.order.push_back(key);
        }
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// [`server_handle_login`] with the optional `(β, T1)` replay cache applied
/// when `policy.replay_cache` is set. Only accepted requests are remembered.
pub fn server_handle_login_cached(
    trm: &TamperResistantMemory,
    id_j: &IdField,
    loc_j: &LocField,
    req: &LoginRequest,
    t2: Timestamp32,
    policy: &SessionPolicy,
    cache: &mut ReplayCache,
) -> Result<(LoginResponse, SessionKey)> {
    if !policy.replay_cache {
        return server_handle_login(trm, id_j, loc_j, req, t2, policy);
    }
    cache.prune(t2, policy.delta_t);
    if cache.contains(req) {
        return Err(ProtocolError::Replayed);
    }
    let out = server_handle_login(trm, id_j, loc_j, req, t2, policy)?;
    cache.insert(req);
    Ok(out)
}

/// Verifies the server's answer and derives the session key.
pub fn user_handle_response(
    ctx: &LoginContext,
    resp: &LoginResponse,
    t3: Timestamp32,
    delta_t: u32,
) -> Result<SessionKey> {
    if !t3.is_fresh_after(resp.t2, delta_t) {
        return Err(ProtocolError::StaleResponse);
    }
    let mask = hash_fields(&[&ctx.c, &ctx.uid, &ctx.id_j, &ctx.beta]);
    let plain = resp.gamma ^ mask;
    let vt = Validity16::from_bytes(plain.0[..16].try_into().unwrap());
    let loc = LocField::from_bytes(&plain.0[16..]).map_err(|_| ProtocolError::AuthFail);
    let sigma = hash_fields(&[&vt, &ctx.c, &elapsed(ctx.t1, resp.t2)]);
    if sigma != resp.sigma {
        return Err(ProtocolError::AuthFail);
    }
    // σ does not cover Loc_j; the user already knows it from its own list.
    let loc = loc?;
    if loc != ctx.loc_j || vt.issued_at() != Some(u64::from(resp.t2.0)) {
        return Err(ProtocolError::AuthFail);
    }
    Ok(SessionKey {
        sk: session_key(&ctx.uid, &ctx.id_j, &ctx.c, &loc, &vt),
        vt,
        peer_id: ctx.id_j,
    })
}
