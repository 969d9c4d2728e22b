//! Server database refresh: a server pulls users registered since its last sync.

use serde::{Deserialize, Serialize};

use super::{ProtocolError, RcState, Result, ServerSecrets};
use crate::crypto::{hash_fields, CryptoError, Digest256, IdField, PwField, Timestamp32};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbUpdateRequest {
    pub id: IdField,
    pub omega: Digest256,
    pub t6: Timestamp32,
}

impl DbUpdateRequest {
    pub const LEN: usize = 52;

    pub fn to_bytes(&self) -> [u8; 52] {
        let mut out = [0u8; 52];
        out[..16].copy_from_slice(self.id.as_bytes());
        out[16..48].copy_from_slice(&self.omega.0);
        out[48..].copy_from_slice(&self.t6.to_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> std::result::Result<Self, CryptoError> {
        if b.len() != Self::LEN {
            return Err(CryptoError::BadWidth {
                expected: Self::LEN,
                actual: b.len(),
            });
        }
        Ok(DbUpdateRequest {
            id: IdField::from_bytes(&b[..16])?,
            omega: Digest256::from_slice(&b[16..48])?,
            t6: Timestamp32::from_bytes(b[48..].try_into().unwrap()),
        })
    }
}

/// `(UID, C)` pairs a server has not seen yet, in registration order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserListDelta {
    pub users: Vec<(Digest256, Digest256)>,
}

impl UserListDelta {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.users.len() * 64);
        for (uid, c) in &self.users {
            out.extend_from_slice(&uid.0);
            out.extend_from_slice(&c.0);
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> std::result::Result<Self, CryptoError> {
        if !b.len().is_multiple_of(64) {
            return Err(CryptoError::BadWidth {
                expected: b.len() / 64 * 64 + 64,
                actual: b.len(),
            });
        }
        let users = b
            .chunks_exact(64)
            .map(|rec| {
                Ok((
                    Digest256::from_slice(&rec[..32])?,
                    Digest256::from_slice(&rec[32..])?,
                ))
            })
            .collect::<std::result::Result<_, CryptoError>>()?;
        Ok(UserListDelta { users })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// `ω = h(Q_j||T6||SSK_j)`.
pub fn server_db_update_begin(
    secrets: &ServerSecrets,
    ssk: &Digest256,
    t6: Timestamp32,
) -> DbUpdateRequest {
    server_db_update_from_parts(&secrets.id, &secrets.pw, &secrets.p, ssk, t6)
}

/// [`server_db_update_begin`] for a server that kept only `P_j`, not `r_S`.
pub fn server_db_update_from_parts(
    id: &IdField,
    pw: &PwField,
    p: &Digest256,
    ssk: &Digest256,
    t6: Timestamp32,
) -> DbUpdateRequest {
    let q = hash_fields(&[id, pw]) ^ *p;
    DbUpdateRequest {
        id: *id,
        omega: hash_fields(&[&q, &t6, ssk]),
        t6,
    }
}

/// Verifies `ω` and advances the server's sync marker.
pub fn rc_handle_db_update(
    rc: &mut RcState,
    req: &DbUpdateRequest,
    t7: Timestamp32,
    delta_t: u32,
) -> Result<UserListDelta> {
    if !t7.is_fresh_after(req.t6, delta_t) {
        return Err(ProtocolError::StaleRequest);
    }
    let user_count = rc.users.len();
    let record = rc
        .servers
        .get_mut(&req.id)
        .ok_or(ProtocolError::UnknownServer)?;
    if hash_fields(&[&record.q, &req.t6, &record.ssk]) != req.omega {
        return Err(ProtocolError::AuthFail);
    }
    let from = record.synced;
    record.synced = user_count;
    let users = rc
        .users
        .get_range(from..user_count)
        .map(|s| s.iter().map(|(u, c)| (*u, *c)).collect())
        .unwrap_or_default();
    Ok(UserListDelta { users })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{LocField, Nonce128, PwField, RcKey};
    use crate::protocol::{
        rc_register_server, rc_register_user_with, server_register_begin_with,
        user_register_begin_with,
    };

    fn setup() -> (RcState, ServerSecrets, Digest256) {
        let mut rc = RcState::new(RcKey([0x11; 32]));
        let mut rs = [0u8; 16];
        rs[15] = 1;
        let (secrets, sreq) = server_register_begin_with(
            IdField::new("hosp01").unwrap(),
            PwField::new("pw").unwrap(),
            LocField::new("ward-7").unwrap(),
            Nonce128(rs),
        );
        let trm = rc_register_server(&mut rc, &sreq, Timestamp32(1_600_000_000)).unwrap();
        (rc, secrets, trm.ssk)
    }

    fn add_user(rc: &mut RcState, n: u8) {
        let id = IdField::new(&format!("user{n}")).unwrap();
        let pw = PwField::new("pw").unwrap();
        let (_, req) = user_register_begin_with(&id, &pw, Nonce128([n; 16]), Nonce128([n; 16]));
        rc_register_user_with(rc, &req, Nonce128([n; 16])).unwrap();
    }

    #[test]
    fn omega_matches_oracle() {
        let (_, secrets, ssk) = setup();
        let t6 = Timestamp32(1_700_000_060);
        let a = server_db_update_begin(&secrets, &ssk, t6);
        assert_eq!(
            a.omega.to_hex(),
            "a047f07d8f292a8265f7a7802487774eeffcdf165dbd41053894d5ec0fb93e74"
        );
        assert_eq!(server_db_update_begin(&secrets, &ssk, t6), a);
        assert_ne!(server_db_update_begin(&secrets, &ssk, t6.plus(1)).omega, a.omega);
    }

    #[test]
    fn deltas_follow_registrations() {
        let (mut rc, secrets, ssk) = setup();
        for n in 1..=3 {
            add_user(&mut rc, n);
        }
        let t6 = Timestamp32(50);
        let req = server_db_update_begin(&secrets, &ssk, t6);
        assert_eq!(rc_handle_db_update(&mut rc, &req, t6, 5).unwrap().len(), 3);
        assert!(rc_handle_db_update(&mut rc, &req, t6, 5).unwrap().is_empty());
        add_user(&mut rc, 4);
        let delta = rc_handle_db_update(&mut rc, &req, t6.plus(2), 5).unwrap();
        assert_eq!(delta.len(), 1);
        assert_eq!(UserListDelta::from_bytes(&delta.to_bytes()).unwrap(), delta);
    }

    #[test]
    fn db_update_rejections() {
        let (mut rc, secrets, ssk) = setup();
        add_user(&mut rc, 1);
        let t6 = Timestamp32(50);
        let req = server_db_update_begin(&secrets, &ssk, t6);
        let mut forged = req;
        forged.omega.0[0] ^= 1;
        assert_eq!(rc_handle_db_update(&mut rc, &forged, t6, 5), Err(ProtocolError::AuthFail));
        assert_eq!(
            rc_handle_db_update(&mut rc, &req, t6.plus(6), 5),
            Err(ProtocolError::StaleRequest)
        );
        let unknown = DbUpdateRequest { id: IdField::new("ghost").unwrap(), ..req };
        assert_eq!(
            rc_handle_db_update(&mut rc, &unknown, t6, 5),
            Err(ProtocolError::UnknownServer)
        );
        // marker untouched by failures
        assert_eq!(rc_handle_db_update(&mut rc, &req, t6, 5).unwrap().len(), 1);
    }
}
