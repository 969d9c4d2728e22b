//! Card refresh: a user fetches the current server list from the RC.

use serde::{Deserialize, Serialize};

use super::{list_mask, unlock_card, ProtocolError, RcState, Result, ServerListEntry, SmartCard};
use crate::crypto::{hash_fields, CryptoError, Digest256, IdField, PwField, Timestamp32, Xor16};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateRequest {
    pub uid: Digest256,
    pub tau: Digest256,
    pub t4: Timestamp32,
}

impl UpdateRequest {
    pub const LEN: usize = 68;

    pub fn to_bytes(&self) -> [u8; 68] {
        let mut out = [0u8; 68];
        out[..32].copy_from_slice(&self.uid.0);
        out[32..64].copy_from_slice(&self.tau.0);
        out[64..].copy_from_slice(&self.t4.to_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> std::result::Result<Self, CryptoError> {
        if b.len() != Self::LEN {
            return Err(CryptoError::BadWidth {
                expected: Self::LEN,
                actual: b.len(),
            });
        }
        Ok(UpdateRequest {
            uid: Digest256::from_slice(&b[..32])?,
            tau: Digest256::from_slice(&b[32..64])?,
            t4: Timestamp32::from_bytes(b[64..].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateContext {
    pub uid: Digest256,
    pub t4: Timestamp32,
}

/// `τ = h(C||T4||UID)` after the same card check as login.
pub fn user_update_begin(
    id: &IdField,
    pw: &PwField,
    card: &SmartCard,
    t4: Timestamp32,
) -> Result<(UpdateRequest, UpdateContext)> {
    let u = unlock_card(id, pw, card)?;
    let c = hash_fields(&[&Xor16::of(&u.r2.0, id.as_bytes())])
        ^ card.x
        ^ hash_fields(&[&Xor16::of(&u.r1.0, pw.as_bytes())]);
    let tau = hash_fields(&[&c, &t4, &u.uid]);
    Ok((
        UpdateRequest { uid: u.uid, tau, t4 },
        UpdateContext { uid: u.uid, t4 },
    ))
}

/// Checks `τ` and returns the current server list bytes.
pub fn rc_handle_update(
    rc: &RcState,
    req: &UpdateRequest,
    t5: Timestamp32,
    delta_t: u32,
) -> Result<Vec<u8>> {
    if !t5.is_fresh_after(req.t4, delta_t) {
        return Err(ProtocolError::StaleRequest);
    }
    let c = rc.user_c(&req.uid).ok_or(ProtocolError::UnknownUser)?;
    if hash_fields(&[c, &req.t4, &req.uid]) != req.tau {
        return Err(ProtocolError::AuthFail);
    }
    Ok(rc.server_list_bytes())
}

/// Replaces `Z` with the new list masked under the user's keystreams.
pub fn user_apply_server_list(
    id: &IdField,
    pw: &PwField,
    card: &SmartCard,
    list_bytes: &[u8],
) -> Result<SmartCard> {
    ServerListEntry::decode_list(list_bytes)?;
    let u = unlock_card(id, pw, card)?;
    Ok(SmartCard {
        z: list_mask(id, pw, &u.r1, &u.r2, list_bytes),
        ..card.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{LocField, Nonce128, RcKey};
    use crate::protocol::{
        rc_register_server, rc_register_user_with, server_register_begin_with,
        user_finalize_card, user_login_begin, user_register_begin_with,
    };

    fn setup() -> (RcState, IdField, PwField, SmartCard) {
        let mut rc = RcState::new(RcKey([0x11; 32]));
        let mut rs = [0u8; 16];
        rs[15] = 1;
        let (_, sreq) = server_register_begin_with(
            IdField::new("hosp01").unwrap(),
            PwField::new("pw").unwrap(),
            LocField::new("ward-7").unwrap(),
            Nonce128(rs),
        );
        rc_register_server(&mut rc, &sreq, Timestamp32(1_600_000_000)).unwrap();
        let id = IdField::new("alice").unwrap();
        let pw = PwField::new("secret").unwrap();
        let (pending, req) =
            user_register_begin_with(&id, &pw, Nonce128([0xA1; 16]), Nonce128([0xB2; 16]));
        let prov = rc_register_user_with(&mut rc, &req, Nonce128([0xC3; 16])).unwrap();
        let card = user_finalize_card(&id, &pw, &pending, prov).unwrap();
        (rc, id, pw, card)
    }

    #[test]
    fn tau_matches_oracle() {
        let (_, id, pw, card) = setup();
        let (req, ctx) = user_update_begin(&id, &pw, &card, Timestamp32(1_700_000_050)).unwrap();
        assert_eq!(
            req.tau.to_hex(),
            "3f5c00aa6af6afe3a2bf25243719512b584d67d4216ac8f717a821c4b5ab5335"
        );
        assert_eq!(ctx.uid, req.uid);
        assert_eq!(
            user_update_begin(&id, &PwField::new("nope").unwrap(), &card, Timestamp32(0)),
            Err(ProtocolError::BadCredentials)
        );
    }

    #[test]
    fn rc_update_checks() {
        let (rc, id, pw, card) = setup();
        let t4 = Timestamp32(1_700_000_050);
        let (req, _) = user_update_begin(&id, &pw, &card, t4).unwrap();
        assert_eq!(rc_handle_update(&rc, &req, t4.plus(1), 5).unwrap().len(), 64);
        assert_eq!(
            rc_handle_update(&rc, &req, t4.plus(6), 5),
            Err(ProtocolError::StaleRequest)
        );
        let unknown = UpdateRequest { uid: Digest256([0; 32]), ..req };
        assert_eq!(
            rc_handle_update(&rc, &unknown, t4, 5),
            Err(ProtocolError::UnknownUser)
        );
        let shifted = UpdateRequest { t4: t4.plus(1), ..req };
        assert_eq!(
            rc_handle_update(&rc, &shifted, t4.plus(1), 5),
            Err(ProtocolError::AuthFail)
        );
    }

    #[test]
    fn new_server_reachable_after_update() {
        let (mut rc, id, pw, card) = setup();
        let new_id = IdField::new("clinic").unwrap();
        let (_, sreq) = server_register_begin_with(
            new_id,
            PwField::new("x").unwrap(),
            LocField::new("east").unwrap(),
            Nonce128([4; 16]),
        );
        rc_register_server(&mut rc, &sreq, Timestamp32(5)).unwrap();
        assert_eq!(
            user_login_begin(&id, &pw, &card, &new_id, Timestamp32(9)).unwrap_err(),
            ProtocolError::UnknownServer
        );
        let t4 = Timestamp32(100);
        let (req, _) = user_update_begin(&id, &pw, &card, t4).unwrap();
        let list = rc_handle_update(&rc, &req, t4, 5).unwrap();
        let updated = user_apply_server_list(&id, &pw, &card, &list).unwrap();
        assert_eq!(updated.storage_bytes(), 128 + 128);
        assert_eq!((updated.w, updated.x, updated.y, updated.e), (card.w, card.x, card.y, card.e));
        assert_eq!(user_apply_server_list(&id, &pw, &card, &list).unwrap(), updated);
        let (_, ctx) = user_login_begin(&id, &pw, &updated, &new_id, Timestamp32(9)).unwrap();
        assert_eq!(ctx.loc_j.as_str(), "east");
    }

    #[test]
    fn malformed_list() {
        let (_, id, pw, card) = setup();
        assert_eq!(
            user_apply_server_list(&id, &pw, &card, &[0u8; 63]),
            Err(ProtocolError::MalformedList)
        );
        assert_eq!(
            user_apply_server_list(&id, &pw, &card, &[]),
            Err(ProtocolError::MalformedList)
        );
    }
}
