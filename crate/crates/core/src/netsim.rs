//! Deterministic discrete-event harness connecting users, servers and the RC.
//!
//! Time is simulated seconds on a [`SimClock`]. Every message travels over a
//! [`Channel`]; public channels let a scripted adversary forward, delay,
//! replay, modify, drop or replace frames, while secure channels (enrollment
//! and the RC update paths) ignore the adversary entirely. All randomness is
//! drawn from the world's seeded generator, so a seed plus a script replays
//! bit for bit.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{IdField, LocField, PwField, Timestamp32};
use crate::protocol::{
    self, rc_handle_db_update, rc_handle_update, rc_register_server, rc_register_user,
    server_db_update_begin, server_handle_login_cached, server_register_begin,
    user_apply_server_list, user_finalize_card, user_handle_response, user_login_begin,
    user_register_begin, user_update_begin, DbUpdateRequest, LoginRequest, LoginResponse,
    ProtocolError, RcState, ReplayCache, ServerSecrets, SessionKey, SessionPolicy, SmartCard,
    TamperResistantMemory,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("no user {0} in this world")]
    NoSuchUser(String),
    #[error("no server {0} in this world")]
    NoSuchServer(String),
    #[error("malformed adversary script: {0}")]
    BadScript(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

impl From<crate::crypto::CryptoError> for SimError {
    fn from(e: crate::crypto::CryptoError) -> Self {
        SimError::Protocol(e.into())
    }
}

/// Why a scenario did not end in an agreed session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorKind {
    Protocol(ProtocolError),
    /// No frame reached the receiver.
    Dropped,
    /// A delivered frame did not decode.
    MalformedFrame,
    /// Both sides accepted but derived different keys.
    KeyMismatch,
}

impl From<ProtocolError> for ErrorKind {
    fn from(e: ProtocolError) -> Self {
        ErrorKind::Protocol(e)
    }
}

impl std::fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ErrorKind::Protocol(e) => write!(f, "{e:?}"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClock {
    now: Timestamp32,
}

impl SimClock {
    pub fn new(start: Timestamp32) -> Self {
        SimClock { now: start }
    }

    pub fn now(&self) -> Timestamp32 {
        self.now
    }

    pub fn advance(&mut self, secs: u32) {
        self.now = self.now.plus(secs);
    }

    /// Moves forward to `t`; never moves backwards.
    pub fn advance_to(&mut self, t: Timestamp32) {
        self.now = self.now.max(t);
    }
}

/// Named fields of the two public authentication frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireField {
    Alpha,
    Beta,
    T1,
    Gamma,
    Sigma,
    T2,
}

impl WireField {
    pub const REQUEST: [WireField; 3] = [WireField::Alpha, WireField::Beta, WireField::T1];
    pub const RESPONSE: [WireField; 3] = [WireField::Gamma, WireField::Sigma, WireField::T2];

    /// Byte range inside the 68-byte frame body.
    pub fn span(self) -> std::ops::Range<usize> {
        match self {
            WireField::Alpha | WireField::Gamma => 0..32,
            WireField::Beta | WireField::Sigma => 32..64,
            WireField::T1 | WireField::T2 => 64..68,
        }
    }

    pub fn width(self) -> usize {
        self.span().len()
    }

    fn in_request(self) -> bool {
        Self::REQUEST.contains(&self)
    }
}

/// What the adversary does with one message on a public channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryAction {
    Forward,
    /// Hold the frame for extra seconds.
    Delay(u32),
    /// Deliver the frame, then this many more copies one hop apart.
    Replay(u32),
    ModifyBit {
        field: WireField,
        byte: usize,
        bit: u8,
    },
    Drop,
    /// Replace the frame with raw bytes.
    Inject(#[serde(with = "crate::protocol::hex_bytes")] Vec<u8>),
}

impl AdversaryAction {
    /// True for actions that alter content or cannot keep the frame inside
    /// the freshness window.
    pub fn is_disruptive(&self, delta_t: u32, latency: u32) -> bool {
        match self {
            AdversaryAction::Forward | AdversaryAction::Replay(_) => false,
            AdversaryAction::Delay(d) => latency.saturating_add(*d) > delta_t,
            _ => true,
        }
    }
}

/// Per-message adversary actions: index 0 is the login request, index 1 the
/// first login response. Missing entries mean [`AdversaryAction::Forward`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryScript {
    pub actions: Vec<AdversaryAction>,
}

impl AdversaryScript {
    pub fn forward_all() -> Self {
        Self::default()
    }

    pub fn on_request(action: AdversaryAction) -> Self {
        AdversaryScript {
            actions: vec![action],
        }
    }

    pub fn on_response(action: AdversaryAction) -> Self {
        AdversaryScript {
            actions: vec![AdversaryAction::Forward, action],
        }
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let script: Self = serde_json::from_str(s).map_err(|e| SimError::BadScript(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }

    fn action(&self, index: usize) -> &AdversaryAction {
        self.actions.get(index).unwrap_or(&AdversaryAction::Forward)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.actions.len() > 2 {
            return Err(SimError::BadScript(format!(
                "{} actions for a two-message exchange",
                self.actions.len()
            )));
        }
        for (i, a) in self.actions.iter().enumerate() {
            if let AdversaryAction::ModifyBit { field, byte, bit } = a {
                if field.in_request() != (i == 0) {
                    return Err(SimError::BadScript(format!(
                        "field {field:?} is not part of message {i}"
                    )));
                }
                if *byte >= field.width() || *bit >= 8 {
                    return Err(SimError::BadScript(format!(
                        "bit {byte}:{bit} outside {field:?} ({} bytes)",
                        field.width()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A transport between two parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channel {
    pub secure: bool,
    pub latency: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub bytes: Vec<u8>,
    pub at: Timestamp32,
}

impl Channel {
    pub fn public(latency: u32) -> Self {
        Channel {
            secure: false,
            latency,
        }
    }

    pub fn secure(latency: u32) -> Self {
        Channel {
            secure: true,
            latency,
        }
    }

    /// Applies the adversary's action; a secure channel always forwards.
    pub fn transmit(&self, frame: &[u8], sent: Timestamp32, action: &AdversaryAction) -> Vec<Delivery> {
        let arrive = sent.plus(self.latency);
        let forward = || {
            vec![Delivery {
                bytes: frame.to_vec(),
                at: arrive,
            }]
        };
        if self.secure {
            return forward();
        }
        match action {
            AdversaryAction::Forward => forward(),
            AdversaryAction::Delay(d) => vec![Delivery {
                bytes: frame.to_vec(),
                at: arrive.plus(*d),
            }],
            AdversaryAction::Replay(copies) => (0..=*copies)
                .map(|k| Delivery {
                    bytes: frame.to_vec(),
                    at: arrive.plus(k * self.latency),
                })
                .collect(),
            AdversaryAction::ModifyBit { field, byte, bit } => {
                let mut bytes = frame.to_vec();
                let idx = field.span().start + byte;
                if let Some(b) = bytes.get_mut(idx) {
                    *b ^= 1 << bit;
                }
                vec![Delivery { bytes, at: arrive }]
            }
            AdversaryAction::Drop => Vec::new(),
            AdversaryAction::Inject(raw) => vec![Delivery {
                bytes: raw.clone(),
                at: arrive,
            }],
        }
    }
}

/// One frame as recorded in a scenario transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptFrame {
    pub message: usize,
    pub label: String,
    pub sent_at: Timestamp32,
    pub delivered_at: Vec<Timestamp32>,
    pub action: AdversaryAction,
    #[serde(with = "crate::protocol::hex_bytes")]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    /// The user accepted and both sides hold the same key.
    pub accepted: bool,
    pub error: Option<ErrorKind>,
    pub transcript: Vec<TranscriptFrame>,
    /// `(user, server)` keys when both sides accepted.
    pub session_keys: Option<(SessionKey, SessionKey)>,
    /// Login requests the server accepted; above 1 only under replay.
    pub server_acceptances: u32,
}

impl ScenarioOutcome {
    fn failed(error: ErrorKind, transcript: Vec<TranscriptFrame>, server_acceptances: u32) -> Self {
        ScenarioOutcome {
            accepted: false,
            error: Some(error),
            transcript,
            session_keys: None,
            server_acceptances,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("outcome serializes")
    }

    /// Public frames of the exchange, decoded.
    pub fn login_request(&self) -> Option<LoginRequest> {
        self.transcript
            .iter()
            .find(|f| f.message == 0)
            .and_then(|f| LoginRequest::from_bytes(&f.bytes).ok())
    }

    pub fn login_response(&self) -> Option<LoginResponse> {
        self.transcript
            .iter()
            .find(|f| f.message == 1)
            .and_then(|f| LoginResponse::from_bytes(&f.bytes).ok())
    }
}

/// Every frame sent in the world, with its channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRecord {
    pub at: Timestamp32,
    pub secure: bool,
    pub label: String,
    #[serde(with = "crate::protocol::hex_bytes")]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub start: Timestamp32,
    /// One-hop latency in seconds.
    pub latency: u32,
    /// Window used for the RC update exchanges.
    pub delta_t: u32,
    pub vt_secs: u64,
    pub replay_cache: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            start: Timestamp32(1_700_000_000),
            latency: 1,
            delta_t: 5,
            vt_secs: protocol::DEFAULT_VT_SECS,
            replay_cache: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerNode {
    pub secrets: ServerSecrets,
    pub trm: TamperResistantMemory,
    pub replay_cache: ReplayCache,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserNode {
    pub id: IdField,
    pub pw: PwField,
    pub card: SmartCard,
}

/// A single-threaded simulated deployment.
#[derive(Debug, Clone)]
pub struct World {
    seed: u64,
    rng: ChaCha20Rng,
    clock: SimClock,
    config: WorldConfig,
    rc: RcState,
    servers: BTreeMap<IdField, ServerNode>,
    users: BTreeMap<IdField, UserNode>,
    wire_log: Vec<WireRecord>,
}

impl World {
    pub fn new(seed: u64) -> Self {
        Self::with_config(seed, WorldConfig::default())
    }

    pub fn with_config(seed: u64, config: WorldConfig) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let rc = RcState::random(&mut rng);
        World {
            seed,
            rng,
            clock: SimClock::new(config.start),
            config,
            rc,
            servers: BTreeMap::new(),
            users: BTreeMap::new(),
            wire_log: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn now(&self) -> Timestamp32 {
        self.clock.now()
    }

    pub fn advance(&mut self, secs: u32) {
        self.clock.advance(secs);
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn rc(&self) -> &RcState {
        &self.rc
    }

    pub fn policy(&self, delta_t: u32) -> SessionPolicy {
        SessionPolicy {
            delta_t,
            vt_secs: self.config.vt_secs,
            replay_cache: self.config.replay_cache,
        }
    }

    pub fn server(&self, id: &str) -> Result<&ServerNode, SimError> {
        IdField::new(id)
            .ok()
            .and_then(|k| self.servers.get(&k))
            .ok_or_else(|| SimError::NoSuchServer(id.to_owned()))
    }

    fn server_mut(&mut self, id: &IdField) -> Result<&mut ServerNode, SimError> {
        self.servers
            .get_mut(id)
            .ok_or_else(|| SimError::NoSuchServer(id.to_string()))
    }

    pub fn user(&self, id: &str) -> Result<&UserNode, SimError> {
        IdField::new(id)
            .ok()
            .and_then(|k| self.users.get(&k))
            .ok_or_else(|| SimError::NoSuchUser(id.to_owned()))
    }

    pub fn server_ids(&self) -> Vec<IdField> {
        self.servers.keys().copied().collect()
    }

    pub fn user_ids(&self) -> Vec<IdField> {
        self.users.keys().copied().collect()
    }

    /// All frames sent so far, secure ones included.
    pub fn wire_log(&self) -> &[WireRecord] {
        &self.wire_log
    }

    /// Frames an eavesdropper on the public network can see.
    pub fn adversary_view(&self) -> impl Iterator<Item = &WireRecord> {
        self.wire_log.iter().filter(|r| !r.secure)
    }

    fn log(&mut self, at: Timestamp32, secure: bool, label: &str, bytes: Vec<u8>) {
        self.wire_log.push(WireRecord {
            at,
            secure,
            label: label.to_owned(),
            bytes,
        });
    }

    fn secure_hop(&mut self, label: &str, bytes: Vec<u8>) -> Timestamp32 {
        let sent = self.clock.now();
        let at = Channel::secure(self.config.latency)
            .transmit(&bytes, sent, &AdversaryAction::Drop)[0]
            .at;
        self.log(sent, true, label, bytes);
        self.clock.advance_to(at);
        at
    }

    /// Enrolls a server over the secure channel.
    pub fn add_server(&mut self, id: &str, pw: &str, loc: &str) -> Result<(), SimError> {
        let (id, pw, loc) = (IdField::new(id)?, PwField::new(pw)?, LocField::new(loc)?);
        let (secrets, req) = server_register_begin(id, pw, loc, &mut self.rng);
        let mut frame = crate::crypto::concat(&[&req.id, &req.p, &req.q, &req.loc]);
        let srt = self.secure_hop("server-registration", std::mem::take(&mut frame));
        let trm = rc_register_server(&mut self.rc, &req, srt)?;
        self.secure_hop("server-provision", trm.ssk.0.to_vec());
        self.servers.insert(
            id,
            ServerNode {
                secrets,
                trm,
                replay_cache: ReplayCache::new(),
            },
        );
        Ok(())
    }

    /// Enrolls a user over the secure channel; retries on a UID collision.
    pub fn add_user(&mut self, id: &str, pw: &str) -> Result<(), SimError> {
        let (id, pw) = (IdField::new(id)?, PwField::new(pw)?);
        loop {
            let (pending, req) = user_register_begin(&id, &pw, &mut self.rng);
            self.secure_hop(
                "user-registration",
                crate::crypto::concat(&[&req.uid, &req.a]),
            );
            match rc_register_user(&mut self.rc, &req, &mut self.rng) {
                Ok(prov) => {
                    self.secure_hop("card-provision", prov.list_bytes.clone());
                    let card = user_finalize_card(&id, &pw, &pending, prov)?;
                    self.users.insert(id, UserNode { id, pw, card });
                    return Ok(());
                }
                Err(ProtocolError::DuplicateUid) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Advances the clock, then runs the database update for every server.
    pub fn advance_and_sync(&mut self, secs: u32) -> Result<usize, SimError> {
        self.clock.advance(secs);
        let mut total = 0;
        for id in self.server_ids() {
            total += self.sync_server(&id)?;
        }
        Ok(total)
    }

    /// Database update for one server; returns the number of new users.
    pub fn sync_server(&mut self, id: &IdField) -> Result<usize, SimError> {
        let t6 = self.clock.now();
        let node = self.server_mut(id)?;
        let req = server_db_update_begin(&node.secrets, &node.trm.ssk, t6);
        self.sync_server_request(req)
    }

    /// Delivers a (possibly tampered) database update request to the RC and
    /// applies the delta on success.
    pub fn sync_server_request(&mut self, req: DbUpdateRequest) -> Result<usize, SimError> {
        self.server_mut(&req.id)?;
        let t7 = self.secure_hop("db-update-request", req.to_bytes().to_vec());
        let delta = rc_handle_db_update(&mut self.rc, &req, t7, self.config.delta_t)?;
        self.secure_hop("user-list-delta", delta.to_bytes());
        let node = self.server_mut(&req.id)?;
        node.trm.apply_delta(&delta);
        Ok(delta.len())
    }

    /// Card refresh for one user against the RC's current server list.
    pub fn update_card(&mut self, user: &str) -> Result<(), SimError> {
        let node = self.user(user)?.clone();
        let t4 = self.clock.now();
        let (req, _) = user_update_begin(&node.id, &node.pw, &node.card, t4)?;
        let t5 = self.secure_hop("update-request", req.to_bytes().to_vec());
        let list = rc_handle_update(&self.rc, &req, t5, self.config.delta_t)?;
        self.secure_hop("server-list", list.clone());
        let card = user_apply_server_list(&node.id, &node.pw, &node.card, &list)?;
        self.users.get_mut(&node.id).expect("present").card = card;
        Ok(())
    }

    /// Hands raw bytes to a server's login handler at time `at`, as an
    /// adversary injecting onto the public network would.
    pub fn deliver_login(
        &mut self,
        server: &str,
        bytes: &[u8],
        at: Timestamp32,
        delta_t: u32,
    ) -> Result<(LoginResponse, SessionKey), ErrorKind> {
        let sid = IdField::new(server).map_err(|_| ErrorKind::MalformedFrame)?;
        let policy = self.policy(delta_t);
        self.log(at, false, "login-request", bytes.to_vec());
        self.clock.advance_to(at);
        let req = LoginRequest::from_bytes(bytes).map_err(|_| ErrorKind::MalformedFrame)?;
        let node = self
            .servers
            .get_mut(&sid)
            .ok_or(ErrorKind::Protocol(ProtocolError::UnknownServer))?;
        server_handle_login_cached(
            &node.trm,
            &node.secrets.id,
            &node.secrets.loc,
            &req,
            at,
            &policy,
            &mut node.replay_cache,
        )
        .map_err(ErrorKind::from)
    }

    pub fn run_honest_session(
        &mut self,
        user: &str,
        server: &str,
        delta_t: u32,
    ) -> Result<ScenarioOutcome, SimError> {
        self.run_with_adversary(user, server, &AdversaryScript::forward_all(), delta_t)
    }

    /// Runs one login exchange through the public channel under `script`.
    pub fn run_with_adversary(
        &mut self,
        user: &str,
        server: &str,
        script: &AdversaryScript,
        delta_t: u32,
    ) -> Result<ScenarioOutcome, SimError> {
        script.validate()?;
        let unode = self.user(user)?.clone();
        let sid = self.server(server)?.secrets.id;
        let channel = Channel::public(self.config.latency);
        let policy = self.policy(delta_t);

        let t1 = self.clock.now();
        let (req, ctx) = match user_login_begin(&unode.id, &unode.pw, &unode.card, &sid, t1) {
            Ok(v) => v,
            Err(e) => return Ok(ScenarioOutcome::failed(e.into(), Vec::new(), 0)),
        };
        let req_bytes = req.to_bytes().to_vec();
        self.log(t1, false, "login-request", req_bytes.clone());
        let action = script.action(0).clone();
        let deliveries = channel.transmit(&req_bytes, t1, &action);
        let mut transcript = vec![TranscriptFrame {
            message: 0,
            label: "login-request".into(),
            sent_at: t1,
            delivered_at: deliveries.iter().map(|d| d.at).collect(),
            action,
            bytes: req_bytes,
        }];

        let mut answered: Vec<(LoginResponse, SessionKey)> = Vec::new();
        let mut server_error = None;
        for d in deliveries {
            self.clock.advance_to(d.at);
            let Ok(r) = LoginRequest::from_bytes(&d.bytes) else {
                server_error = Some(ErrorKind::MalformedFrame);
                continue;
            };
            let node = self.servers.get_mut(&sid).expect("checked above");
            match server_handle_login_cached(
                &node.trm,
                &node.secrets.id,
                &node.secrets.loc,
                &r,
                d.at,
                &policy,
                &mut node.replay_cache,
            ) {
                Ok(v) => answered.push(v),
                Err(e) => server_error = Some(e.into()),
            }
        }
        let acceptances = answered.len() as u32;
        let Some((resp, server_key)) = answered.first().copied() else {
            let err = server_error.unwrap_or(ErrorKind::Dropped);
            return Ok(ScenarioOutcome::failed(err, transcript, 0));
        };

        let t2 = resp.t2;
        let resp_bytes = resp.to_bytes().to_vec();
        self.log(t2, false, "login-response", resp_bytes.clone());
        let action = script.action(1).clone();
        let deliveries = channel.transmit(&resp_bytes, t2, &action);
        transcript.push(TranscriptFrame {
            message: 1,
            label: "login-response".into(),
            sent_at: t2,
            delivered_at: deliveries.iter().map(|d| d.at).collect(),
            action,
            bytes: resp_bytes,
        });
        // replies to replayed requests are forwarded untouched
        for (extra, (r, _)) in answered.iter().enumerate().skip(1) {
            let bytes = r.to_bytes().to_vec();
            self.log(r.t2, false, "login-response", bytes.clone());
            transcript.push(TranscriptFrame {
                message: extra + 1,
                label: "login-response".into(),
                sent_at: r.t2,
                delivered_at: vec![r.t2.plus(channel.latency)],
                action: AdversaryAction::Forward,
                bytes,
            });
        }

        // the user acts on the first response to arrive and then stops
        let Some(first) = deliveries.into_iter().next() else {
            return Ok(ScenarioOutcome::failed(ErrorKind::Dropped, transcript, acceptances));
        };
        self.clock.advance_to(first.at);
        let user_result = LoginResponse::from_bytes(&first.bytes)
            .map_err(|_| ErrorKind::MalformedFrame)
            .and_then(|r| user_handle_response(&ctx, &r, first.at, delta_t).map_err(ErrorKind::from));
        Ok(match user_result {
            Ok(user_key) if user_key == server_key => ScenarioOutcome {
                accepted: true,
                error: None,
                transcript,
                session_keys: Some((user_key, server_key)),
                server_acceptances: acceptances,
            },
            Ok(_) => ScenarioOutcome::failed(ErrorKind::KeyMismatch, transcript, acceptances),
            Err(e) => ScenarioOutcome::failed(e, transcript, acceptances),
        })
    }
}

/// A world with `servers` servers and `users` users, all synced.
pub fn populated_world(seed: u64, servers: usize, users: usize) -> World {
    let mut w = World::new(seed);
    for j in 0..servers {
        w.add_server(&format!("srv{j}"), &format!("srv-pw-{j}"), &format!("loc-{j}"))
            .expect("valid server fields");
    }
    for i in 0..users {
        w.add_user(&format!("user{i}"), &format!("pw-{i}"))
            .expect("valid user fields");
    }
    w.advance_and_sync(1).expect("sync");
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash_fields;

    #[test]
    fn honest_session_two_frames() {
        let mut w = populated_world(1, 2, 2);
        let out = w.run_honest_session("user0", "srv1", 5).unwrap();
        assert!(out.accepted, "{:?}", out.error);
        assert_eq!(out.transcript.len(), 2);
        assert!(out.transcript.iter().all(|f| f.bytes.len() == 68));
        let (u, s) = out.session_keys.unwrap();
        assert_eq!(u, s);
        assert_eq!(out.server_acceptances, 1);
    }

    #[test]
    fn late_user_is_unknown_until_sync() {
        let mut w = populated_world(2, 1, 1);
        w.add_user("late", "pw").unwrap();
        let out = w.run_honest_session("late", "srv0", 5).unwrap();
        assert_eq!(out.error, Some(ErrorKind::Protocol(ProtocolError::UnknownUser)));
        assert_eq!(w.advance_and_sync(1).unwrap(), 1);
        assert!(w.run_honest_session("late", "srv0", 5).unwrap().accepted);
        assert_eq!(w.advance_and_sync(1).unwrap(), 0);
    }

    #[test]
    fn zero_window_with_latency_is_stale() {
        let mut w = populated_world(3, 1, 1);
        let out = w.run_honest_session("user0", "srv0", 0).unwrap();
        assert_eq!(out.error, Some(ErrorKind::Protocol(ProtocolError::StaleRequest)));
    }

    #[test]
    fn scripted_actions() {
        let base = populated_world(4, 1, 1);
        let run = |script: AdversaryScript| {
            let mut w = base.clone();
            w.run_with_adversary("user0", "srv0", &script, 5).unwrap()
        };
        let honest = run(AdversaryScript::forward_all());
        let forwarded = run(AdversaryScript {
            actions: vec![AdversaryAction::Forward, AdversaryAction::Forward],
        });
        assert_eq!(honest, forwarded);

        let delayed = run(AdversaryScript::on_request(AdversaryAction::Delay(6)));
        assert_eq!(delayed.error, Some(ErrorKind::Protocol(ProtocolError::StaleRequest)));

        let flipped = run(AdversaryScript::on_request(AdversaryAction::ModifyBit {
            field: WireField::Beta,
            byte: 0,
            bit: 0,
        }));
        assert_eq!(flipped.error, Some(ErrorKind::Protocol(ProtocolError::AuthFail)));

        let dropped = run(AdversaryScript::on_response(AdversaryAction::Drop));
        assert_eq!(dropped.error, Some(ErrorKind::Dropped));
        assert_eq!(dropped.server_acceptances, 1);

        let injected = run(AdversaryScript::on_request(AdversaryAction::Inject(vec![1, 2, 3])));
        assert_eq!(injected.error, Some(ErrorKind::MalformedFrame));

        let replayed = run(AdversaryScript::on_request(AdversaryAction::Replay(2)));
        assert!(replayed.accepted);
        assert_eq!(replayed.server_acceptances, 3);
    }

    #[test]
    fn beta_flip_confirmed_by_recomputation() {
        let mut w = populated_world(5, 1, 1);
        let honest = w.clone().run_honest_session("user0", "srv0", 5).unwrap();
        let req = honest.login_request().unwrap();
        let node = w.server("srv0").unwrap().clone();
        let uid = hash_fields(&[&node.secrets.id, &node.trm.ssk, &req.t1]) ^ req.alpha;
        let c = node.trm.list_c[&uid];
        let mut flipped = req.beta;
        flipped.0[0] ^= 1;
        assert_ne!(hash_fields(&[&uid, &node.trm.ssk, &c, &req.t1]), flipped);
        let out = w
            .run_with_adversary(
                "user0",
                "srv0",
                &AdversaryScript::on_request(AdversaryAction::ModifyBit {
                    field: WireField::Beta,
                    byte: 0,
                    bit: 0,
                }),
                5,
            )
            .unwrap();
        assert!(!out.accepted);
    }

    #[test]
    fn script_validation_and_json() {
        let bad = AdversaryScript::on_request(AdversaryAction::ModifyBit {
            field: WireField::T1,
            byte: 4,
            bit: 0,
        });
        assert!(matches!(bad.validate(), Err(SimError::BadScript(_))));
        let wrong_msg = AdversaryScript::on_request(AdversaryAction::ModifyBit {
            field: WireField::Gamma,
            byte: 0,
            bit: 0,
        });
        assert!(wrong_msg.validate().is_err());
        let json = r#"{"actions":[{"delay":3},{"modify_bit":{"field":"sigma","byte":31,"bit":7}}]}"#;
        let s = AdversaryScript::from_json(json).unwrap();
        assert_eq!(s.actions[0], AdversaryAction::Delay(3));
        assert_eq!(AdversaryScript::from_json(&s.to_json()).unwrap(), s);
        let inject = r#"{"actions":[{"inject":"00ff"}]}"#;
        assert_eq!(
            AdversaryScript::from_json(inject).unwrap().actions[0],
            AdversaryAction::Inject(vec![0, 0xff])
        );
    }

    #[test]
    fn secure_frames_stay_hidden() {
        let mut w = populated_world(6, 2, 3);
        w.update_card("user1").unwrap();
        w.run_honest_session("user2", "srv0", 5).unwrap();
        assert!(w.wire_log().iter().any(|r| r.secure));
        assert!(w.adversary_view().all(|r| !r.secure && r.label.starts_with("login-")));
        // secure channel ignores the adversary
        let ch = Channel::secure(1);
        assert_eq!(ch.transmit(b"x", Timestamp32(0), &AdversaryAction::Drop).len(), 1);
    }

    #[test]
    fn tampered_sync_leaves_server_untouched() {
        let mut w = populated_world(7, 1, 1);
        w.add_user("fresh", "pw").unwrap();
        let sid = w.server_ids()[0];
        let node = w.server("srv0").unwrap().clone();
        let mut req = server_db_update_begin(&node.secrets, &node.trm.ssk, w.now());
        req.omega.0[5] ^= 0x10;
        assert_eq!(
            w.sync_server_request(req),
            Err(SimError::Protocol(ProtocolError::AuthFail))
        );
        assert_eq!(w.server("srv0").unwrap().trm, node.trm);
        assert_eq!(w.sync_server(&sid).unwrap(), 1);
    }

    #[test]
    fn same_seed_same_transcript() {
        let script = AdversaryScript::on_response(AdversaryAction::Delay(2));
        let run = || {
            let mut w = populated_world(99, 3, 2);
            let out = w.run_with_adversary("user1", "srv2", &script, 5).unwrap();
            (out.to_json(), w.wire_log().to_vec())
        };
        assert_eq!(run(), run());
    }
}
