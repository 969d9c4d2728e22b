//! Scripted adversaries, one per analyzed attack.
//!
//! Each scenario gives the adversary a fixed knowledge set and runs the
//! strongest concrete strategy this crate can express against a cloned
//! [`World`]. An acceptance is any adversary-built message that an honest
//! party accepts, or any adversary-computed key that equals a real one. A
//! scenario is evidence, not a proof.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::crypto::{
    concat, count_hashes, hash_fields, Digest256, IdField, LocField, PwField, Timestamp32,
};
use crate::netsim::{populated_world, AdversaryAction, AdversaryScript, WireField, World};
use crate::protocol::{
    list_mask, server_handle_login, unlock_card, user_handle_response, user_login_begin,
    LoginContext, LoginRequest, LoginResponse, ProtocolError, ServerListEntry, SessionKey,
    SessionPolicy, SmartCard, TamperResistantMemory, Validity16,
};

pub const ATTACK_NAMES: [&str; 11] = [
    "user-impersonation",
    "server-impersonation",
    "session-key-disclosure",
    "stolen-smart-card",
    "modification",
    "password-guessing",
    "mitm",
    "replay",
    "insider",
    "dos",
    "forward-secrecy",
];

/// Size of the password dictionary in the guessing scenario.
pub const PASSWORD_SPACE: usize = 1000;
/// Significance level of the guessing scenario's binomial test.
pub const GUESSING_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown attack {0:?}; expected one of {ATTACK_NAMES:?}")]
pub struct UnknownAttack(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack_name: String,
    pub attempts: u64,
    pub acceptances: u64,
    pub notes: Vec<String>,
    /// Scenario-specific measurements, e.g. error tallies and hash counts.
    pub observations: BTreeMap<String, Value>,
}

impl AttackReport {
    fn new(name: &str) -> Self {
        AttackReport {
            attack_name: name.to_owned(),
            attempts: 0,
            acceptances: 0,
            notes: Vec::new(),
            observations: BTreeMap::new(),
        }
    }

    fn attempt(&mut self, accepted: bool) {
        self.attempts += 1;
        self.acceptances += u64::from(accepted);
    }

    fn observe(&mut self, key: &str, value: impl Into<Value>) {
        self.observations.insert(key.to_owned(), value.into());
    }

    fn note(&mut self, text: &str) {
        self.notes.push(text.to_owned());
    }

    pub fn resisted(&self) -> bool {
        self.acceptances == 0
    }
}

/// The world every CLI and acceptance run attacks: three servers and three
/// users, all synced.
pub fn standard_world(seed: u64) -> World {
    populated_world(seed, 3, 3)
}

pub fn run_attack(name: &str, world: &World) -> Result<AttackReport, UnknownAttack> {
    let report = match name {
        "user-impersonation" => attack_user_impersonation(world),
        "server-impersonation" => attack_server_impersonation(world),
        "session-key-disclosure" => attack_session_key_disclosure(world),
        "stolen-smart-card" => attack_stolen_smart_card(world),
        "modification" => attack_modification(world),
        "password-guessing" => attack_password_guessing(world),
        "mitm" => attack_mitm(world),
        "replay" => attack_replay(world),
        "insider" => attack_insider(world),
        "dos" => attack_dos(world),
        "forward-secrecy" => check_forward_secrecy(world),
        other => return Err(UnknownAttack(other.to_owned())),
    };
    Ok(report)
}

pub fn run_all(world: &World) -> Vec<AttackReport> {
    ATTACK_NAMES
        .iter()
        .map(|n| run_attack(n, world).expect("listed name"))
        .collect()
}

/// A server as seen by code driving its handler directly.
struct Target {
    id: IdField,
    loc: LocField,
    trm: TamperResistantMemory,
    policy: SessionPolicy,
}

impl Target {
    fn of(world: &World, index: usize) -> Target {
        let id = world.server_ids()[index];
        let node = world.server(id.as_str()).expect("listed server");
        Target {
            id,
            loc: node.secrets.loc,
            trm: node.trm.clone(),
            policy: world.policy(world.config().delta_t),
        }
    }

    fn answer(&self, req: &LoginRequest, t2: Timestamp32) -> Result<(LoginResponse, SessionKey), ProtocolError> {
        server_handle_login(&self.trm, &self.id, &self.loc, req, t2, &self.policy)
    }

    fn accepts(&self, req: &LoginRequest, t2: Timestamp32) -> bool {
        self.answer(req, t2).is_ok()
    }
}

/// What a registered user knows: own credentials, own card, and the
/// unmasked server list.
struct Insider {
    id: IdField,
    pw: PwField,
    card: SmartCard,
    uid: Digest256,
    c: Digest256,
    list: Vec<ServerListEntry>,
}

impl Insider {
    fn of(world: &World, index: usize) -> Insider {
        let id = world.user_ids()[index];
        let node = world.user(id.as_str()).expect("listed user").clone();
        let unlocked = unlock_card(&node.id, &node.pw, &node.card).expect("own card opens");
        let list = ServerListEntry::decode_list(&list_mask(
            &node.id,
            &node.pw,
            &unlocked.r1,
            &unlocked.r2,
            &node.card.z,
        ))
        .expect("own list decodes");
        let (_, ctx) = user_login_begin(&node.id, &node.pw, &node.card, &list[0].id, Timestamp32(0))
            .expect("own card logs in");
        Insider {
            id: node.id,
            pw: node.pw,
            card: node.card,
            uid: unlocked.uid,
            c: ctx.c,
            list,
        }
    }

    fn entry(&self, server: &IdField) -> ServerListEntry {
        *self.list.iter().find(|e| e.id == *server).expect("server on list")
    }
}

/// A completed honest exchange.
#[derive(Clone)]
struct Session {
    req: LoginRequest,
    ctx: LoginContext,
    resp: LoginResponse,
    key: SessionKey,
}

fn honest_session(user: &Insider, target: &Target, t1: Timestamp32) -> Session {
    let (req, ctx) = user_login_begin(&user.id, &user.pw, &user.card, &target.id, t1).expect("login");
    let t2 = t1.plus(1);
    let (resp, server_key) = target.answer(&req, t2).expect("server accepts honest request");
    let key = user_handle_response(&ctx, &resp, t2.plus(1), target.policy.delta_t).expect("user accepts");
    assert_eq!(key, server_key);
    Session { req, ctx, resp, key }
}

fn forge_request(uid: &Digest256, c: &Digest256, entry: &ServerListEntry, t1: Timestamp32) -> LoginRequest {
    LoginRequest {
        alpha: hash_fields(&[&entry.id, &entry.ssk, &t1]) ^ *uid,
        beta: hash_fields(&[uid, &entry.ssk, c, &t1]),
        t1,
    }
}

fn forge_response(
    uid: &Digest256,
    c: &Digest256,
    entry: &ServerListEntry,
    beta: &Digest256,
    t1: Timestamp32,
    t2: Timestamp32,
    vt_secs: u64,
) -> LoginResponse {
    let vt = Validity16::issue(t2, vt_secs);
    let plain = Digest256::from_slice(&concat(&[&vt, &entry.loc])).expect("32 bytes");
    LoginResponse {
        gamma: plain ^ hash_fields(&[c, uid, &entry.id, beta]),
        sigma: hash_fields(&[&vt, c, &Timestamp32(t2.0.wrapping_sub(t1.0))]),
        t2,
    }
}

/// Unmasks the user id from a captured request with a known server key.
fn recover_uid(entry: &ServerListEntry, req: &LoginRequest) -> Digest256 {
    hash_fields(&[&entry.id, &entry.ssk, &req.t1]) ^ req.alpha
}

fn candidate_key(uid: &Digest256, entry: &ServerListEntry, c: &Digest256, vt: &Validity16) -> Digest256 {
    hash_fields(&[uid, &entry.id, c, &entry.loc, vt])
}

fn random_digest(rng: &mut impl RngCore) -> Digest256 {
    Digest256::random(rng)
}

fn scenario_rng(world: &World, name: &str) -> ChaCha20Rng {
    let salt = name.bytes().fold(0u64, |h, b| h.rotate_left(5) ^ u64::from(b));
    ChaCha20Rng::seed_from_u64(world.seed() ^ salt)
}

fn tally<T>(counts: &mut BTreeMap<String, u64>, result: &Result<T, ProtocolError>) {
    let key = match result {
        Ok(_) => "Accepted".to_owned(),
        Err(e) => format!("{e:?}"),
    };
    *counts.entry(key).or_default() += 1;
}

/// Registered user 1 (full secrets, every transcript of user 0) and an
/// outsider try to log in as user 0.
pub fn attack_user_impersonation(world: &World) -> AttackReport {
    let mut report = AttackReport::new("user-impersonation");
    let mut rng = scenario_rng(world, &report.attack_name);
    let target = Target::of(world, 0);
    let victim = Insider::of(world, 0);
    let adversary = Insider::of(world, 1);
    let entry = adversary.entry(&target.id);
    let t0 = world.now();
    let seen = honest_session(&victim, &target, t0);

    let recovered = recover_uid(&entry, &seen.req);
    let uids = [adversary.uid, recovered, seen.req.alpha, seen.req.beta, seen.resp.gamma, seen.resp.sigma];
    let cs = [
        adversary.c,
        seen.req.alpha,
        seen.req.beta,
        seen.resp.gamma,
        seen.resp.sigma,
        recovered,
        Digest256([0; 32]),
        adversary.c ^ adversary.uid ^ recovered,
    ];
    let t1 = t0.plus(3);
    let mut errors = BTreeMap::new();
    for uid in &uids {
        for c in &cs {
            if (*uid, *c) == (adversary.uid, adversary.c) {
                continue;
            }
            let r = target.answer(&forge_request(uid, c, &entry, t1), t1.plus(1));
            report.attempt(r.is_ok());
            tally(&mut errors, &r);
        }
        // captured β spliced onto a realigned α
        let spliced = LoginRequest {
            beta: seen.req.beta,
            ..forge_request(uid, &adversary.c, &entry, t1)
        };
        report.attempt(target.accepts(&spliced, t1.plus(1)));
    }
    let own = forge_request(&adversary.uid, &adversary.c, &entry, t1);
    report.observe("control_own_credentials_accepted", target.accepts(&own, t1.plus(1)));
    report.observe("victim_uid_recovered", recovered == victim.uid);

    let mut outsider_accepts = 0;
    for _ in 0..1000 {
        let req = LoginRequest {
            alpha: random_digest(&mut rng),
            beta: random_digest(&mut rng),
            t1,
        };
        let ok = target.accepts(&req, t1.plus(1));
        outsider_accepts += u64::from(ok);
        report.attempt(ok);
    }
    report.observe("outsider_random_acceptances", outsider_accepts);

    // a verbatim in-window replay is answered, but the answer keys nothing
    // the adversary can compute
    let replay_answer = target.answer(&seen.req, seen.req.t1.plus(2));
    report.observe("in_window_replay_answered", replay_answer.is_ok());
    if let Ok((resp, _)) = replay_answer {
        let vt = Validity16::issue(resp.t2, target.policy.vt_secs);
        for uid in &uids {
            for c in &cs {
                report.attempt(candidate_key(uid, &entry, c, &vt) == seen.key.sk);
            }
        }
    }
    report.observe("errors", json!(errors));
    report.note("the insider recovers the victim's UID from α with the shared server key; β still needs the victim's C");
    report
}

/// The adversary intercepts user 0's request and answers in place of the
/// server.
pub fn attack_server_impersonation(world: &World) -> AttackReport {
    let mut report = AttackReport::new("server-impersonation");
    let mut rng = scenario_rng(world, &report.attack_name);
    let target = Target::of(world, 0);
    let victim = Insider::of(world, 0);
    let insider = Insider::of(world, 1);
    let entry = insider.entry(&target.id);
    let delta_t = target.policy.delta_t;
    let t1 = world.now();
    let (req, ctx) = user_login_begin(&victim.id, &victim.pw, &victim.card, &target.id, t1).unwrap();
    let t2 = t1.plus(1);
    let t3 = t2.plus(1);

    let (honest, _) = target.answer(&req, t2).unwrap();
    report.observe("control_honest_response_accepted", user_handle_response(&ctx, &honest, t3, delta_t).is_ok());

    let mut errors = BTreeMap::new();
    let mut check = |report: &mut AttackReport, resp: &LoginResponse| {
        let r = user_handle_response(&ctx, resp, t3, delta_t);
        report.attempt(r.is_ok());
        tally(&mut errors, &r);
    };
    for _ in 0..1000 {
        let resp = LoginResponse {
            gamma: random_digest(&mut rng),
            sigma: random_digest(&mut rng),
            t2,
        };
        check(&mut report, &resp);
    }
    let recovered = recover_uid(&entry, &req);
    let uids = [recovered, insider.uid, req.alpha];
    let cs = [insider.c, req.alpha, req.beta, recovered, Digest256([0; 32]), random_digest(&mut rng)];
    for uid in &uids {
        for c in &cs {
            check(
                &mut report,
                &forge_response(uid, c, &entry, &req.beta, t1, t2, target.policy.vt_secs),
            );
        }
    }
    // an honest response to an earlier request of the same user, verbatim
    // and retimed
    let earlier = honest_session(&victim, &target, Timestamp32(t1.0 - 30));
    check(&mut report, &earlier.resp);
    check(&mut report, &LoginResponse { t2, ..earlier.resp });
    report.observe("errors", json!(errors));
    report
}

/// An insider who watched a session tries to compute its key.
pub fn attack_session_key_disclosure(world: &World) -> AttackReport {
    let mut report = AttackReport::new("session-key-disclosure");
    let target = Target::of(world, 0);
    let victim = Insider::of(world, 0);
    let insider = Insider::of(world, 1);
    let entry = insider.entry(&target.id);
    let s = honest_session(&victim, &target, world.now());

    let recovered = recover_uid(&entry, &s.req);
    let predicted_vt = Validity16::issue(s.resp.t2, target.policy.vt_secs);
    let gamma_vt = Validity16::from_bytes(s.resp.gamma.0[..16].try_into().unwrap());
    let uids = [recovered, insider.uid, s.req.alpha, s.req.beta];
    let cs = [
        insider.c,
        s.req.alpha,
        s.req.beta,
        s.resp.gamma,
        s.resp.sigma,
        recovered,
        Digest256([0; 32]),
    ];
    for uid in &uids {
        for c in &cs {
            for vt in [predicted_vt, gamma_vt] {
                report.attempt(candidate_key(uid, &entry, c, &vt) == s.key.sk);
            }
            // unmasking γ to the known (VT || Loc) would expose the mask
            let plain = s.resp.gamma ^ hash_fields(&[c, uid, &entry.id, &s.req.beta]);
            report.attempt(plain.0[16..] == *entry.loc.as_bytes());
        }
    }
    report.observe("vt_predictable_from_t2", predicted_vt == s.key.vt);
    report.observe("victim_uid_recovered", recovered == victim.uid);
    report.note("VT follows from the public T2 and the default lifetime, so key secrecy rests on C alone");
    report
}

/// The adversary holds user 0's card and identity and tries 10⁴ wrong
/// passwords, both through the card's check and by bypassing it.
pub fn attack_stolen_smart_card(world: &World) -> AttackReport {
    const GUESSES: usize = 10_000;
    let mut report = AttackReport::new("stolen-smart-card");
    let target = Target::of(world, 0);
    let victim = Insider::of(world, 0);
    let t1 = world.now();
    let mut errors = BTreeMap::new();
    let mut bypass_decoded = 0u64;
    for g in 0..GUESSES {
        let guess = PwField::new(&format!("guess-{g}")).unwrap();
        if guess == victim.pw {
            continue;
        }
        match user_login_begin(&victim.id, &guess, &victim.card, &target.id, t1) {
            Ok((req, _)) => report.attempt(target.accepts(&req, t1.plus(1))),
            Err(e) => {
                report.attempt(false);
                tally::<()>(&mut errors, &Err(e));
            }
        }
        // skip the E check and build a request from whatever the guess yields
        let a = hash_fields(&[&victim.id, &guess]);
        let (r1, r2) = (victim.card.w ^ a).split_nonces();
        let uid = hash_fields(&[&r1, &victim.id, &r2]);
        let list = list_mask(&victim.id, &guess, &r1, &r2, &victim.card.z);
        let c = victim.card.x
            ^ hash_fields(&[&crate::crypto::Xor16::of(&r2.0, victim.id.as_bytes())])
            ^ hash_fields(&[&crate::crypto::Xor16::of(&r1.0, guess.as_bytes())]);
        let entry = match ServerListEntry::decode_list(&list) {
            Ok(l) => {
                bypass_decoded += 1;
                l[0]
            }
            Err(_) => ServerListEntry {
                id: target.id,
                ssk: Digest256::from_slice(&list[16..48]).unwrap(),
                loc: target.loc,
            },
        };
        report.attempt(target.accepts(&forge_request(&uid, &c, &entry, t1), t1.plus(1)));
    }
    let true_pw_opens = user_login_begin(&victim.id, &victim.pw, &victim.card, &target.id, t1).is_ok();
    report.observe("errors", json!(errors));
    report.observe("bypass_lists_decoded", bypass_decoded);
    report.observe("card_and_id_confirm_true_password", true_pw_opens);
    report.note("with the card and the identity, E is an offline check for one guessed password");
    report
}

/// Every single-bit flip of one honest exchange, sent through the network
/// simulator.
pub fn attack_modification(world: &World) -> AttackReport {
    let mut report = AttackReport::new("modification");
    let (user, server) = (world.user_ids()[0], world.server_ids()[0]);
    let delta_t = world.config().delta_t;
    let mut per_field: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for (message, fields) in [(0, WireField::REQUEST), (1, WireField::RESPONSE)] {
        for field in fields {
            for byte in 0..field.width() {
                for bit in 0..8 {
                    let action = AdversaryAction::ModifyBit { field, byte, bit };
                    let script = if message == 0 {
                        AdversaryScript::on_request(action)
                    } else {
                        AdversaryScript::on_response(action)
                    };
                    let out = world
                        .clone()
                        .run_with_adversary(user.as_str(), server.as_str(), &script, delta_t)
                        .expect("valid script");
                    // a flipped request the server answers is already a break
                    let accepted = out.accepted || (message == 0 && out.server_acceptances > 0);
                    report.attempt(accepted);
                    let kind = out.error.map_or("Accepted".to_owned(), |e| e.to_string());
                    *per_field
                        .entry(format!("{field:?}").to_lowercase())
                        .or_default()
                        .entry(kind)
                        .or_default() += 1;
                }
            }
        }
    }
    report.observe("bits_flipped", report.attempts);
    report.observe("outcomes_by_field", json!(per_field));
    report
}

/// Probability that `Bin(n, p)` is at least `k`.
pub fn binomial_upper_tail(n: u64, p: f64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut pmf = (1.0 - p).powf(n as f64);
    let mut below = 0.0;
    for i in 0..k.min(n + 1) {
        below += pmf;
        pmf *= (n - i) as f64 / (i + 1) as f64 * p / (1.0 - p);
    }
    (1.0 - below).max(0.0)
}

/// An eavesdropper with the victim's identity and one transcript ranks a
/// 1000-word dictionary by how many candidate equations each guess satisfies.
pub fn attack_password_guessing(world: &World) -> AttackReport {
    const TRIALS: usize = 200;
    let mut report = AttackReport::new("password-guessing");
    let mut rng = scenario_rng(world, &report.attack_name);
    let dictionary: Vec<PwField> = (0..PASSWORD_SPACE)
        .map(|i| PwField::new(&format!("pw-{i:03}")).unwrap())
        .collect();
    let mut w = world.clone();
    let mut secrets = Vec::with_capacity(TRIALS);
    for t in 0..TRIALS {
        let pick = rng.gen_range(0..PASSWORD_SPACE);
        let id = format!("guess-victim{t}");
        w.add_user(&id, dictionary[pick].as_str()).unwrap();
        secrets.push((IdField::new(&id).unwrap(), pick));
    }
    w.advance_and_sync(1).unwrap();
    let server = w.server_ids()[0];
    let loc = w.server(server.as_str()).unwrap().secrets.loc;

    let mut successes = 0u64;
    let mut confirmations = 0u64;
    for (id, truth) in &secrets {
        let out = w.run_honest_session(id.as_str(), server.as_str(), w.config().delta_t).unwrap();
        let (req, resp) = (out.login_request().unwrap(), out.login_response().unwrap());
        let public = [req.alpha, req.beta, resp.gamma, resp.sigma];
        let mut best = (0usize, Vec::new());
        for (i, guess) in dictionary.iter().enumerate() {
            let a = hash_fields(&[id, guess]);
            let with_t1 = hash_fields(&[id, guess, &req.t1]);
            let chained = hash_fields(&[&a, &req.t1]);
            let score = public.iter().filter(|v| **v == a || **v == with_t1 || **v == chained).count()
                + usize::from(a ^ req.alpha == req.beta)
                + usize::from((resp.gamma ^ a).0[16..] == *loc.as_bytes());
            if score > 0 {
                confirmations += 1;
            }
            match score.cmp(&best.0) {
                std::cmp::Ordering::Greater => best = (score, vec![i]),
                std::cmp::Ordering::Equal => best.1.push(i),
                std::cmp::Ordering::Less => {}
            }
        }
        let pick = best.1[rng.gen_range(0..best.1.len())];
        successes += u64::from(pick == *truth);
        report.attempts += 1;
    }
    let p_value = binomial_upper_tail(TRIALS as u64, 1.0 / PASSWORD_SPACE as f64, successes);
    report.acceptances = confirmations;
    report.observe("trials", TRIALS as u64);
    report.observe("password_space", PASSWORD_SPACE as u64);
    report.observe("successes", successes);
    report.observe("equations_confirmed", confirmations);
    report.observe("binomial_p_value", p_value);
    report.observe("indistinguishable_from_chance", p_value >= GUESSING_ALPHA);
    report.note("acceptances counts guesses confirmed by any transcript equation");
    report
}

/// An active relay redirects, splices and reflects the victim's frames.
pub fn attack_mitm(world: &World) -> AttackReport {
    let mut report = AttackReport::new("mitm");
    let (s0, s1) = (Target::of(world, 0), Target::of(world, 1));
    let victim = Insider::of(world, 0);
    let other = Insider::of(world, 1);
    let delta_t = s0.policy.delta_t;
    let t = world.now();
    let a = honest_session(&victim, &s0, t);
    let b = honest_session(&victim, &s0, t.plus(2));
    let mut errors = BTreeMap::new();
    let mut server_try = |report: &mut AttackReport, target: &Target, req: LoginRequest, at: Timestamp32| {
        let r = target.answer(&req, at);
        report.attempt(r.is_ok());
        tally(&mut errors, &r);
    };
    // a request for one server redirected to another
    server_try(&mut report, &s1, a.req, a.req.t1.plus(1));
    // halves of two sessions spliced together
    for t1 in [a.req.t1, b.req.t1] {
        server_try(&mut report, &s0, LoginRequest { alpha: a.req.alpha, beta: b.req.beta, t1 }, t1.plus(1));
        server_try(&mut report, &s0, LoginRequest { alpha: b.req.alpha, beta: a.req.beta, t1 }, t1.plus(1));
    }

    let (req, ctx) = user_login_begin(&victim.id, &victim.pw, &victim.card, &s0.id, t.plus(4)).unwrap();
    let (other_req, _) = user_login_begin(&other.id, &other.pw, &other.card, &s0.id, t.plus(4)).unwrap();
    let (other_resp, _) = s0.answer(&other_req, t.plus(5)).unwrap();
    let responses = [
        // reflection of the request
        LoginResponse { gamma: req.alpha, sigma: req.beta, t2: req.t1.plus(1) },
        // another user's concurrent answer
        other_resp,
        // the answers of earlier sessions, retimed
        LoginResponse { t2: t.plus(5), ..a.resp },
        LoginResponse { gamma: a.resp.gamma, sigma: b.resp.sigma, t2: t.plus(5) },
    ];
    let mut user_errors = BTreeMap::new();
    for resp in responses {
        let r = user_handle_response(&ctx, &resp, t.plus(6), delta_t);
        report.attempt(r.is_ok());
        tally(&mut user_errors, &r);
    }
    // the relay forwards honestly and then guesses the key from what it saw
    let vt = Validity16::issue(a.resp.t2, s0.policy.vt_secs);
    let entry = other.entry(&s0.id);
    for uid in [a.req.alpha, a.req.beta] {
        for c in [a.req.beta, a.resp.gamma, a.resp.sigma] {
            report.attempt(candidate_key(&uid, &entry, &c, &vt) == a.key.sk);
        }
    }
    report.observe("server_errors", json!(errors));
    report.observe("user_errors", json!(user_errors));
    report
}

/// Delayed, retimed and cross-session replays, 1000 trials per variant.
pub fn attack_replay(world: &World) -> AttackReport {
    const TRIALS: u32 = 1000;
    let mut report = AttackReport::new("replay");
    let target = Target::of(world, 0);
    let victim = Insider::of(world, 0);
    let insider = Insider::of(world, 1);
    let entry = insider.entry(&target.id);
    let delta_t = target.policy.delta_t;
    let mut cached = target.policy;
    cached.replay_cache = true;

    let mut outcomes: BTreeMap<&str, BTreeMap<String, u64>> = BTreeMap::new();
    let mut in_window_answered = 0u64;
    let mut prev: Option<Session> = None;
    for k in 0..TRIALS {
        let t1 = world.now().plus(k * 20);
        let s = honest_session(&victim, &target, t1);

        let late = t1.plus(delta_t + 1 + k % 7);
        let r = target.answer(&s.req, late);
        report.attempt(r.is_ok());
        tally(outcomes.entry("verbatim_after_window").or_default(), &r);

        let shifted = t1.plus(1 + k % delta_t.max(1));
        let naive = LoginRequest { t1: shifted, ..s.req };
        let r = target.answer(&naive, shifted.plus(1));
        report.attempt(r.is_ok());
        tally(outcomes.entry("t1_rewrite").or_default(), &r);

        // an insider with SSK_j re-derives α for the new T1; β keeps the old one
        let uid = recover_uid(&entry, &s.req);
        let realigned = LoginRequest {
            alpha: hash_fields(&[&entry.id, &entry.ssk, &shifted]) ^ uid,
            beta: s.req.beta,
            t1: shifted,
        };
        let r = target.answer(&realigned, shifted.plus(1));
        report.attempt(r.is_ok());
        tally(outcomes.entry("t1_rewrite_realigned").or_default(), &r);

        let mut cache = crate::protocol::ReplayCache::new();
        let at = t1.plus(2);
        let first = crate::protocol::server_handle_login_cached(
            &target.trm, &target.id, &target.loc, &s.req, t1.plus(1), &cached, &mut cache,
        );
        debug_assert!(first.is_ok());
        let r = crate::protocol::server_handle_login_cached(
            &target.trm, &target.id, &target.loc, &s.req, at, &cached, &mut cache,
        );
        report.attempt(r.is_ok());
        tally(outcomes.entry("verbatim_in_window_cached").or_default(), &r);
        in_window_answered += u64::from(target.accepts(&s.req, at));

        if let Some(p) = &prev {
            let resp = LoginResponse { t2: s.resp.t2, ..p.resp };
            let r = user_handle_response(&s.ctx, &resp, s.resp.t2.plus(1), delta_t);
            report.attempt(r.is_ok());
            tally(outcomes.entry("old_response").or_default(), &r);
            let r = user_handle_response(&s.ctx, &s.resp, s.resp.t2.plus(delta_t + 1), delta_t);
            report.attempt(r.is_ok());
            tally(outcomes.entry("response_after_window").or_default(), &r);
        }
        prev = Some(s);
    }
    report.observe("trials_per_variant", u64::from(TRIALS));
    report.observe("outcomes", json!(outcomes));
    report.observe("in_window_verbatim_answered_without_cache", in_window_answered);
    report.note("without the (β, T1) cache a verbatim in-window replay is answered, but its key needs the victim's C");
    report
}

/// A registered user tries to get service from every server as another
/// registered user.
pub fn attack_insider(world: &World) -> AttackReport {
    let mut report = AttackReport::new("insider");
    let mut rng = scenario_rng(world, &report.attack_name);
    let victim = Insider::of(world, 0);
    let insider = Insider::of(world, 1);
    let t = world.now();
    let mut uid_recovered = 0u64;
    for j in 0..world.server_ids().len() {
        let target = Target::of(world, j);
        let entry = insider.entry(&target.id);
        let s = honest_session(&victim, &target, t);
        let uid = recover_uid(&entry, &s.req);
        uid_recovered += u64::from(uid == victim.uid);
        // everything the insider can derive from own card and the transcript
        let own_a = hash_fields(&[&insider.id, &insider.pw]);
        let cs = [
            insider.c,
            insider.c ^ insider.uid ^ uid,
            hash_fields(&[&uid, &own_a]),
            insider.card.x ^ insider.card.y,
            s.req.beta,
            s.resp.sigma,
            random_digest(&mut rng),
        ];
        let t1 = t.plus(2);
        for c in &cs {
            report.attempt(target.accepts(&forge_request(&uid, c, &entry, t1), t1.plus(1)));
            let vt = Validity16::issue(s.resp.t2, target.policy.vt_secs);
            report.attempt(candidate_key(&uid, &entry, c, &vt) == s.key.sk);
        }
    }
    report.observe("servers_attacked", world.server_ids().len() as u64);
    report.observe("victim_uid_recovered_on_servers", uid_recovered);
    report.note("any registered user unmasks other users' UIDs from captured α; anonymity holds only against outsiders");
    report
}

/// Floods one server with forged requests and counts the hashes spent on
/// each rejection.
pub fn attack_dos(world: &World) -> AttackReport {
    const FLOOD: usize = 1000;
    let mut report = AttackReport::new("dos");
    let mut rng = scenario_rng(world, &report.attack_name);
    let target = Target::of(world, 0);
    let victim = Insider::of(world, 0);
    let insider = Insider::of(world, 1);
    let entry = insider.entry(&target.id);
    let t = world.now();
    let seen = honest_session(&victim, &target, t);
    let uid = recover_uid(&entry, &seen.req);

    let mut spent: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    let mut measure = |report: &mut AttackReport, class: &'static str, req: LoginRequest, at: Timestamp32| {
        let (r, cost) = count_hashes(|| target.answer(&req, at));
        report.attempt(r.is_ok());
        let e = spent.entry(class).or_insert((u64::MAX, 0));
        e.0 = e.0.min(cost.protocol);
        e.1 = e.1.max(cost.protocol);
    };
    for k in 0..FLOOD {
        let t1 = t.plus(1 + (k as u32 % 3));
        let at = t1.plus(1);
        let mut bad_beta = seen.req;
        bad_beta.beta.0[k % 32] ^= 1 << (k % 8);
        measure(&mut report, "bad_beta", bad_beta, seen.req.t1.plus(1));
        let realigned = LoginRequest {
            alpha: hash_fields(&[&entry.id, &entry.ssk, &t1]) ^ uid,
            beta: random_digest(&mut rng),
            t1,
        };
        measure(&mut report, "bad_beta_retimed", realigned, at);
        let random = LoginRequest {
            alpha: random_digest(&mut rng),
            beta: random_digest(&mut rng),
            t1,
        };
        measure(&mut report, "unknown_user", random, at);
        measure(&mut report, "stale", LoginRequest { t1: t, ..random }, t.plus(target.policy.delta_t + 1));
    }
    for (class, (lo, hi)) in spent {
        report.observe(&format!("{class}_hashes_min"), lo);
        report.observe(&format!("{class}_hashes_max"), hi);
    }
    report
}

/// Reveals one session key and its transcript, then tries to compute the
/// key of a later session between the same parties.
pub fn check_forward_secrecy(world: &World) -> AttackReport {
    let mut report = AttackReport::new("forward-secrecy");
    let target = Target::of(world, 0);
    let victim = Insider::of(world, 0);
    let insider = Insider::of(world, 1);
    let entry = insider.entry(&target.id);
    let t = world.now();
    let first = honest_session(&victim, &target, t);
    let second = honest_session(&victim, &target, t.plus(60));
    let uid = recover_uid(&entry, &second.req);
    let vt2 = Validity16::issue(second.resp.t2, target.policy.vt_secs);
    let sk1 = first.key.sk;

    let mut candidates = vec![
        sk1,
        sk1 ^ first.req.alpha ^ second.req.alpha,
        sk1 ^ first.req.beta ^ second.req.beta,
        sk1 ^ first.resp.gamma ^ second.resp.gamma,
        hash_fields(&[&sk1, &vt2]),
        hash_fields(&[&sk1, &second.req.t1]),
    ];
    for c in [sk1, first.req.beta, first.resp.sigma, second.req.beta, insider.c] {
        candidates.push(candidate_key(&uid, &entry, &c, &vt2));
    }
    for cand in candidates {
        report.attempt(cand == second.key.sk);
    }
    // the earlier key from the victim's long-term pair, for the record
    let vt1 = Validity16::issue(first.resp.t2, target.policy.vt_secs);
    let from_long_term = candidate_key(&victim.uid, &entry, &first.ctx.c, &vt1) == sk1;
    report.observe("long_term_uid_and_c_recover_past_keys", from_long_term);
    report.note("keys carry no ephemeral secret: whoever learns a user's (UID, C) can recompute every past key");
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_tail_values() {
        assert_eq!(binomial_upper_tail(200, 0.001, 0), 1.0);
        let p1 = 1.0 - 0.999f64.powi(200);
        assert!((binomial_upper_tail(200, 0.001, 1) - p1).abs() < 1e-12);
        // Bin(10, 0.5) ≥ 8 = 56/1024
        assert!((binomial_upper_tail(10, 0.5, 8) - 56.0 / 1024.0).abs() < 1e-12);
        assert!(binomial_upper_tail(200, 0.001, 3) < GUESSING_ALPHA);
    }

    #[test]
    fn unknown_name_rejected() {
        let w = standard_world(1);
        assert!(run_attack("timing", &w).is_err());
    }

    #[test]
    fn dos_costs_two_hashes_on_bad_beta() {
        let r = attack_dos(&standard_world(2));
        assert_eq!(r.acceptances, 0);
        assert_eq!(r.observations["bad_beta_hashes_min"], 2);
        assert_eq!(r.observations["bad_beta_hashes_max"], 2);
        assert_eq!(r.observations["bad_beta_retimed_hashes_max"], 2);
        assert_eq!(r.observations["unknown_user_hashes_max"], 1);
        assert_eq!(r.observations["stale_hashes_max"], 0);
    }

    #[test]
    fn impersonation_controls_work() {
        let r = attack_user_impersonation(&standard_world(3));
        assert_eq!(r.acceptances, 0);
        assert_eq!(r.observations["control_own_credentials_accepted"], true);
        let r = attack_server_impersonation(&standard_world(3));
        assert_eq!(r.acceptances, 0);
        assert_eq!(r.observations["control_honest_response_accepted"], true);
    }

    #[test]
    fn every_scenario_resists() {
        let w = standard_world(11);
        for r in run_all(&w) {
            assert!(r.attempts > 0, "{}", r.attack_name);
            assert_eq!(r.acceptances, 0, "{}: {:?}", r.attack_name, r.observations);
        }
    }
}
