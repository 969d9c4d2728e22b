//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use maskap_core::attacks::{self, GUESSING_ALPHA};
use maskap_core::crypto::{count_hashes, hash, keystream_mask, xor, Timestamp32};
use maskap_core::netsim::{populated_world, AdversaryAction, AdversaryScript, WireField, World};
use maskap_core::protocol::{
    rc_handle_db_update, rc_handle_update, server_db_update_begin, server_handle_login,
    user_handle_response, user_login_begin, user_update_begin, LoginRequest, ProtocolError,
    SessionPolicy,
};
use maskap_core::registry::{self, ServerState};
use maskap_core::service::{self, FixedClock, ScriptedClock, ServerRole};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_text(rng: &mut impl Rng, max: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_.@ ";
    let len = rng.gen_range(1..=max);
    (0..len)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
        .collect()
}

fn ac1_honest_agreement() -> Check {
    const SESSIONS: usize = 1000;
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut agreed = 0;
    for k in 0..SESSIONS {
        let mut w = World::new(rng.next_u64());
        let n = rng.gen_range(1..=5);
        let mut servers = Vec::new();
        for j in 0..n {
            let id = format!("{}{j}", random_text(&mut rng, 14));
            w.add_server(&id, &random_text(&mut rng, 16), &random_text(&mut rng, 16))
                .map_err(|e| e.to_string())?;
            servers.push(id);
        }
        let (user, pw) = (random_text(&mut rng, 16), random_text(&mut rng, 16));
        w.add_user(&user, &pw).map_err(|e| e.to_string())?;
        w.advance_and_sync(1).map_err(|e| e.to_string())?;
        let target = &servers[rng.gen_range(0..n)];
        let out = w.run_honest_session(&user, target, 5).map_err(|e| e.to_string())?;
        let (u, s) = out
            .session_keys
            .ok_or_else(|| format!("session {k} rejected: {:?}", out.error))?;
        ensure(out.accepted && u.sk.0 == s.sk.0, || format!("session {k} keys differ"))?;
        agreed += 1;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:.2?}"))?;
    Ok(format!("{agreed}/{SESSIONS} sessions agreed bitwise in {elapsed:.2?}"))
}

fn ac2_communication() -> Check {
    let mut w = populated_world(2, 1, 1);
    let out = w.run_honest_session("user0", "srv0", 5).map_err(|e| e.to_string())?;
    let req = out.transcript[0].bytes.len();
    let resp = out.transcript[1].bytes.len();
    ensure(req == 68 && resp == 68 && req + resp == 136, || {
        format!("request {req}, response {resp}")
    })?;
    Ok(format!("request {req} + response {resp} = {} bytes", req + resp))
}

fn ac3_execution() -> Check {
    let w = populated_world(3, 1, 1);
    let user = w.user("user0").unwrap();
    let server = w.server("srv0").unwrap();
    let policy = SessionPolicy::default();
    let t1 = w.now();
    let (agreed, tally) = count_hashes(|| {
        let (req, ctx) = user_login_begin(&user.id, &user.pw, &user.card, &server.secrets.id, t1).unwrap();
        let (resp, sk_server) =
            server_handle_login(&server.trm, &server.secrets.id, &server.secrets.loc, &req, t1.plus(1), &policy)
                .unwrap();
        let sk_user = user_handle_response(&ctx, &resp, t1.plus(2), 5).unwrap();
        sk_user == sk_server
    });
    ensure(agreed, || "keys differ".into())?;
    ensure(tally.protocol == 20, || format!("{} protocol hashes", tally.protocol))?;
    let costs = maskap_core::metrics::measure_costs(3, 1, 101);
    let median = maskap_core::metrics::find(&costs, maskap_core::metrics::PHASE_AUTHENTICATION)
        .and_then(|c| c.wall_time_ms)
        .unwrap_or(f64::NAN);
    Ok(format!(
        "{} protocol hashes (keystream blocks {} reported apart), median {median:.4} ms over 101 runs",
        tally.protocol, tally.keystream
    ))
}

fn ac4_storage() -> Check {
    let mut sizes = Vec::new();
    for n in 1..=3usize {
        let w = populated_world(4, n, 1);
        let bytes = w.user("user0").unwrap().card.storage_bytes();
        ensure(bytes == 4 * 32 + 64 * n, || format!("n={n}: {bytes} bytes"))?;
        sizes.push(format!("n={n}: {bytes}"));
    }
    Ok(format!(
        "{} bytes (published figure {} counts the list as one digest)",
        sizes.join(", "),
        maskap_core::metrics::PUBLISHED_CARD_BYTES
    ))
}

fn ac5_attacks() -> Check {
    let start = Instant::now();
    let reports = attacks::run_all(&attacks::standard_world(5));
    let elapsed = start.elapsed();
    ensure(reports.len() == 11, || format!("{} scenarios", reports.len()))?;
    for r in &reports {
        ensure(r.acceptances == 0, || format!("{} accepted {} times", r.attack_name, r.acceptances))?;
    }
    let dos = reports.iter().find(|r| r.attack_name == "dos").unwrap();
    for key in ["bad_beta_hashes_min", "bad_beta_hashes_max"] {
        ensure(dos.observations[key] == 2, || format!("dos {key} = {}", dos.observations[key]))?;
    }
    let pg = reports.iter().find(|r| r.attack_name == "password-guessing").unwrap();
    let p = pg.observations["binomial_p_value"].as_f64().unwrap_or(0.0);
    ensure(p >= GUESSING_ALPHA, || format!("guessing p-value {p}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.2?}"))?;
    let attempts: u64 = reports.iter().map(|r| r.attempts).sum();
    Ok(format!(
        "11 scenarios, {attempts} attempts, 0 acceptances; DoS rejects a bad β after 2 hashes; guessing p={p:.3}; {elapsed:.2?}"
    ))
}

fn ac6_tamper() -> Check {
    let w = populated_world(6, 2, 2);
    let mut flips = 0;
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
                    let out = w
                        .clone()
                        .run_with_adversary("user1", "srv1", &script, 5)
                        .map_err(|e| e.to_string())?;
                    let server_took_it = message == 0 && out.server_acceptances > 0;
                    ensure(!out.accepted && !server_took_it, || {
                        format!("{field:?} byte {byte} bit {bit} accepted")
                    })?;
                    flips += 1;
                }
            }
        }
    }
    ensure(flips == 8 * 136, || format!("{flips} flips"))?;
    Ok(format!("{flips}/{flips} single-bit flips rejected"))
}

fn ac7_replay() -> Check {
    const TRIALS: u32 = 1000;
    let w = populated_world(7, 1, 1);
    let user = w.user("user0").unwrap();
    let server = w.server("srv0").unwrap();
    let (id_j, ssk) = (server.secrets.id, server.trm.ssk);
    let policy = SessionPolicy::default();
    let answer = |req: &LoginRequest, at: Timestamp32| {
        server_handle_login(&server.trm, &id_j, &server.secrets.loc, req, at, &policy)
    };
    let (mut stale, mut beta_mismatch) = (0, 0);
    for k in 0..TRIALS {
        let t1 = w.now().plus(k * 30);
        let (req, _) = user_login_begin(&user.id, &user.pw, &user.card, &id_j, t1).unwrap();
        ensure(answer(&req, t1.plus(1)).is_ok(), || "honest request refused".into())?;
        if answer(&req, t1.plus(policy.delta_t + 1 + k % 10)) == Err(ProtocolError::StaleRequest) {
            stale += 1;
        }
        // rewritten T1 with α realigned, β left as captured
        let t1x = t1.plus(1 + k % policy.delta_t);
        let uid = maskap_core::crypto::hash_fields(&[&id_j, &ssk, &t1]) ^ req.alpha;
        let forged = LoginRequest {
            alpha: maskap_core::crypto::hash_fields(&[&id_j, &ssk, &t1x]) ^ uid,
            beta: req.beta,
            t1: t1x,
        };
        if answer(&forged, t1x.plus(1)) == Err(ProtocolError::AuthFail) {
            beta_mismatch += 1;
        }
    }
    ensure(stale == TRIALS && beta_mismatch == TRIALS, || {
        format!("stale {stale}/{TRIALS}, β mismatch {beta_mismatch}/{TRIALS}")
    })?;
    Ok(format!(
        "verbatim after window rejected {stale}/{TRIALS}; in-window timestamp rewrite rejected by β {beta_mismatch}/{TRIALS}"
    ))
}

fn ac8_primitives() -> Check {
    let vectors: [(&[u8], &str); 3] = [
        (b"", "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"),
        (b"abc", "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"),
        (
            b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq",
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1",
        ),
    ];
    for (msg, want) in vectors {
        ensure(hash(msg).to_hex() == want, || format!("digest of {msg:?}"))?;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    const CASES: usize = 10_000;
    for _ in 0..CASES {
        let len = rng.gen_range(0..512);
        let mut a = vec![0u8; len];
        let mut b = vec![0u8; len];
        rng.fill_bytes(&mut a);
        rng.fill_bytes(&mut b);
        let ab = xor(&a, &b).unwrap();
        ensure(xor(&ab, &b).unwrap() == a, || "xor involution".into())?;
        ensure(ab == xor(&b, &a).unwrap(), || "xor commutativity".into())?;
        ensure(xor(&a, &a).unwrap().iter().all(|&x| x == 0), || "xor self-inverse".into())?;
        let key = maskap_core::crypto::Digest256::random(&mut rng);
        ensure(keystream_mask(&key, &keystream_mask(&key, &a)) == a, || "keystream involution".into())?;
    }
    Ok(format!("3 FIPS 180-4 vectors; {CASES} random XOR and keystream cases"))
}

fn ac9_updates() -> Check {
    let mut w = populated_world(9, 1, 1);
    w.add_server("added", "added-pw", "annex").map_err(|e| e.to_string())?;
    let before = w.run_honest_session("user0", "added", 5).map_err(|e| e.to_string())?;
    ensure(!before.accepted, || "reached unlisted server".into())?;
    w.update_card("user0").map_err(|e| e.to_string())?;
    let after = w.run_honest_session("user0", "added", 5).map_err(|e| e.to_string())?;
    ensure(after.accepted, || format!("login after update: {:?}", after.error))?;

    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let mut rounds = Vec::new();
    for round in 0..5 {
        let k = rng.gen_range(0..5);
        for i in 0..k {
            w.add_user(&format!("r{round}u{i}"), "pw").map_err(|e| e.to_string())?;
        }
        for sid in w.server_ids() {
            let pulled = w.sync_server(&sid).map_err(|e| e.to_string())?;
            ensure(pulled == k, || format!("server {sid} pulled {pulled}, expected {k}"))?;
        }
        rounds.push(k.to_string());
    }

    let delta_t = 5;
    let user = w.user("user0").unwrap();
    let t4 = w.now();
    let (upd, _) = user_update_begin(&user.id, &user.pw, &user.card, t4).unwrap();
    let late = rc_handle_update(w.rc(), &upd, t4.plus(delta_t + 1), delta_t);
    ensure(late == Err(ProtocolError::StaleRequest), || format!("stale T4 gave {late:?}"))?;
    let node = w.server("srv0").unwrap();
    let db = server_db_update_begin(&node.secrets, &node.trm.ssk, t4);
    let mut rc = w.rc().clone();
    let late = rc_handle_db_update(&mut rc, &db, t4.plus(delta_t + 1), delta_t);
    ensure(late == Err(ProtocolError::StaleRequest), || format!("stale T6 gave {late:?}"))?;
    Ok(format!(
        "update then login to new server ok; sync deltas [{}] matched; stale T4 and T6 rejected",
        rounds.join(", ")
    ))
}

fn ac10_persistence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let mut files = 0;
    for k in 0..100 {
        let w = populated_world(rng.next_u64(), rng.gen_range(1..4), rng.gen_range(0..4));
        let path = dir.path().join(format!("rc{k}.json"));
        registry::store_rc(&path, w.rc()).map_err(|e| e.to_string())?;
        ensure(registry::load_rc(&path).map_err(|e| e.to_string())? == *w.rc(), || format!("rc state {k}"))?;
        files += 1;
        for sid in w.server_ids() {
            let node = w.server(sid.as_str()).unwrap();
            let state = ServerState { id: sid, loc: node.secrets.loc, trm: node.trm.clone() };
            let path = dir.path().join(format!("trm{k}-{sid}.json"));
            registry::store_trm(&path, &state).map_err(|e| e.to_string())?;
            ensure(registry::load_trm(&path).map_err(|e| e.to_string())? == state, || format!("trm {k}"))?;
            files += 1;
        }
        for uid in w.user_ids() {
            let card = &w.user(uid.as_str()).unwrap().card;
            let path = dir.path().join(format!("card{k}-{uid}.json"));
            registry::store_card(&path, card).map_err(|e| e.to_string())?;
            ensure(registry::load_card(&path).map_err(|e| e.to_string())? == *card, || format!("card {k}"))?;
            files += 1;
        }
    }

    let mut agreements = 0;
    for seed in 0..5u64 {
        let world = populated_world(1000 + seed, 2, 2);
        let t1 = world.now();
        let (sim_key, _) = world
            .clone()
            .run_honest_session("user1", "srv1", 5)
            .map_err(|e| e.to_string())?
            .session_keys
            .ok_or("simulated session rejected")?;
        let node = world.server("srv1").unwrap();
        let role = ServerRole::new(
            node.secrets.id,
            node.secrets.loc,
            node.trm.clone(),
            SessionPolicy::default(),
            Box::new(FixedClock(t1.plus(1))),
        );
        let handle = service::spawn("127.0.0.1:0", Arc::new(role)).map_err(|e| e.to_string())?;
        let user = world.user("user1").unwrap();
        let clock = ScriptedClock::new([t1, t1.plus(2)]);
        let key = service::authenticate(handle.addr(), &user.id, &user.pw, &user.card, &node.secrets.id, 5, &clock)
            .map_err(|e| e.to_string())?;
        ensure(key == sim_key, || format!("seed {seed}: service and simulator keys differ"))?;
        handle.shutdown();
        agreements += 1;
    }
    Ok(format!(
        "{files} files over 100 random states round-tripped; service and simulator keys equal for {agreements}/5 seeds"
    ))
}

type Criterion = (&'static str, &'static str, fn() -> Check);

fn main() {
    let criteria: [Criterion; 10] = [
        ("AC1", "honest key agreement", ac1_honest_agreement),
        ("AC2", "communication cost", ac2_communication),
        ("AC3", "execution cost", ac3_execution),
        ("AC4", "storage cost", ac4_storage),
        ("AC5", "attack suite", ac5_attacks),
        ("AC6", "tamper exhaustion", ac6_tamper),
        ("AC7", "replay", ac7_replay),
        ("AC8", "primitive correctness", ac8_primitives),
        ("AC9", "update phases", ac9_updates),
        ("AC10", "persistence and transport independence", ac10_persistence),
    ];
    let mut failed = 0;
    for (tag, name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("{tag} PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("{tag} FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("{tag} FAIL {name}: panicked");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
