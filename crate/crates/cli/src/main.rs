use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};

use maskap_core::attacks::{self, AttackReport};
use maskap_core::crypto::{fingerprint, IdField, LocField, PwField, Timestamp32};
use maskap_core::metrics::{self, CostReport};
use maskap_core::protocol::{
    rc_handle_db_update, rc_handle_update, rc_register_server, rc_register_user,
    server_db_update_from_parts, server_handle_login, server_register_begin,
    user_apply_server_list, user_finalize_card, user_handle_response, user_login_begin,
    user_register_begin, user_update_begin, DbUpdateRequest, LoginRequest, LoginResponse,
    ProtocolError, RcState, SessionKey, SessionPolicy, UpdateRequest,
};
use maskap_core::registry::{self, ServerState};
use maskap_core::service::{self, Clock, RcRole, ServerRole, SystemClock};

/// Multi-server smart-card authentication: registration center, servers and
/// users backed by JSON state files.
#[derive(Debug, Parser)]
#[command(name = "maskap", version)]
struct Cli {
    /// Registration center database.
    #[arg(long, global = true)]
    rc: Option<PathBuf>,
    /// User smart card file.
    #[arg(long, global = true)]
    card: Option<PathBuf>,
    /// Server tamper-resistant memory file.
    #[arg(long, global = true)]
    trm: Option<PathBuf>,
    /// Freshness window in seconds.
    #[arg(long, global = true, default_value_t = 5)]
    delta_t: u32,
    /// Session key lifetime in seconds.
    #[arg(long, global = true, default_value_t = 900)]
    vt: u64,
    /// Seed for every random draw; fresh entropy when absent.
    #[arg(long, global = true, env = "MASKAP_SEED")]
    seed: Option<u64>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create an empty registration center database with a fresh master key.
    RcInit {
        /// Replace an existing database.
        #[arg(long)]
        force: bool,
    },
    /// Enroll a server and write its provisioned memory.
    RegisterServer {
        #[arg(long)]
        id: String,
        #[arg(long)]
        password: String,
        #[arg(long)]
        loc: String,
    },
    /// Enroll a user and write the smart card.
    RegisterUser {
        #[arg(long)]
        id: String,
        #[arg(long)]
        password: String,
    },
    /// Log in to a server and derive a session key.
    Authenticate {
        #[arg(long)]
        id: String,
        #[arg(long)]
        password: String,
        /// Target server; defaults to the server in --trm.
        #[arg(long)]
        server: Option<String>,
        /// Sync the server from --rc first, using this server password.
        #[arg(long)]
        server_password: Option<String>,
        /// Address of a served server role instead of local files.
        #[arg(long)]
        connect: Option<String>,
    },
    /// Refresh the card's server list from the registration center.
    UpdateCard {
        #[arg(long)]
        id: String,
        #[arg(long)]
        password: String,
        /// Address of a served RC role instead of --rc.
        #[arg(long)]
        connect: Option<String>,
    },
    /// Pull users registered since the server's last sync.
    SyncServer {
        /// The server's own password.
        #[arg(long)]
        password: String,
        /// Address of a served RC role instead of --rc.
        #[arg(long)]
        connect: Option<String>,
    },
    /// Run a scripted attack against a fresh simulated deployment.
    Attack {
        /// Attack name, or `all`.
        name: String,
    },
    /// Measure per-phase hash, byte and time costs.
    Bench {
        #[arg(long, default_value_t = 1)]
        servers: usize,
        #[arg(long, default_value_t = 101)]
        runs: usize,
    },
    /// Print encoded message and card sizes.
    Sizes {
        #[arg(long, default_value_t = 1)]
        servers: usize,
    },
    /// Serve a role over TCP until killed.
    Serve {
        #[arg(long, value_enum)]
        role: Role,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Role {
    Rc,
    Server,
}

impl Cli {
    fn rng(&self) -> ChaCha20Rng {
        match self.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        }
    }

    fn policy(&self) -> SessionPolicy {
        SessionPolicy {
            delta_t: self.delta_t,
            vt_secs: self.vt,
            replay_cache: false,
        }
    }

    fn rc_path(&self) -> Result<&Path> {
        self.rc.as_deref().context("--rc <path> is required")
    }

    fn card_path(&self) -> Result<&Path> {
        self.card.as_deref().context("--card <path> is required")
    }

    fn trm_path(&self) -> Result<&Path> {
        self.trm.as_deref().context("--trm <path> is required")
    }
}

fn id(s: &str) -> Result<IdField> {
    IdField::new(s).with_context(|| format!("invalid identity {s:?}"))
}

fn pw(s: &str) -> Result<PwField> {
    PwField::new(s).context("invalid password")
}

fn key_json(key: &SessionKey) -> Value {
    json!({
        "server": key.peer_id.as_str(),
        "session_key_fingerprint": fingerprint(&key.sk),
        "valid_until": key.vt.expiry,
        "lifetime_s": key.vt.duration_s,
    })
}

/// Local database sync with the RC file; returns the number of new users.
fn sync_local(cli: &Cli, state: &mut ServerState, password: &PwField, now: Timestamp32) -> Result<usize> {
    let rc_path = cli.rc_path()?;
    let mut rc = registry::load_rc(rc_path)?;
    let req: DbUpdateRequest =
        server_db_update_from_parts(&state.id, password, &state.trm.p, &state.trm.ssk, now);
    let delta = rc_handle_db_update(&mut rc, &req, now, cli.delta_t)?;
    registry::store_rc(rc_path, &rc)?;
    state.trm.apply_delta(&delta);
    Ok(delta.len())
}

fn run(cli: &Cli) -> Result<Value> {
    let now = Timestamp32::now();
    Ok(match &cli.command {
        Command::RcInit { force } => {
            let path = cli.rc_path()?;
            if path.exists() && !force {
                bail!("{} already exists; pass --force to replace it", path.display());
            }
            let rc = RcState::random(&mut cli.rng());
            registry::store_rc(path, &rc)?;
            json!({ "rc": path.display().to_string(), "servers": 0, "users": 0 })
        }
        Command::RegisterServer { id: sid, password, loc } => {
            let rc_path = cli.rc_path()?;
            let mut rc = registry::load_rc(rc_path)?;
            let loc = LocField::new(loc).context("invalid location")?;
            let (secrets, req) = server_register_begin(id(sid)?, pw(password)?, loc, &mut cli.rng());
            let trm = rc_register_server(&mut rc, &req, now)?;
            registry::store_trm(cli.trm_path()?, &ServerState { id: secrets.id, loc, trm: trm.clone() })?;
            registry::store_rc(rc_path, &rc)?;
            json!({ "server": sid, "users_provisioned": trm.list_uid.len() })
        }
        Command::RegisterUser { id: uid, password } => {
            let rc_path = cli.rc_path()?;
            let mut rc = registry::load_rc(rc_path)?;
            let (user, password) = (id(uid)?, pw(password)?);
            let mut rng = cli.rng();
            let card = loop {
                let (pending, req) = user_register_begin(&user, &password, &mut rng);
                match rc_register_user(&mut rc, &req, &mut rng) {
                    Ok(prov) => break user_finalize_card(&user, &password, &pending, prov)?,
                    Err(ProtocolError::DuplicateUid) => continue,
                    Err(e) => return Err(e.into()),
                }
            };
            registry::store_card(cli.card_path()?, &card)?;
            registry::store_rc(rc_path, &rc)?;
            json!({ "user": uid, "servers_on_card": card.server_count(), "card_bytes": card.storage_bytes() })
        }
        Command::Authenticate { id: uid, password, server, server_password, connect } => {
            let (user, password) = (id(uid)?, pw(password)?);
            let card = registry::load_card(cli.card_path()?)?;
            if let Some(addr) = connect {
                let target = id(server.as_deref().context("--server is required with --connect")?)?;
                let key = service::authenticate(addr, &user, &password, &card, &target, cli.delta_t, &SystemClock)?;
                return Ok(key_json(&key));
            }
            let mut state = registry::load_trm(cli.trm_path()?)?;
            let mut synced = None;
            if let Some(spw) = server_password {
                synced = Some(sync_local(cli, &mut state, &pw(spw)?, now)?);
                registry::store_trm(cli.trm_path()?, &state)?;
            }
            if let Some(s) = server {
                if id(s)? != state.id {
                    bail!("--server {s} does not match the server in --trm ({})", state.id);
                }
            }
            let (req, ctx): (LoginRequest, _) = user_login_begin(&user, &password, &card, &state.id, now)?;
            let (resp, server_key): (LoginResponse, SessionKey) =
                server_handle_login(&state.trm, &state.id, &state.loc, &req, Timestamp32::now(), &cli.policy())?;
            let user_key = user_handle_response(&ctx, &resp, Timestamp32::now(), cli.delta_t)?;
            if user_key != server_key {
                bail!("user and server derived different keys");
            }
            let mut out = key_json(&user_key);
            out["synced_users"] = json!(synced);
            out
        }
        Command::UpdateCard { id: uid, password, connect } => {
            let (user, password) = (id(uid)?, pw(password)?);
            let card_path = cli.card_path()?;
            let card = registry::load_card(card_path)?;
            let fresh = match connect {
                Some(addr) => service::update_card(addr, &user, &password, &card, &SystemClock)?,
                None => {
                    let rc = registry::load_rc(cli.rc_path()?)?;
                    let (req, _): (UpdateRequest, _) = user_update_begin(&user, &password, &card, now)?;
                    let list = rc_handle_update(&rc, &req, Timestamp32::now(), cli.delta_t)?;
                    user_apply_server_list(&user, &password, &card, &list)?
                }
            };
            registry::store_card(card_path, &fresh)?;
            json!({ "user": uid, "servers_on_card": fresh.server_count(), "card_bytes": fresh.storage_bytes() })
        }
        Command::SyncServer { password, connect } => {
            let trm_path = cli.trm_path()?;
            let mut state = registry::load_trm(trm_path)?;
            let password = pw(password)?;
            let pulled = match connect {
                Some(addr) => service::sync_server(addr, &state.id, &password, &mut state.trm, &SystemClock)?,
                None => sync_local(cli, &mut state, &password, now)?,
            };
            registry::store_trm(trm_path, &state)?;
            json!({ "server": state.id.as_str(), "new_users": pulled, "known_users": state.trm.list_uid.len() })
        }
        Command::Attack { name } => {
            let world = attacks::standard_world(cli.seed.unwrap_or(0));
            let reports: Vec<AttackReport> = if name == "all" {
                attacks::run_all(&world)
            } else {
                vec![attacks::run_attack(name, &world)?]
            };
            if !cli.json {
                for r in &reports {
                    println!(
                        "{:<24} attempts {:>6}  acceptances {}",
                        r.attack_name, r.attempts, r.acceptances
                    );
                }
            }
            let value = if reports.len() == 1 {
                serde_json::to_value(&reports[0])?
            } else {
                serde_json::to_value(&reports)?
            };
            if reports.iter().any(|r| !r.resisted()) {
                if cli.json {
                    println!("{value:#}");
                }
                bail!("an attack scenario was accepted");
            }
            value
        }
        Command::Bench { servers, runs } => {
            let reports = metrics::measure_costs(cli.seed.unwrap_or(0), *servers, *runs);
            if !cli.json {
                print_costs(&reports);
            }
            serde_json::to_value(&reports)?
        }
        Command::Sizes { servers } => {
            let reports = metrics::measure_costs(cli.seed.unwrap_or(0), *servers, 1);
            let storage = metrics::find(&reports, metrics::PHASE_CARD_STORAGE).and_then(|r| r.storage_bytes);
            let auth = metrics::find(&reports, metrics::PHASE_AUTHENTICATION).and_then(|r| r.wire_bytes);
            json!({
                "login_request": LoginRequest::LEN,
                "login_response": LoginResponse::LEN,
                "login_exchange": auth,
                "update_request": UpdateRequest::LEN,
                "db_update_request": DbUpdateRequest::LEN,
                "servers": servers,
                "card": storage,
                "card_published": metrics::PUBLISHED_CARD_BYTES,
            })
        }
        Command::Serve { role, bind } => {
            let listener = TcpListener::bind(bind).with_context(|| format!("cannot bind {bind}"))?;
            let clock: Box<dyn Clock> = Box::new(SystemClock);
            let handler: Arc<dyn service::Handler> = match role {
                Role::Rc => {
                    let path = cli.rc_path()?.to_path_buf();
                    Arc::new(RcRole::new(registry::load_rc(&path)?, cli.delta_t, clock, Some(path)))
                }
                Role::Server => {
                    let state = registry::load_trm(cli.trm_path()?)?;
                    Arc::new(ServerRole::new(state.id, state.loc, state.trm, cli.policy(), clock))
                }
            };
            eprintln!("serving {role:?} on {}", listener.local_addr()?);
            service::serve(listener, handler, Arc::new(AtomicBool::new(false)))?;
            json!({ "stopped": true })
        }
    })
}

fn print_costs(reports: &[CostReport]) {
    println!("{:<16} {:>6} {:>9} {:>6} {:>8} {:>10} {:>9}", "phase", "hashes", "keystream", "wire", "storage", "median ms", "published");
    let opt = |v: Option<u64>| v.map_or("-".to_owned(), |v| v.to_string());
    for r in reports {
        println!(
            "{:<16} {:>6} {:>9} {:>6} {:>8} {:>10} {:>9}",
            r.phase,
            r.hash_count,
            r.keystream_hashes,
            opt(r.wire_bytes),
            opt(r.storage_bytes),
            r.wall_time_ms.map_or("-".to_owned(), |t| format!("{t:.4}")),
            opt(r.published),
        );
    }
    for r in reports {
        if let Some(note) = &r.note {
            println!("  {}: {note}", r.phase);
        }
    }
}

fn error_json(e: &anyhow::Error) -> Value {
    let kind = e
        .downcast_ref::<ProtocolError>()
        .map(|p| format!("{p:?}"))
        .or_else(|| {
            e.downcast_ref::<service::ServiceError>().map(|s| match s {
                service::ServiceError::Protocol(p) => format!("{p:?}"),
                service::ServiceError::Remote { code, .. } => format!("{code:?}"),
                _ => "Service".to_owned(),
            })
        })
        .or_else(|| e.downcast_ref::<registry::RegistryError>().map(|_| "Registry".to_owned()))
        .unwrap_or_else(|| "Error".to_owned());
    json!({ "error": { "kind": kind, "message": format!("{e:#}") } })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(value) => {
            let silent = matches!(cli.command, Command::Attack { .. } | Command::Bench { .. }) && !cli.json;
            if !silent {
                println!("{}", if cli.json { format!("{value:#}") } else { human(&value) });
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.json {
                eprintln!("{:#}", error_json(&e));
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}

fn human(v: &Value) -> String {
    match v.as_object() {
        Some(map) => map
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}: {s}"),
                other => format!("{k}: {other}"),
            })
            .collect::<Vec<_>>()
            .join("\n"),
        None => v.to_string(),
    }
}
