//! Request/response service over TCP speaking [`wire`](crate::wire) frames.
//!
//! A server role answers login requests. The RC role answers card-update and
//! database-update requests; those paths assume a trusted channel and are
//! meant for loopback. Each connection runs on its own thread and every
//! state mutation goes through one mutex per role.

use std::collections::VecDeque;
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use thiserror::Error;

use crate::crypto::{Digest256, IdField, LocField, PwField, Timestamp32};
use crate::protocol::{
    rc_handle_db_update, rc_handle_update, server_db_update_from_parts, server_handle_login_cached,
    user_apply_server_list, user_handle_response, user_login_begin, user_update_begin,
    ProtocolError, RcState, ReplayCache, SessionKey, SessionPolicy, SmartCard,
    TamperResistantMemory,
};
use crate::registry::{self, RegistryError};
use crate::wire::{read_frame, write_frame, ErrorCode, Frame, FrameType, WireError};

/// Source of protocol timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp32;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp32 {
        Timestamp32::now()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub Timestamp32);

impl Clock for FixedClock {
    fn now(&self) -> Timestamp32 {
        self.0
    }
}

/// Returns the queued times in order, then repeats the last one.
#[derive(Debug)]
pub struct ScriptedClock(Mutex<VecDeque<Timestamp32>>);

impl ScriptedClock {
    pub fn new(times: impl IntoIterator<Item = Timestamp32>) -> Self {
        let q: VecDeque<_> = times.into_iter().collect();
        assert!(!q.is_empty(), "scripted clock needs at least one time");
        ScriptedClock(Mutex::new(q))
    }
}

impl Clock for ScriptedClock {
    fn now(&self) -> Timestamp32 {
        let mut q = self.0.lock().unwrap();
        if q.len() > 1 {
            q.pop_front().unwrap()
        } else {
            q[0]
        }
    }
}

/// Answers one decoded frame.
pub trait Handler: Send + Sync {
    fn handle(&self, frame: Frame) -> Frame;
}

fn unsupported(kind: FrameType) -> Frame {
    Frame::error(ErrorCode::UnsupportedType, format!("{kind:?} not served here"))
}

fn rejected(e: ProtocolError) -> Frame {
    Frame::error(ErrorCode::from(e), e.to_string())
}

struct ServerInner {
    trm: TamperResistantMemory,
    cache: ReplayCache,
    sessions: Vec<SessionKey>,
}

/// A server answering login requests from its provisioned memory.
pub struct ServerRole {
    id: IdField,
    loc: LocField,
    policy: SessionPolicy,
    clock: Box<dyn Clock>,
    inner: Mutex<ServerInner>,
}

impl ServerRole {
    pub fn new(
        id: IdField,
        loc: LocField,
        trm: TamperResistantMemory,
        policy: SessionPolicy,
        clock: Box<dyn Clock>,
    ) -> Self {
        ServerRole {
            id,
            loc,
            policy,
            clock,
            inner: Mutex::new(ServerInner {
                trm,
                cache: ReplayCache::new(),
                sessions: Vec::new(),
            }),
        }
    }

    /// Keys of every session this role accepted, oldest first.
    pub fn sessions(&self) -> Vec<SessionKey> {
        self.inner.lock().unwrap().sessions.clone()
    }
}

impl Handler for ServerRole {
    fn handle(&self, frame: Frame) -> Frame {
        let Frame::LoginRequest(req) = frame else {
            return unsupported(frame.frame_type());
        };
        let t2 = self.clock.now();
        let mut inner = self.inner.lock().unwrap();
        let ServerInner { trm, cache, sessions } = &mut *inner;
        match server_handle_login_cached(trm, &self.id, &self.loc, &req, t2, &self.policy, cache) {
            Ok((resp, key)) => {
                sessions.push(key);
                Frame::LoginResponse(resp)
            }
            Err(e) => rejected(e),
        }
    }
}

/// The registration center's update endpoints.
pub struct RcRole {
    delta_t: u32,
    clock: Box<dyn Clock>,
    state: Mutex<RcState>,
    /// Database file rewritten after every marker change.
    persist: Option<PathBuf>,
}

impl RcRole {
    pub fn new(rc: RcState, delta_t: u32, clock: Box<dyn Clock>, persist: Option<PathBuf>) -> Self {
        RcRole {
            delta_t,
            clock,
            state: Mutex::new(rc),
            persist,
        }
    }

    pub fn state(&self) -> RcState {
        self.state.lock().unwrap().clone()
    }
}

impl Handler for RcRole {
    fn handle(&self, frame: Frame) -> Frame {
        let now = self.clock.now();
        match frame {
            Frame::UpdateRequest(req) => {
                let rc = self.state.lock().unwrap();
                match rc_handle_update(&rc, &req, now, self.delta_t) {
                    Ok(list) => Frame::ListPayload(list),
                    Err(e) => rejected(e),
                }
            }
            Frame::DbUpdateRequest(req) => {
                let mut rc = self.state.lock().unwrap();
                let mut next = rc.clone();
                let delta = match rc_handle_db_update(&mut next, &req, now, self.delta_t) {
                    Ok(d) => d,
                    Err(e) => return rejected(e),
                };
                if let Some(path) = &self.persist {
                    if let Err(e) = registry::store_rc(path, &next) {
                        return Frame::error(ErrorCode::Internal, e.to_string());
                    }
                }
                *rc = next;
                Frame::UserListDelta(delta)
            }
            other => unsupported(other.frame_type()),
        }
    }
}

fn serve_connection(stream: TcpStream, handler: &dyn Handler) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let reply = match read_frame(&mut reader) {
            Ok(None) => return Ok(()),
            Ok(Some(frame)) => handler.handle(frame),
            Err(WireError::Io(e)) => return Err(e),
            Err(e @ WireError::Oversized(_)) => Frame::error(ErrorCode::Oversized, e.to_string()),
            Err(e) => Frame::error(ErrorCode::MalformedFrame, e.to_string()),
        };
        write_frame(&mut writer, &reply)?;
    }
}

/// A listener running on a background thread.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting; open connections finish on their own threads.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_now();
        }
    }
}

/// Accepts connections on `listener` until `stop` is set, one thread each.
pub fn serve(listener: TcpListener, handler: Arc<dyn Handler>, stop: Arc<AtomicBool>) -> io::Result<()> {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let handler = Arc::clone(&handler);
        thread::spawn(move || {
            let _ = serve_connection(stream, handler.as_ref());
        });
    }
    Ok(())
}

/// Binds `addr` and serves on a background thread.
pub fn spawn(addr: impl ToSocketAddrs, handler: Arc<dyn Handler>) -> io::Result<ServiceHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let thread = thread::spawn(move || {
        let _ = serve(listener, handler, flag);
    });
    Ok(ServiceHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("peer rejected the request ({code:?}): {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("peer answered with an unexpected {0:?} frame")]
    Unexpected(FrameType),
    #[error("peer closed the connection")]
    Closed,
}

/// One request, one reply over a fresh connection.
pub fn exchange(addr: impl ToSocketAddrs, frame: &Frame) -> Result<Frame, ServiceError> {
    let stream = TcpStream::connect(addr)?;
    let mut writer = BufWriter::new(stream.try_clone()?);
    write_frame(&mut writer, frame)?;
    let reply = read_frame(&mut BufReader::new(stream))?.ok_or(ServiceError::Closed)?;
    match reply {
        Frame::Error { code, message } => Err(ServiceError::Remote { code, message }),
        other => Ok(other),
    }
}

/// Full login against a served server role.
pub fn authenticate(
    addr: impl ToSocketAddrs,
    id: &IdField,
    pw: &PwField,
    card: &SmartCard,
    server: &IdField,
    delta_t: u32,
    clock: &dyn Clock,
) -> Result<SessionKey, ServiceError> {
    let (req, ctx) = user_login_begin(id, pw, card, server, clock.now())?;
    match exchange(addr, &Frame::LoginRequest(req))? {
        Frame::LoginResponse(resp) => Ok(user_handle_response(&ctx, &resp, clock.now(), delta_t)?),
        other => Err(ServiceError::Unexpected(other.frame_type())),
    }
}

/// Refreshes the card's server list from a served RC role.
pub fn update_card(
    addr: impl ToSocketAddrs,
    id: &IdField,
    pw: &PwField,
    card: &SmartCard,
    clock: &dyn Clock,
) -> Result<SmartCard, ServiceError> {
    let (req, _) = user_update_begin(id, pw, card, clock.now())?;
    match exchange(addr, &Frame::UpdateRequest(req))? {
        Frame::ListPayload(list) => Ok(user_apply_server_list(id, pw, card, &list)?),
        other => Err(ServiceError::Unexpected(other.frame_type())),
    }
}

/// Pulls users registered since the last sync into `trm`; returns how many.
pub fn sync_server(
    addr: impl ToSocketAddrs,
    id: &IdField,
    pw: &PwField,
    trm: &mut TamperResistantMemory,
    clock: &dyn Clock,
) -> Result<usize, ServiceError> {
    let p: Digest256 = trm.p;
    let req = server_db_update_from_parts(id, pw, &p, &trm.ssk, clock.now());
    match exchange(addr, &Frame::DbUpdateRequest(req))? {
        Frame::UserListDelta(delta) => {
            trm.apply_delta(&delta);
            Ok(delta.len())
        }
        other => Err(ServiceError::Unexpected(other.frame_type())),
    }
}
