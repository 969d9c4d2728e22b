//! Binary frames for the socket service.
//!
//! On the stream every frame is a 4-byte big-endian length followed by that
//! many bytes: one type byte, then the fixed-layout body of that type.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::crypto::CryptoError;
use crate::protocol::{
    DbUpdateRequest, LoginRequest, LoginResponse, ProtocolError, UpdateRequest, UserListDelta,
    SERVER_ENTRY_LEN,
};

/// Largest accepted length prefix (type byte plus body).
pub const MAX_FRAME: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    LoginRequest = 0x01,
    LoginResponse = 0x02,
    UpdateRequest = 0x03,
    DbUpdateRequest = 0x04,
    ListPayload = 0x05,
    UserListDelta = 0x06,
    Error = 0x7F,
}

impl TryFrom<u8> for FrameType {
    type Error = WireError;

    fn try_from(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            0x01 => FrameType::LoginRequest,
            0x02 => FrameType::LoginResponse,
            0x03 => FrameType::UpdateRequest,
            0x04 => FrameType::DbUpdateRequest,
            0x05 => FrameType::ListPayload,
            0x06 => FrameType::UserListDelta,
            0x7F => FrameType::Error,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

/// Machine-readable reason carried by an error frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ErrorCode {
    MalformedFrame = 0x01,
    Oversized = 0x02,
    UnsupportedType = 0x03,
    Internal = 0x04,
    StaleRequest = 0x10,
    UnknownUser = 0x11,
    AuthFail = 0x12,
    Replayed = 0x13,
    UnknownServer = 0x14,
    MalformedList = 0x15,
    Rejected = 0x1F,
}

impl ErrorCode {
    pub fn from_u8(b: u8) -> Option<Self> {
        use ErrorCode::*;
        [
            MalformedFrame,
            Oversized,
            UnsupportedType,
            Internal,
            StaleRequest,
            UnknownUser,
            AuthFail,
            Replayed,
            UnknownServer,
            MalformedList,
            Rejected,
        ]
        .into_iter()
        .find(|c| *c as u8 == b)
    }
}

impl From<ProtocolError> for ErrorCode {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::StaleRequest => ErrorCode::StaleRequest,
            ProtocolError::UnknownUser => ErrorCode::UnknownUser,
            ProtocolError::AuthFail => ErrorCode::AuthFail,
            ProtocolError::Replayed => ErrorCode::Replayed,
            ProtocolError::UnknownServer => ErrorCode::UnknownServer,
            ProtocolError::MalformedList => ErrorCode::MalformedList,
            _ => ErrorCode::Rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    LoginRequest(LoginRequest),
    LoginResponse(LoginResponse),
    UpdateRequest(UpdateRequest),
    DbUpdateRequest(DbUpdateRequest),
    /// Encoded server list, a positive multiple of 64 bytes.
    ListPayload(Vec<u8>),
    UserListDelta(UserListDelta),
    Error { code: ErrorCode, message: String },
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME}-byte limit")]
    Oversized(usize),
    #[error("empty frame")]
    Empty,
    #[error("unknown frame type 0x{0:02x}")]
    UnknownType(u8),
    #[error("bad body for {kind:?}: {reason}")]
    BadBody { kind: FrameType, reason: String },
}

impl WireError {
    fn body(kind: FrameType, e: impl std::fmt::Display) -> Self {
        WireError::BadBody {
            kind,
            reason: e.to_string(),
        }
    }
}

impl Frame {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Frame {
        Frame::Error {
            code,
            message: message.into(),
        }
    }

    pub fn frame_type(&self) -> FrameType {
        match self {
            Frame::LoginRequest(_) => FrameType::LoginRequest,
            Frame::LoginResponse(_) => FrameType::LoginResponse,
            Frame::UpdateRequest(_) => FrameType::UpdateRequest,
            Frame::DbUpdateRequest(_) => FrameType::DbUpdateRequest,
            Frame::ListPayload(_) => FrameType::ListPayload,
            Frame::UserListDelta(_) => FrameType::UserListDelta,
            Frame::Error { .. } => FrameType::Error,
        }
    }

    pub fn body(&self) -> Vec<u8> {
        match self {
            Frame::LoginRequest(m) => m.to_bytes().to_vec(),
            Frame::LoginResponse(m) => m.to_bytes().to_vec(),
            Frame::UpdateRequest(m) => m.to_bytes().to_vec(),
            Frame::DbUpdateRequest(m) => m.to_bytes().to_vec(),
            Frame::ListPayload(b) => b.clone(),
            Frame::UserListDelta(d) => d.to_bytes(),
            Frame::Error { code, message } => {
                let mut out = vec![*code as u8];
                out.extend_from_slice(message.as_bytes());
                out
            }
        }
    }

    /// Type byte followed by the body.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.frame_type() as u8];
        out.extend(self.body());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
        let (&tag, body) = bytes.split_first().ok_or(WireError::Empty)?;
        let kind = FrameType::try_from(tag)?;
        let bad = |e: CryptoError| WireError::body(kind, e);
        Ok(match kind {
            FrameType::LoginRequest => Frame::LoginRequest(LoginRequest::from_bytes(body).map_err(bad)?),
            FrameType::LoginResponse => Frame::LoginResponse(LoginResponse::from_bytes(body).map_err(bad)?),
            FrameType::UpdateRequest => Frame::UpdateRequest(UpdateRequest::from_bytes(body).map_err(bad)?),
            FrameType::DbUpdateRequest => {
                Frame::DbUpdateRequest(DbUpdateRequest::from_bytes(body).map_err(bad)?)
            }
            FrameType::ListPayload => {
                if body.is_empty() || body.len() % SERVER_ENTRY_LEN != 0 {
                    return Err(WireError::body(kind, format!("{} bytes", body.len())));
                }
                Frame::ListPayload(body.to_vec())
            }
            FrameType::UserListDelta => Frame::UserListDelta(UserListDelta::from_bytes(body).map_err(bad)?),
            FrameType::Error => {
                let (&code, text) = body
                    .split_first()
                    .ok_or_else(|| WireError::body(kind, "missing code"))?;
                Frame::Error {
                    code: ErrorCode::from_u8(code)
                        .ok_or_else(|| WireError::body(kind, format!("code 0x{code:02x}")))?,
                    message: String::from_utf8(text.to_vec()).map_err(|e| WireError::body(kind, e))?,
                }
            }
        })
    }
}

/// Writes one length-prefixed frame.
pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    let bytes = frame.encode();
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(&bytes)?;
    w.flush()
}

/// Reads one length-prefixed frame.
///
/// Returns `Ok(None)` on a clean end of stream. An oversized frame is read
/// and discarded so the stream stays aligned, then reported as
/// [`WireError::Oversized`].
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        io::copy(&mut r.take(len as u64), &mut io::sink())?;
        return Err(WireError::Oversized(len));
    }
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    Frame::decode(&bytes).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Digest256, IdField, Timestamp32};
    use proptest::prelude::*;

    fn digest() -> impl Strategy<Value = Digest256> {
        any::<[u8; 32]>().prop_map(Digest256)
    }

    fn frame() -> impl Strategy<Value = Frame> {
        let ts = any::<u32>().prop_map(Timestamp32);
        prop_oneof![
            (digest(), digest(), ts.clone())
                .prop_map(|(alpha, beta, t1)| Frame::LoginRequest(LoginRequest { alpha, beta, t1 })),
            (digest(), digest(), ts.clone())
                .prop_map(|(gamma, sigma, t2)| Frame::LoginResponse(LoginResponse { gamma, sigma, t2 })),
            (digest(), digest(), ts.clone())
                .prop_map(|(uid, tau, t4)| Frame::UpdateRequest(UpdateRequest { uid, tau, t4 })),
            ("[a-z0-9]{1,16}", digest(), ts).prop_map(|(id, omega, t6)| Frame::DbUpdateRequest(
                DbUpdateRequest {
                    id: IdField::new(&id).unwrap(),
                    omega,
                    t6
                }
            )),
            (1usize..8)
                .prop_flat_map(|n| proptest::collection::vec(any::<u8>(), n * 64))
                .prop_map(Frame::ListPayload),
            proptest::collection::vec((digest(), digest()), 0..8)
                .prop_map(|users| Frame::UserListDelta(UserListDelta { users })),
            (0usize..11, ".{0,64}").prop_map(|(i, message)| Frame::Error {
                code: ErrorCode::from_u8(
                    [0x01, 0x02, 0x03, 0x04, 0x10, 0x11, 0x12, 0x13, 0x14, 0x15, 0x1F][i]
                )
                .unwrap(),
                message
            }),
        ]
    }

    proptest! {
        #[test]
        fn frames_round_trip(f in frame()) {
            let bytes = f.encode();
            prop_assert_eq!(Frame::decode(&bytes).unwrap(), f.clone());
            let mut stream = Vec::new();
            write_frame(&mut stream, &f).unwrap();
            prop_assert_eq!(&stream[4..], &bytes[..]);
            let back = read_frame(&mut stream.as_slice()).unwrap().unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            let _ = Frame::decode(&bytes);
        }
    }

    #[test]
    fn login_bodies_are_68_bytes() {
        let req = Frame::LoginRequest(LoginRequest {
            alpha: Digest256([1; 32]),
            beta: Digest256([2; 32]),
            t1: Timestamp32(3),
        });
        assert_eq!(req.body().len(), 68);
        assert_eq!(req.encode()[0], 0x01);
    }

    #[test]
    fn oversized_frame_is_skipped() {
        let mut stream = ((MAX_FRAME + 1) as u32).to_be_bytes().to_vec();
        stream.extend(vec![0xAA; MAX_FRAME + 1]);
        write_frame(&mut stream, &Frame::error(ErrorCode::Internal, "next")).unwrap();
        let mut r = stream.as_slice();
        assert!(matches!(read_frame(&mut r), Err(WireError::Oversized(4097))));
        assert_eq!(
            read_frame(&mut r).unwrap(),
            Some(Frame::error(ErrorCode::Internal, "next"))
        );
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(matches!(Frame::decode(&[]), Err(WireError::Empty)));
        assert!(matches!(Frame::decode(&[0x42]), Err(WireError::UnknownType(0x42))));
        assert!(matches!(Frame::decode(&[0x01, 0, 0]), Err(WireError::BadBody { .. })));
        assert!(matches!(Frame::decode(&[0x05; 64]), Err(WireError::BadBody { .. })));
        assert!(matches!(Frame::decode(&[0x7F, 0xEE]), Err(WireError::BadBody { .. })));
    }
}
