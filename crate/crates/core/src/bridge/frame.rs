//! XFP1 framing: `"XFP1"`, `u8` type, `u64` request id, `u32` payload
//! length, payload. Little-endian throughout.

use std::fmt;

pub const MAGIC: [u8; 4] = *b"XFP1";
pub const HEADER_LEN: usize = 17;
pub const MAX_PAYLOAD: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameType {
    Request = 1,
    Response = 2,
    Error = 3,
}

impl FrameType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(FrameType::Request),
            2 => Some(FrameType::Response),
            3 => Some(FrameType::Error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub request_id: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn error(request_id: u64, message: impl fmt::Display) -> Self {
        Frame {
            kind: FrameType::Error,
            request_id,
            payload: message.to_string().into_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameError {
    /// More bytes are needed; `needed` is the total frame length if known.
    Incomplete { needed: Option<usize> },
    BadMagic,
    UnknownType { kind: u8, request_id: u64, payload_len: usize },
    Oversize { request_id: u64, payload_len: usize },
}

impl fmt::Display for FrameError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameError::Incomplete { .. } => write!(f, "incomplete frame"),
            FrameError::BadMagic => write!(f, "bad frame magic"),
            FrameError::UnknownType { kind, .. } => write!(f, "unknown frame type {kind}"),
            FrameError::Oversize { payload_len, .. } => {
                write!(f, "payload length {payload_len} exceeds {MAX_PAYLOAD}")
            }
        }
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + frame.payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(frame.kind as u8);
    out.extend_from_slice(&frame.request_id.to_le_bytes());
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    out
}

/// Decodes one frame from the front of `bytes`, returning it with the
/// number of bytes consumed. Never reads past the declared payload.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    let have = bytes.len().min(4);
    if bytes[..have] != MAGIC[..have] {
        return Err(FrameError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Incomplete { needed: None });
    }
    let kind = bytes[4];
    let request_id = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
    let payload_len = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(FrameError::Oversize { request_id, payload_len });
    }
    let Some(kind) = FrameType::from_u8(kind) else {
        return Err(FrameError::UnknownType {
            kind,
            request_id,
            payload_len,
        });
    };
    let total = HEADER_LEN + payload_len;
    if bytes.len() < total {
        return Err(FrameError::Incomplete { needed: Some(total) });
    }
    Ok((
        Frame {
            kind,
            request_id,
            payload: bytes[HEADER_LEN..total].to_vec(),
        },
        total,
    ))
}

/// Something the receiving side must react to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inbound {
    Frame(Frame),
    /// Undecodable input; reply with an error frame for `request_id`.
    Malformed { request_id: u64, message: String },
}

/// Incremental frame splitter with resynchronisation: after bad magic or
/// an oversize header it skips to the next occurrence of the magic.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
    skipping: usize,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        // remaining payload of an unknown-type frame is discarded as it arrives
        let skip = self.skipping.min(bytes.len());
        self.skipping -= skip;
        self.buf.extend_from_slice(&bytes[skip..]);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete event, or `None` when more bytes are needed.
    pub fn next_event(&mut self) -> Option<Inbound> {
        if self.buf.is_empty() {
            return None;
        }
        match decode_frame(&self.buf) {
            Ok((frame, used)) => {
                self.buf.drain(..used);
                Some(Inbound::Frame(frame))
            }
            Err(FrameError::Incomplete { .. }) => None,
            Err(FrameError::BadMagic) => {
                self.resync(1);
                Some(Inbound::Malformed {
                    request_id: 0,
                    message: FrameError::BadMagic.to_string(),
                })
            }
            Err(e @ FrameError::Oversize { request_id, .. }) => {
                self.resync(HEADER_LEN);
                Some(Inbound::Malformed {
                    request_id,
                    message: e.to_string(),
                })
            }
            Err(
                e @ FrameError::UnknownType {
                    request_id,
                    payload_len,
                    ..
                },
            ) => {
                let total = HEADER_LEN + payload_len;
                if self.buf.len() >= total {
                    self.buf.drain(..total);
                } else {
                    self.skipping = total - self.buf.len();
                    self.buf.clear();
                }
                Some(Inbound::Malformed {
                    request_id,
                    message: e.to_string(),
                })
            }
        }
    }

    fn resync(&mut self, from: usize) {
        let from = from.min(self.buf.len());
        let next = self.buf[from..]
            .windows(4)
            .position(|w| w == MAGIC)
            .map(|p| p + from);
        match next {
            Some(p) => {
                self.buf.drain(..p);
            }
            None => {
                // keep a tail that may be the start of the next magic
                let keep = self.buf.len().saturating_sub(3).max(from);
                self.buf.drain(..keep);
                while !self.buf.is_empty() && !MAGIC.starts_with(&self.buf) {
                    self.buf.remove(0);
                }
            }
        }
    }
}
