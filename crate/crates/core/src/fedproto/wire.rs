//! Length-prefixed binary frames exchanged between server and clients.
//!
//! Header (16 bytes, little-endian): magic `u32 = 0x46444F54`, version `u8 = 1`,
//! type `u8`, reserved `u16 = 0`, payload length `u64`.
//!
//! | type   | payload                                                   |
//! |--------|-----------------------------------------------------------|
//! | HELLO  | `client_id u32 · d u32 · K u32`                           |
//! | GLOBAL | `round u32 · K×d f64` (all-global appends `d×d f64` for X) |
//! | UPDATE | same layout as GLOBAL                                     |
//! | FIN    | empty                                                     |

use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};

use crate::linalg::Matrix;

use super::{FedError, GlobalParams};

pub const MAGIC: u32 = 0x4644_4F54;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Upper bound on accepted payloads; anything larger is treated as malformed.
pub const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Global = 2,
    Update = 3,
    Fin = 4,
}

impl MsgType {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(MsgType::Hello),
            2 => Some(MsgType::Global),
            3 => Some(MsgType::Update),
            4 => Some(MsgType::Fin),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub client_id: u32,
    pub dim: u32,
    pub classes: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: MsgType,
    pub payload: Vec<u8>,
}

fn protocol(msg: impl Into<String>) -> FedError {
    let msg = msg.into();
    log::error!("protocol error: {msg}");
    FedError::Protocol(msg)
}

pub fn write_frame<W: Write>(w: &mut W, kind: MsgType, payload: &[u8]) -> Result<(), FedError> {
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(&MAGIC.to_le_bytes());
    header[4] = VERSION;
    header[5] = kind as u8;
    header[8..16].copy_from_slice(&(payload.len() as u64).to_le_bytes());
    w.write_all(&header)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, FedError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => protocol("connection closed before a complete frame header"),
        _ => FedError::Io(e),
    })?;
    let magic = u32::from_le_bytes(header[0..4].try_into().expect("4 bytes"));
    if magic != MAGIC {
        return Err(protocol(format!("bad magic {magic:#010x}")));
    }
    if header[4] != VERSION {
        return Err(protocol(format!("unsupported protocol version {}", header[4])));
    }
    let kind = MsgType::from_u8(header[5]).ok_or_else(|| protocol(format!("unknown message type {}", header[5])))?;
    let len = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    if len > MAX_PAYLOAD {
        return Err(protocol(format!("payload length {len} exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => protocol("connection closed mid-payload"),
        _ => FedError::Io(e),
    })?;
    Ok(Frame { kind, payload })
}

pub fn encode_hello(h: Hello) -> Vec<u8> {
    let mut out = Vec::with_capacity(12);
    out.extend_from_slice(&h.client_id.to_le_bytes());
    out.extend_from_slice(&h.dim.to_le_bytes());
    out.extend_from_slice(&h.classes.to_le_bytes());
    out
}

pub fn decode_hello(frame: &Frame) -> Result<Hello, FedError> {
    expect_kind(frame, MsgType::Hello)?;
    if frame.payload.len() != 12 {
        return Err(protocol(format!("HELLO payload has {} bytes, expected 12", frame.payload.len())));
    }
    let word = |i: usize| u32::from_le_bytes(frame.payload[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    Ok(Hello {
        client_id: word(0),
        dim: word(1),
        classes: word(2),
    })
}

/// Shape of a GLOBAL/UPDATE payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamShape {
    pub classes: usize,
    pub dim: usize,
    pub with_local: bool,
}

impl ParamShape {
    pub fn payload_len(&self) -> usize {
        let mut n = 4 + 8 * self.classes * self.dim;
        if self.with_local {
            n += 8 * self.dim * self.dim;
        }
        n
    }
}

pub fn encode_params(round: u32, params: &GlobalParams) -> Vec<u8> {
    let extra = params.x.as_ref().map_or(0, |x| x.as_slice().len());
    let mut out = Vec::with_capacity(4 + 8 * (params.w_g.as_slice().len() + extra));
    out.extend_from_slice(&round.to_le_bytes());
    for v in params.w_g.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(x) = &params.x {
        for v in x.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_params(frame: &Frame, kind: MsgType, shape: ParamShape) -> Result<(u32, GlobalParams), FedError> {
    expect_kind(frame, kind)?;
    let p = &frame.payload;
    if p.len() != shape.payload_len() {
        return Err(protocol(format!(
            "{kind:?} payload has {} bytes, expected {}",
            p.len(),
            shape.payload_len()
        )));
    }
    let round = u32::from_le_bytes(p[0..4].try_into().expect("4 bytes"));
    let floats: Vec<f64> = p[4..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let kd = shape.classes * shape.dim;
    let w_g = Matrix::from_vec(shape.classes, shape.dim, floats[..kd].to_vec())
        .map_err(|e| protocol(format!("classifier payload: {e}")))?;
    let x = if shape.with_local {
        Some(
            Matrix::from_vec(shape.dim, shape.dim, floats[kd..].to_vec())
                .map_err(|e| protocol(format!("local payload: {e}")))?,
        )
    } else {
        None
    };
    Ok((round, GlobalParams { w_g, x }))
}

fn expect_kind(frame: &Frame, kind: MsgType) -> Result<(), FedError> {
    if frame.kind != kind {
        return Err(protocol(format!("expected {kind:?}, got {:?}", frame.kind)));
    }
    Ok(())
}

/// Splits a captured byte stream back into frames (for traffic inspection).
pub fn parse_stream(mut bytes: &[u8]) -> Result<Vec<Frame>, FedError> {
    let mut frames = Vec::new();
    while !bytes.is_empty() {
        frames.push(read_frame(&mut bytes)?);
    }
    Ok(frames)
}

/// A stream wrapper that records every byte written and read.
#[derive(Debug)]
pub struct Tap<S> {
    inner: S,
    sent: Arc<Mutex<Vec<u8>>>,
    received: Arc<Mutex<Vec<u8>>>,
}

/// Shared handles onto the bytes captured by a [`Tap`].
#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub sent: Arc<Mutex<Vec<u8>>>,
    pub received: Arc<Mutex<Vec<u8>>>,
}

impl Capture {
    pub fn sent_bytes(&self) -> Vec<u8> {
        self.sent.lock().expect("capture lock").clone()
    }

    pub fn received_bytes(&self) -> Vec<u8> {
        self.received.lock().expect("capture lock").clone()
    }
}

impl<S> Tap<S> {
    pub fn new(inner: S) -> (Self, Capture) {
        let capture = Capture::default();
        let tap = Self {
            inner,
            sent: capture.sent.clone(),
            received: capture.received.clone(),
        };
        (tap, capture)
    }
}

impl<S: Read> Read for Tap<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.received.lock().expect("capture lock").extend_from_slice(&buf[..n]);
        Ok(n)
    }
}

impl<S: Write> Write for Tap<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.sent.lock().expect("capture lock").extend_from_slice(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}
