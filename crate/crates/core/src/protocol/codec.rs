//! Length-prefixed binary frames.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ENSM"
//! 4       1     protocol version (1)
//! 5       1     message kind
//! 6       2     reserved, zero
//! 8       4     body length in bytes (u32, at most MAX_BODY_LEN)
//! 12      ...   body
//! ```
//!
//! Every body starts with the study id (u16 length + UTF-8) and the
//! simulation id (u64). All integers are little-endian; payload values are
//! IEEE-754 binary64, bit-exact.

use std::io::{self, Read, Write};
use std::ops::Range;

use crate::wire::{ByteReader, ByteWriter, Short};

pub const MAGIC: [u8; 4] = *b"ENSM";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const MAX_BODY_LEN: u32 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Hello = 1,
    Welcome = 2,
    Data = 3,
    Goodbye = 4,
    Heartbeat = 5,
    Ack = 6,
}

impl MessageKind {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => MessageKind::Hello,
            2 => MessageKind::Welcome,
            3 => MessageKind::Data,
            4 => MessageKind::Goodbye,
            5 => MessageKind::Heartbeat,
            6 => MessageKind::Ack,
            _ => return None,
        })
    }
}

/// One timestep of one field over a contiguous run of global cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DataChunk {
    pub field: String,
    pub timestep: u32,
    pub offset: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    /// Client opening a connection: the cells it owns and the fields it sends.
    Hello { cells: Range<u64>, fields: Vec<String> },
    /// Server rank accepting a connection: the cells that rank owns.
    Welcome {
        rank: u32,
        cells: Range<u64>,
        n_timesteps: u32,
        fields: Vec<String>,
    },
    Data(DataChunk),
    Goodbye,
    Heartbeat { sequence: u64 },
    /// Acknowledges a Goodbye once everything before it was queued.
    Ack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub study_id: String,
    pub simulation_id: u64,
    pub body: Body,
}

impl Message {
    pub fn new(study_id: impl Into<String>, simulation_id: u64, body: Body) -> Self {
        Message {
            study_id: study_id.into(),
            simulation_id,
            body,
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self.body {
            Body::Hello { .. } => MessageKind::Hello,
            Body::Welcome { .. } => MessageKind::Welcome,
            Body::Data(_) => MessageKind::Data,
            Body::Goodbye => MessageKind::Goodbye,
            Body::Heartbeat { .. } => MessageKind::Heartbeat,
            Body::Ack => MessageKind::Ack,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("protocol version {found}, expected {expected}")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("truncated frame: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("frame body of {len} bytes exceeds limit {max}")]
    LengthOverflow { len: u64, max: u32 },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("identifier is not valid UTF-8")]
    InvalidUtf8,
    #[error("malformed body: {0}")]
    Malformed(String),
    #[error("{0} trailing bytes after message body")]
    TrailingBytes(usize),
    #[error("transport: {0}")]
    Io(#[from] io::Error),
}

impl From<Short> for CodecError {
    fn from(s: Short) -> Self {
        CodecError::Truncated {
            needed: s.needed,
            available: s.available,
        }
    }
}

const MAX_IDENT: usize = u16::MAX as usize;

fn check_ident(s: &str) -> Result<(), CodecError> {
    if s.len() > MAX_IDENT {
        Err(CodecError::Malformed(format!("identifier of {} bytes", s.len())))
    } else {
        Ok(())
    }
}

fn write_names(w: &mut ByteWriter, names: &[String]) {
    w.u16(names.len() as u16);
    for n in names {
        w.str(n);
    }
}

fn read_str(r: &mut ByteReader<'_>) -> Result<String, CodecError> {
    r.str()?.ok_or(CodecError::InvalidUtf8)
}

fn read_names(r: &mut ByteReader<'_>) -> Result<Vec<String>, CodecError> {
    let n = r.u16()? as usize;
    let mut v = Vec::with_capacity(n.min(r.remaining() / 2));
    for _ in 0..n {
        v.push(read_str(r)?);
    }
    Ok(v)
}

fn read_range(r: &mut ByteReader<'_>) -> Result<Range<u64>, CodecError> {
    let start = r.u64()?;
    let end = r.u64()?;
    if end < start {
        return Err(CodecError::Malformed(format!("cell range [{start}, {end})")));
    }
    Ok(start..end)
}

/// Serializes `m` into one frame. Fails only for messages that cannot be
/// represented (oversized identifiers, lists or payloads).
pub fn encode_message(m: &Message) -> Result<Vec<u8>, CodecError> {
    check_ident(&m.study_id)?;
    let mut body = ByteWriter::new();
    body.str(&m.study_id);
    body.u64(m.simulation_id);
    match &m.body {
        Body::Hello { cells, fields } | Body::Welcome { cells, fields, .. } => {
            if fields.len() > u16::MAX as usize {
                return Err(CodecError::Malformed("too many fields".into()));
            }
            for f in fields {
                check_ident(f)?;
            }
            if cells.end < cells.start {
                return Err(CodecError::Malformed("inverted cell range".into()));
            }
            if let Body::Welcome { rank, n_timesteps, .. } = &m.body {
                body.u32(*rank);
                body.u32(*n_timesteps);
            }
            body.u64(cells.start);
            body.u64(cells.end);
            write_names(&mut body, fields);
        }
        Body::Data(d) => {
            check_ident(&d.field)?;
            let count = u32::try_from(d.values.len())
                .map_err(|_| CodecError::Malformed("payload too long".into()))?;
            body.str(&d.field);
            body.u32(d.timestep);
            body.u64(d.offset);
            body.u32(count);
            body.f64s(&d.values);
        }
        Body::Goodbye | Body::Ack => {}
        Body::Heartbeat { sequence } => body.u64(*sequence),
    }
    let len = body.len() as u64;
    if len > u64::from(MAX_BODY_LEN) {
        return Err(CodecError::LengthOverflow {
            len,
            max: MAX_BODY_LEN,
        });
    }
    let mut out = ByteWriter::with_capacity(HEADER_LEN + body.len());
    out.bytes(&MAGIC);
    out.u8(PROTOCOL_VERSION);
    out.u8(m.kind() as u8);
    out.u16(0);
    out.u32(len as u32);
    out.bytes(&body.into_inner());
    Ok(out.into_inner())
}

/// Validates a frame header, returning the kind and body length.
fn parse_header(h: &[u8]) -> Result<(MessageKind, usize), CodecError> {
    let mut r = ByteReader::new(h);
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != PROTOCOL_VERSION {
        return Err(CodecError::VersionMismatch {
            found: version,
            expected: PROTOCOL_VERSION,
        });
    }
    let kind_byte = r.u8()?;
    let _reserved = r.u16()?;
    let len = r.u32()?;
    if len > MAX_BODY_LEN {
        return Err(CodecError::LengthOverflow {
            len: u64::from(len),
            max: MAX_BODY_LEN,
        });
    }
    let kind = MessageKind::from_u8(kind_byte).ok_or(CodecError::UnknownKind(kind_byte))?;
    Ok((kind, len as usize))
}

fn parse_body(kind: MessageKind, body: &[u8]) -> Result<Message, CodecError> {
    let mut r = ByteReader::new(body);
    let study_id = read_str(&mut r)?;
    let simulation_id = r.u64()?;
    let body = match kind {
        MessageKind::Hello => {
            let cells = read_range(&mut r)?;
            let fields = read_names(&mut r)?;
            Body::Hello { cells, fields }
        }
        MessageKind::Welcome => {
            let rank = r.u32()?;
            let n_timesteps = r.u32()?;
            let cells = read_range(&mut r)?;
            let fields = read_names(&mut r)?;
            Body::Welcome {
                rank,
                cells,
                n_timesteps,
                fields,
            }
        }
        MessageKind::Data => {
            let field = read_str(&mut r)?;
            let timestep = r.u32()?;
            let offset = r.u64()?;
            let count = r.u32()? as usize;
            if count as u64 * 8 != r.remaining() as u64 {
                return Err(CodecError::Malformed(format!(
                    "value count {count} disagrees with {} payload bytes",
                    r.remaining()
                )));
            }
            let values = r.f64s(count)?;
            Body::Data(DataChunk {
                field,
                timestep,
                offset,
                values,
            })
        }
        MessageKind::Goodbye => Body::Goodbye,
        MessageKind::Heartbeat => Body::Heartbeat { sequence: r.u64()? },
        MessageKind::Ack => Body::Ack,
    };
    if r.remaining() != 0 {
        return Err(CodecError::TrailingBytes(r.remaining()));
    }
    Ok(Message {
        study_id,
        simulation_id,
        body,
    })
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<Message, CodecError> {
    if bytes.len() < HEADER_LEN {
        // report a wrong magic before a short read when we can see it
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(CodecError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(CodecError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let (kind, len) = parse_header(&bytes[..HEADER_LEN])?;
    let rest = &bytes[HEADER_LEN..];
    if rest.len() < len {
        return Err(CodecError::Truncated {
            needed: len,
            available: rest.len(),
        });
    }
    if rest.len() > len {
        return Err(CodecError::TrailingBytes(rest.len() - len));
    }
    parse_body(kind, rest)
}

/// Reads one frame from a stream. `Ok(None)` means the peer closed the
/// stream cleanly between frames.
pub fn read_message(r: &mut impl Read) -> Result<Option<Message>, CodecError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(CodecError::Truncated {
                    needed: HEADER_LEN,
                    available: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (kind, len) = parse_header(&header)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CodecError::Truncated {
                needed: len,
                available: 0,
            }
        } else {
            e.into()
        }
    })?;
    parse_body(kind, &body).map(Some)
}

pub fn write_message(w: &mut impl Write, m: &Message) -> Result<(), CodecError> {
    let frame = encode_message(m)?;
    w.write_all(&frame)?;
    Ok(())
}
