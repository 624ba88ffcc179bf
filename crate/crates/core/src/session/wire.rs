//! Framed message protocol between Alice and Bob.
//!
//! ```text
//! "QKDP" | version u8 | msg_type u8 | payload_len u32 LE | payload
//! ```
//!
//! Integers inside payloads are little-endian. Bit strings are packed
//! MSB-first and prefixed by their bit count.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};

use thiserror::Error;

use crate::cascade::FrameQuery;
use crate::finitekey::{CellTally, ObservedTallies};
use crate::session::keybuf::{pack_bits, unpack_bits};

pub const MAGIC: [u8; 4] = *b"QKDP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;

pub mod msg {
    pub const DETECTED_INDICES: u8 = 0x01;
    pub const BASIS_REVEAL: u8 = 0x02;
    pub const X_BITS_DISCLOSE: u8 = 0x03;
    pub const TALLY_DIGEST: u8 = 0x04;
    pub const PARITY_REQUEST: u8 = 0x10;
    pub const PARITY_REPLY: u8 = 0x11;
    pub const FRAME_CRC64: u8 = 0x12;
    pub const PA_SEED: u8 = 0x20;
    pub const PA_CONFIRM: u8 = 0x21;
    pub const ABORT: u8 = 0xFF;
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("link closed")]
    Closed,
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("malformed 0x{msg_type:02x} payload: {reason}")]
    Malformed { msg_type: u8, reason: String },
    #[error("unexpected message 0x{got:02x}, wanted {wanted}")]
    Unexpected { got: u8, wanted: &'static str },
    #[error("peer aborted (code {code}): {reason}")]
    Aborted { code: u8, reason: String },
}

pub fn write_frame<W: Write>(w: &mut W, msg_type: u8, payload: &[u8]) -> Result<(), WireError> {
    let len = u32::try_from(payload.len()).map_err(|_| WireError::Malformed {
        msg_type,
        reason: "payload exceeds u32 length".into(),
    })?;
    let mut head = [0u8; HEADER_LEN];
    head[..4].copy_from_slice(&MAGIC);
    head[4] = VERSION;
    head[5] = msg_type;
    head[6..].copy_from_slice(&len.to_le_bytes());
    w.write_all(&head)?;
    w.write_all(payload)?;
    Ok(())
}

/// Reads one frame. A clean EOF before the first header byte is `Closed`.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(u8, Vec<u8>), WireError> {
    let mut head = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Err(WireError::Closed),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let magic: [u8; 4] = head[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if head[4] != VERSION {
        return Err(WireError::BadVersion(head[4]));
    }
    let len = u32::from_le_bytes(head[6..].try_into().expect("4 bytes")) as u64;
    // grow as data arrives instead of trusting the header with one allocation
    let mut payload = Vec::with_capacity(len.min(1 << 20) as usize);
    r.take(len).read_to_end(&mut payload)?;
    if payload.len() as u64 != len {
        return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into());
    }
    Ok((head[5], payload))
}

/// CRC exchange sub-messages carried by `FRAME_CRC64`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CrcMsg {
    /// Bob asks for tags of these frames.
    Request(Vec<u32>),
    /// Alice's `(frame_id, crc64)` tags.
    Tags(Vec<(u32, u64)>),
    /// Bob's pass/fail per requested frame.
    Verdict(Vec<bool>),
    /// Alice reveals a failed frame.
    Reveal { frame_id: u32, bits: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Detected pulse indices, increasing, delta-coded against `base`.
    DetectedIndices { base: u64, indices: Vec<u64> },
    /// Bases for the last index batch (`1` = X). Alice adds intensity labels
    /// (`1` = decoy).
    BasisReveal { bases: Vec<u8>, intensities: Option<Vec<u8>> },
    XBitsDisclose(Vec<u8>),
    /// SHA-256 of the session configuration.
    ConfigDigest([u8; 32]),
    Tallies(ObservedTallies),
    ParityRequest(FrameQuery),
    ParityReply { frame_id: u32, pass: u8, parities: Vec<u8> },
    Crc(CrcMsg),
    PaSeed { seed: [u8; 32], out_len: u64, in_len: u64 },
    PaConfirm([u8; 32]),
    Abort { code: u8, reason: String },
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    msg_type: u8,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], msg_type: u8) -> Self {
        Cursor { buf, pos: 0, msg_type }
    }

    fn err(&self, reason: &str) -> WireError {
        WireError::Malformed {
            msg_type: self.msg_type,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array32(&mut self) -> Result<[u8; 32], WireError> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn varint(&mut self) -> Result<u32, WireError> {
        let mut v: u64 = 0;
        for shift in (0..35).step_by(7) {
            let b = self.u8()?;
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return u32::try_from(v).map_err(|_| self.err("varint overflow"));
            }
        }
        Err(self.err("varint too long"))
    }

    fn bits(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n.div_ceil(8))?;
        Ok(unpack_bits(bytes, n))
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

fn put_bits(out: &mut Vec<u8>, bits: &[u8]) {
    out.extend_from_slice(&(bits.len() as u32).to_le_bytes());
    out.extend_from_slice(&pack_bits(bits));
}

fn put_varint(out: &mut Vec<u8>, mut v: u32) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn put_cell(out: &mut Vec<u8>, c: &CellTally) {
    for v in [c.sent, c.detected, c.errors] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::DetectedIndices { .. } => msg::DETECTED_INDICES,
            Message::BasisReveal { .. } => msg::BASIS_REVEAL,
            Message::XBitsDisclose(_) => msg::X_BITS_DISCLOSE,
            Message::ConfigDigest(_) | Message::Tallies(_) => msg::TALLY_DIGEST,
            Message::ParityRequest(_) => msg::PARITY_REQUEST,
            Message::ParityReply { .. } => msg::PARITY_REPLY,
            Message::Crc(_) => msg::FRAME_CRC64,
            Message::PaSeed { .. } => msg::PA_SEED,
            Message::PaConfirm(_) => msg::PA_CONFIRM,
            Message::Abort { .. } => msg::ABORT,
        }
    }

    /// Bits of information about the key that this message reveals.
    pub fn disclosed_bits(&self) -> u64 {
        match self {
            Message::XBitsDisclose(b) => b.len() as u64,
            Message::ParityReply { parities, .. } => parities.len() as u64,
            Message::Crc(CrcMsg::Tags(t)) => 64 * t.len() as u64,
            Message::Crc(CrcMsg::Reveal { bits, .. }) => bits.len() as u64,
            _ => 0,
        }
    }

    /// Encodes the payload. Fails if a delta does not fit a `u32` varint or
    /// indices are not increasing.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = Vec::new();
        match self {
            Message::DetectedIndices { base, indices } => {
                out.extend_from_slice(&base.to_le_bytes());
                out.extend_from_slice(&(indices.len() as u32).to_le_bytes());
                let mut prev = *base;
                for &i in indices {
                    let d = i
                        .checked_sub(prev)
                        .and_then(|d| u32::try_from(d).ok())
                        .ok_or(WireError::Malformed {
                            msg_type: msg::DETECTED_INDICES,
                            reason: "indices must increase by < 2^32".into(),
                        })?;
                    put_varint(&mut out, d);
                    prev = i;
                }
            }
            Message::BasisReveal { bases, intensities } => {
                out.push(u8::from(intensities.is_some()));
                put_bits(&mut out, bases);
                if let Some(k) = intensities {
                    put_bits(&mut out, k);
                }
            }
            Message::XBitsDisclose(bits) => put_bits(&mut out, bits),
            Message::ConfigDigest(d) => {
                out.push(0);
                out.extend_from_slice(d);
            }
            Message::Tallies(t) => {
                out.push(1);
                for c in t.z.iter().chain(&t.x) {
                    put_cell(&mut out, c);
                }
                out.extend_from_slice(&t.duration_s.to_bits().to_le_bytes());
            }
            Message::ParityRequest(q) => {
                out.extend_from_slice(&q.frame_id.to_le_bytes());
                out.push(q.pass);
                out.extend_from_slice(&(q.ranges.len() as u32).to_le_bytes());
                for &(s, e) in &q.ranges {
                    out.extend_from_slice(&s.to_le_bytes());
                    out.extend_from_slice(&e.to_le_bytes());
                }
            }
            Message::ParityReply { frame_id, pass, parities } => {
                out.extend_from_slice(&frame_id.to_le_bytes());
                out.push(*pass);
                put_bits(&mut out, parities);
            }
            Message::Crc(c) => match c {
                CrcMsg::Request(ids) => {
                    out.push(0);
                    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
                    for id in ids {
                        out.extend_from_slice(&id.to_le_bytes());
                    }
                }
                CrcMsg::Tags(tags) => {
                    out.push(1);
                    out.extend_from_slice(&(tags.len() as u32).to_le_bytes());
                    for (id, crc) in tags {
                        out.extend_from_slice(&id.to_le_bytes());
                        out.extend_from_slice(&crc.to_le_bytes());
                    }
                }
                CrcMsg::Verdict(v) => {
                    out.push(2);
                    let bits: Vec<u8> = v.iter().map(|&ok| u8::from(ok)).collect();
                    put_bits(&mut out, &bits);
                }
                CrcMsg::Reveal { frame_id, bits } => {
                    out.push(3);
                    out.extend_from_slice(&frame_id.to_le_bytes());
                    put_bits(&mut out, bits);
                }
            },
            Message::PaSeed { seed, out_len, in_len } => {
                out.extend_from_slice(seed);
                out.extend_from_slice(&out_len.to_le_bytes());
                out.extend_from_slice(&in_len.to_le_bytes());
            }
            Message::PaConfirm(d) => out.extend_from_slice(d),
            Message::Abort { code, reason } => {
                out.push(*code);
                out.extend_from_slice(reason.as_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(msg_type: u8, payload: &[u8]) -> Result<Message, WireError> {
        let mut c = Cursor::new(payload, msg_type);
        let m = match msg_type {
            msg::DETECTED_INDICES => {
                let base = c.u64()?;
                let n = c.u32()? as usize;
                let mut indices = Vec::with_capacity(n.min(payload.len()));
                let mut prev = base;
                for _ in 0..n {
                    prev = prev
                        .checked_add(u64::from(c.varint()?))
                        .ok_or_else(|| c.err("index overflow"))?;
                    indices.push(prev);
                }
                Message::DetectedIndices { base, indices }
            }
            msg::BASIS_REVEAL => {
                let with_k = c.u8()?;
                let bases = c.bits()?;
                let intensities = match with_k {
                    0 => None,
                    1 => {
                        let k = c.bits()?;
                        if k.len() != bases.len() {
                            return Err(c.err("label count differs from basis count"));
                        }
                        Some(k)
                    }
                    _ => return Err(c.err("bad flag")),
                };
                Message::BasisReveal { bases, intensities }
            }
            msg::X_BITS_DISCLOSE => Message::XBitsDisclose(c.bits()?),
            msg::TALLY_DIGEST => match c.u8()? {
                0 => Message::ConfigDigest(c.array32()?),
                1 => {
                    let mut cells = [CellTally::default(); 4];
                    for cell in cells.iter_mut() {
                        *cell = CellTally {
                            sent: c.u64()?,
                            detected: c.u64()?,
                            errors: c.u64()?,
                        };
                    }
                    let duration_s = f64::from_bits(c.u64()?);
                    Message::Tallies(ObservedTallies {
                        z: [cells[0], cells[1]],
                        x: [cells[2], cells[3]],
                        duration_s,
                    })
                }
                _ => return Err(c.err("bad digest kind")),
            },
            msg::PARITY_REQUEST => {
                let frame_id = c.u32()?;
                let pass = c.u8()?;
                let n = c.u32()? as usize;
                let mut ranges = Vec::with_capacity(n.min(payload.len() / 8));
                for _ in 0..n {
                    ranges.push((c.u32()?, c.u32()?));
                }
                Message::ParityRequest(FrameQuery { frame_id, pass, ranges })
            }
            msg::PARITY_REPLY => Message::ParityReply {
                frame_id: c.u32()?,
                pass: c.u8()?,
                parities: c.bits()?,
            },
            msg::FRAME_CRC64 => Message::Crc(match c.u8()? {
                0 => {
                    let n = c.u32()? as usize;
                    let mut ids = Vec::with_capacity(n.min(payload.len() / 4));
                    for _ in 0..n {
                        ids.push(c.u32()?);
                    }
                    CrcMsg::Request(ids)
                }
                1 => {
                    let n = c.u32()? as usize;
                    let mut tags = Vec::with_capacity(n.min(payload.len() / 12));
                    for _ in 0..n {
                        tags.push((c.u32()?, c.u64()?));
                    }
                    CrcMsg::Tags(tags)
                }
                2 => CrcMsg::Verdict(c.bits()?.into_iter().map(|b| b == 1).collect()),
                3 => CrcMsg::Reveal {
                    frame_id: c.u32()?,
                    bits: c.bits()?,
                },
                _ => return Err(c.err("bad crc sub-type")),
            }),
            msg::PA_SEED => Message::PaSeed {
                seed: c.array32()?,
                out_len: c.u64()?,
                in_len: c.u64()?,
            },
            msg::PA_CONFIRM => Message::PaConfirm(c.array32()?),
            msg::ABORT => {
                let code = c.u8()?;
                let reason = String::from_utf8_lossy(c.take(payload.len() - 1)?).into_owned();
                Message::Abort { code, reason }
            }
            other => return Err(WireError::UnknownType(other)),
        };
        c.finish()?;
        Ok(m)
    }
}

/// Traffic counters of one link endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LinkStats {
    pub frames_sent: u64,
    pub frames_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Key-related bits carried in either direction, per
    /// [`Message::disclosed_bits`].
    pub disclosed_bits: u64,
}

/// Reliable in-order message link over a byte stream. Sends are buffered and
/// flushed before every receive, so strict request/reply use never deadlocks.
pub struct Link<R: Read, W: Write> {
    reader: BufReader<R>,
    writer: BufWriter<W>,
    stats: LinkStats,
}

pub type TcpLink = Link<TcpStream, TcpStream>;

impl<R: Read, W: Write> Link<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Link {
            reader: BufReader::with_capacity(1 << 16, reader),
            writer: BufWriter::with_capacity(1 << 16, writer),
            stats: LinkStats::default(),
        }
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    pub fn send(&mut self, m: &Message) -> Result<(), WireError> {
        let payload = m.encode()?;
        write_frame(&mut self.writer, m.msg_type(), &payload)?;
        self.stats.frames_sent += 1;
        self.stats.bytes_sent += (HEADER_LEN + payload.len()) as u64;
        self.stats.disclosed_bits += m.disclosed_bits();
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), WireError> {
        self.writer.flush()?;
        Ok(())
    }

    /// Receives the next message. A peer `Abort` surfaces as
    /// [`WireError::Aborted`].
    pub fn recv(&mut self) -> Result<Message, WireError> {
        self.flush()?;
        let (t, payload) = read_frame(&mut self.reader)?;
        self.stats.frames_received += 1;
        self.stats.bytes_received += (HEADER_LEN + payload.len()) as u64;
        let m = Message::decode(t, &payload)?;
        self.stats.disclosed_bits += m.disclosed_bits();
        if let Message::Abort { code, reason } = m {
            return Err(WireError::Aborted { code, reason });
        }
        Ok(m)
    }

    /// Best-effort abort notice to the peer.
    pub fn abort(&mut self, code: u8, reason: &str) {
        let _ = self.send(&Message::Abort {
            code,
            reason: reason.to_owned(),
        });
        let _ = self.flush();
    }
}

impl TcpLink {
    pub fn from_tcp(stream: TcpStream) -> io::Result<TcpLink> {
        stream.set_nodelay(true)?;
        let r = stream.try_clone()?;
        Ok(Link::new(r, stream))
    }

    /// Two connected endpoints over a localhost TCP socket.
    pub fn loopback_pair() -> io::Result<(TcpLink, TcpLink)> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let a = TcpStream::connect(listener.local_addr()?)?;
        let (b, _) = listener.accept()?;
        Ok((TcpLink::from_tcp(a)?, TcpLink::from_tcp(b)?))
    }
}

/// Receives and requires a specific message kind.
#[macro_export]
macro_rules! expect_msg {
    ($link:expr, $pat:pat => $out:expr, $what:literal) => {
        match $link.recv()? {
            $pat => $out,
            other => {
                return Err($crate::session::wire::WireError::Unexpected {
                    got: other.msg_type(),
                    wanted: $what,
                }
                .into())
            }
        }
    };
}
