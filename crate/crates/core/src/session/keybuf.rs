//! Key buffers, leak accounting and the on-disk key format.
//!
//! Key file layout (32-byte header, then bits packed MSB-first):
//!
//! ```text
//! "QKDK" | role u8 | 3 reserved | length_bits u64 LE | seed digest [16]
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KEY_MAGIC: [u8; 4] = *b"QKDK";
pub const KEY_HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("role can only move forward: {from:?} -> {to:?}")]
    RoleRegression { from: KeyRole, to: KeyRole },
    #[error("bad key file: {0}")]
    BadFile(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyRole {
    Raw = 0,
    Sifted = 1,
    Reconciled = 2,
    Secret = 3,
}

impl KeyRole {
    pub fn from_u8(v: u8) -> Option<KeyRole> {
        Some(match v {
            0 => KeyRole::Raw,
            1 => KeyRole::Sifted,
            2 => KeyRole::Reconciled,
            3 => KeyRole::Secret,
            _ => return None,
        })
    }
}

/// Disclosed information, split by origin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakLedger {
    /// X-basis bits announced during sifting.
    pub x_bits: u64,
    /// Cascade parities, bootstrap sample included.
    pub parity_bits: u64,
    /// CRC tags and revealed failed frames.
    pub verification_bits: u64,
}

impl LeakLedger {
    pub fn total(&self) -> u64 {
        self.x_bits + self.parity_bits + self.verification_bits
    }

    /// Leak charged against the Z key by error correction.
    pub fn reconciliation(&self) -> u64 {
        self.parity_bits + self.verification_bits
    }
}

/// A bit string (one bit per byte, values 0/1) with its role and leak ledger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyBuffer {
    role: KeyRole,
    bits: Vec<u8>,
    leak: LeakLedger,
    crc_ok: bool,
}

impl Default for KeyBuffer {
    fn default() -> Self {
        KeyBuffer::new(KeyRole::Raw, Vec::new())
    }
}

impl KeyBuffer {
    pub fn new(role: KeyRole, bits: Vec<u8>) -> KeyBuffer {
        debug_assert!(bits.iter().all(|&b| b <= 1));
        KeyBuffer {
            role,
            bits,
            leak: LeakLedger::default(),
            crc_ok: true,
        }
    }

    pub fn role(&self) -> KeyRole {
        self.role
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn leak(&self) -> &LeakLedger {
        &self.leak
    }

    pub fn leak_bits(&self) -> u64 {
        self.leak.total()
    }

    pub fn crc_ok(&self) -> bool {
        self.crc_ok
    }

    pub fn set_crc_ok(&mut self, ok: bool) {
        self.crc_ok = ok;
    }

    pub fn charge_x_bits(&mut self, n: u64) {
        self.leak.x_bits += n;
    }

    pub fn charge_parities(&mut self, n: u64) {
        self.leak.parity_bits += n;
    }

    pub fn charge_verification(&mut self, n: u64) {
        self.leak.verification_bits += n;
    }

    pub fn extend(&mut self, bits: &[u8]) {
        self.bits.extend_from_slice(bits);
    }

    /// Replaces the contents and moves to a later role, keeping the ledger.
    pub fn promote(&mut self, role: KeyRole, bits: Vec<u8>) -> Result<(), KeyError> {
        if role <= self.role {
            return Err(KeyError::RoleRegression { from: self.role, to: role });
        }
        self.role = role;
        self.bits = bits;
        Ok(())
    }

    pub fn write_file(&self, path: &Path, seed_digest: &[u8; 16]) -> Result<(), KeyError> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        f.write_all(&encode_header(self.role, self.bits.len() as u64, seed_digest))?;
        f.write_all(&pack_bits(&self.bits))?;
        f.flush()?;
        Ok(())
    }

    /// Reads a key file; returns the buffer and the header's seed digest.
    pub fn read_file(path: &Path) -> Result<(KeyBuffer, [u8; 16]), KeyError> {
        let data = fs::read(path)?;
        if data.len() < KEY_HEADER_LEN {
            return Err(KeyError::BadFile("short header".into()));
        }
        if data[..4] != KEY_MAGIC {
            return Err(KeyError::BadFile("bad magic".into()));
        }
        let role = KeyRole::from_u8(data[4]).ok_or_else(|| KeyError::BadFile(format!("bad role {}", data[4])))?;
        let n = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes")) as usize;
        let digest: [u8; 16] = data[16..32].try_into().expect("16 bytes");
        let body = &data[KEY_HEADER_LEN..];
        if body.len() != n.div_ceil(8) {
            return Err(KeyError::BadFile(format!("{} body bytes for {n} bits", body.len())));
        }
        Ok((KeyBuffer::new(role, unpack_bits(body, n)), digest))
    }
}

pub fn encode_header(role: KeyRole, len_bits: u64, seed_digest: &[u8; 16]) -> [u8; KEY_HEADER_LEN] {
    let mut h = [0u8; KEY_HEADER_LEN];
    h[..4].copy_from_slice(&KEY_MAGIC);
    h[4] = role as u8;
    h[8..16].copy_from_slice(&len_bits.to_le_bytes());
    h[16..].copy_from_slice(seed_digest);
    h
}

/// Packs 0/1 bytes MSB-first; the last byte is zero-padded.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        out[i / 8] |= (b & 1) << (7 - i % 8);
    }
    out
}

/// Inverse of [`pack_bits`] for the first `n` bits.
pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect()
}
