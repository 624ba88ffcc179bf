//! Two-party protocol: pulse simulation, sifting over a framed link, and the
//! full Alice/Bob pipeline through reconciliation and privacy amplification.

pub mod keybuf;
pub mod pipeline;
pub mod sift;
pub mod sim;
pub mod wire;

use thiserror::Error;

use crate::cascade::CascadeError;
use crate::finitekey::FiniteKeyError;
use crate::pa::PaError;
use keybuf::KeyError;
use wire::WireError;

pub use pipeline::{run_alice, run_bob, run_loopback, Role, SessionConfig, SessionOutcome, SessionReport, SessionSeeds};
pub use sift::{sift, sift_alice, sift_bob, SiftState};
pub use sim::{alice_generate, channel_detect, AliceSource, ChannelSim, DetectionRecord, PulseRecord};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("link closed by peer")]
    LinkClosed,
    #[error("detected index {index} outside batch {base}..{}", base + len)]
    IndexOutOfRange { index: u64, base: u64, len: u64 },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("peer aborted ({code}): {reason}")]
    Aborted { code: u8, reason: String },
    #[error(transparent)]
    Wire(WireError),
    #[error(transparent)]
    Cascade(CascadeError),
    #[error(transparent)]
    Pa(PaError),
    #[error(transparent)]
    FiniteKey(#[from] FiniteKeyError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<WireError> for SessionError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Closed => SessionError::LinkClosed,
            WireError::Aborted { code, reason } => SessionError::Aborted { code, reason },
            e => SessionError::Wire(e),
        }
    }
}

impl From<CascadeError> for SessionError {
    fn from(e: CascadeError) -> Self {
        match e {
            CascadeError::Wire(w) => w.into(),
            e => SessionError::Cascade(e),
        }
    }
}

impl From<PaError> for SessionError {
    fn from(e: PaError) -> Self {
        match e {
            PaError::Wire(w) => w.into(),
            e => SessionError::Pa(e),
        }
    }
}

impl SessionError {
    /// True for failures caused by the configuration rather than the peer.
    pub fn is_config(&self) -> bool {
        matches!(self, SessionError::ConfigMismatch(_) | SessionError::Config(_))
            || matches!(self, SessionError::Aborted { code, .. } if *code == pipeline::ABORT_CONFIG)
    }
}
