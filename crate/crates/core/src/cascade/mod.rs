//! Cascade error reconciliation.
//!
//! Frames are reconciled in groups of [`CascadeConfig::parallel_units`]. Bob
//! drives: every round he advances all unfinished frames of the group, sends
//! their parity queries in one batch and absorbs Alice's replies. After the
//! last pass each frame is checked with a CRC-64; failing frames are revealed
//! in full and dropped from the key.

mod engine;
mod link;

use std::sync::Arc;

use crc::{Crc, CRC_64_ECMA_182};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use engine::{FrameQuery, FrameState, Layout, Layouts, ParitySource};
pub use link::{reconcile_stream_alice, reconcile_stream_bob, BobReconciled};

use crate::finitekey::binary_entropy;
use crate::session::wire::WireError;

pub const DEFAULT_FRAME_BITS: usize = 65_536;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("frame length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Top-level block lengths per pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSchedule {
    /// `k1 = max(2, round(0.73 / Q))`, doubling every pass.
    Classic,
    /// Power-of-two first block near `1 / Q`, a second pass at four times
    /// that, then half-frame blocks for the remaining passes.
    Tuned,
    /// Explicit lengths, one per pass.
    Fixed(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub frame_bits: usize,
    pub passes: usize,
    pub schedule: BlockSchedule,
    pub parallel_units: usize,
    pub rng_seed: u64,
    /// Share of the first frame disclosed to estimate the QBER when no
    /// estimate is supplied.
    pub bootstrap_fraction: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            frame_bits: DEFAULT_FRAME_BITS,
            passes: 16,
            schedule: BlockSchedule::Tuned,
            parallel_units: 100,
            rng_seed: 0x5eed_cafe,
            bootstrap_fraction: 0.01,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<(), CascadeError> {
        let bad = |m: &str| Err(CascadeError::Config(m.into()));
        if self.frame_bits < 2 || self.frame_bits >= 1 << 24 {
            return bad("frame_bits must be in [2, 2^24)");
        }
        if self.passes < 2 || self.passes > 64 {
            return bad("passes must be in [2, 64]");
        }
        if self.parallel_units == 0 {
            return bad("parallel_units must be positive");
        }
        if !(0.0..=1.0).contains(&self.bootstrap_fraction) {
            return bad("bootstrap_fraction must be in [0, 1]");
        }
        if let BlockSchedule::Fixed(v) = &self.schedule {
            if v.is_empty() || v.contains(&0) {
                return bad("fixed schedule needs nonzero block lengths");
            }
        }
        Ok(())
    }

    /// Block lengths for a frame of `n` bits at estimated QBER `qber`.
    pub fn block_lengths(&self, n: usize, qber: f64) -> Vec<usize> {
        let q = qber.clamp(1e-4, 0.25);
        let cap = |k: usize| k.clamp(1, n.max(1));
        let half = cap(n.div_ceil(2));
        match &self.schedule {
            BlockSchedule::Classic => {
                let k1 = ((0.73 / q).round() as usize).max(2);
                (0..self.passes).map(|i| cap(k1 << i.min(40))).collect()
            }
            BlockSchedule::Tuned => {
                let k1 = 1usize << (1.0 / q).log2().ceil() as u32;
                let k2 = k1 * 4;
                (0..self.passes)
                    .map(|i| match i {
                        0 => cap(k1).min(half),
                        1 => cap(k2).min(half),
                        _ => half,
                    })
                    .collect()
            }
            BlockSchedule::Fixed(v) => v.iter().map(|&k| cap(k)).collect(),
        }
    }
}

pub fn crc64(bits: &[u8]) -> u64 {
    CRC64.checksum(&crate::session::keybuf::pack_bits(bits))
}

/// Outcome of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub frame_id: u32,
    pub bits: usize,
    /// Errors found: corrections for passing frames, the true count for
    /// revealed ones.
    pub errors: u64,
    pub disclosed_parities: u64,
    pub crc_ok: bool,
}

impl FrameOutcome {
    /// Disclosed parities over `bits * h(E)`; `None` for error-free frames.
    pub fn efficiency(&self) -> Option<f64> {
        if self.errors == 0 || self.bits == 0 {
            return None;
        }
        let e = self.errors as f64 / self.bits as f64;
        Some(self.disclosed_parities as f64 / (self.bits as f64 * binary_entropy(e).ok()?))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconcileReport {
    pub frames: u64,
    pub bits: u64,
    pub corrected_bits: u64,
    pub disclosed_parities: u64,
    /// Aggregate `disclosed / (bits h(E))` over all frames.
    pub f_efficiency: f64,
    /// Mean of the per-frame efficiencies.
    pub mean_frame_f: f64,
    pub frame_error_rate: f64,
    pub crc_failures: u64,
    /// CRC tags plus revealed frames, on top of the parities.
    pub verification_bits: u64,
}

impl ReconcileReport {
    pub fn from_outcomes(outcomes: &[FrameOutcome], verification_bits: u64) -> ReconcileReport {
        let frames = outcomes.len() as u64;
        let bits: u64 = outcomes.iter().map(|o| o.bits as u64).sum();
        let errors: u64 = outcomes.iter().map(|o| o.errors).sum();
        let disclosed: u64 = outcomes.iter().map(|o| o.disclosed_parities).sum();
        let crc_failures = outcomes.iter().filter(|o| !o.crc_ok).count() as u64;
        let f_efficiency = if errors > 0 && bits > 0 {
            disclosed as f64 / (bits as f64 * binary_entropy(errors as f64 / bits as f64).unwrap_or(1.0))
        } else {
            0.0
        };
        let per_frame: Vec<f64> = outcomes.iter().filter_map(FrameOutcome::efficiency).collect();
        let mean_frame_f = if per_frame.is_empty() {
            0.0
        } else {
            per_frame.iter().sum::<f64>() / per_frame.len() as f64
        };
        ReconcileReport {
            frames,
            bits,
            corrected_bits: outcomes.iter().filter(|o| o.crc_ok).map(|o| o.errors).sum(),
            disclosed_parities: disclosed,
            f_efficiency,
            mean_frame_f,
            frame_error_rate: if frames > 0 { crc_failures as f64 / frames as f64 } else { 0.0 },
            crc_failures,
            verification_bits,
        }
    }

    /// Every bit disclosed about the key during reconciliation.
    pub fn leak_bits(&self) -> u64 {
        self.disclosed_parities + self.verification_bits
    }
}

/// Frame boundaries for a key of `len` bits.
pub fn frame_ranges(len: usize, frame_bits: usize) -> Vec<std::ops::Range<usize>> {
    (0..len.div_ceil(frame_bits))
        .map(|i| i * frame_bits..((i + 1) * frame_bits).min(len))
        .collect()
}

/// Sorted sample positions for the QBER bootstrap of a frame.
pub fn bootstrap_sample(n: usize, fraction: f64, seed: u64) -> Vec<u32> {
    let m = ((n as f64 * fraction).round() as usize).min(n);
    if m == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb007_5ea3);
    let mut v: Vec<u32> = index::sample(&mut rng, n, m).into_iter().map(|i| i as u32).collect();
    v.sort_unstable();
    v
}

/// QBER estimate from a `(errors, bits)` observation, kept away from zero so
/// block sizing stays finite.
pub fn qber_estimate(errors: u64, bits: u64) -> f64 {
    (errors as f64 + 1.0) / (bits as f64 + 2.0)
}

/// Shared layout caches, one per distinct frame length.
#[derive(Debug, Default)]
pub struct LayoutCache {
    seed: u64,
    by_len: std::sync::Mutex<std::collections::HashMap<usize, Arc<Layouts>>>,
}

impl LayoutCache {
    pub fn new(seed: u64) -> LayoutCache {
        LayoutCache {
            seed,
            by_len: Default::default(),
        }
    }

    pub fn get(&self, n: usize) -> Arc<Layouts> {
        let mut m = self.by_len.lock().expect("layout cache poisoned");
        Arc::clone(m.entry(n).or_insert_with(|| Arc::new(Layouts::new(n, self.seed))))
    }
}

/// Drives a group of Bob frames to completion against `oracle`, which answers
/// one batch of queries per round.
pub fn run_rounds<F>(frames: &mut [FrameState], mut oracle: F) -> Result<(), CascadeError>
where
    F: FnMut(&[FrameQuery]) -> Result<Vec<Vec<u8>>, CascadeError>,
{
    loop {
        let queries: Vec<FrameQuery> = frames.par_iter_mut().flat_map_iter(|f| f.advance()).collect();
        if queries.is_empty() {
            return Ok(());
        }
        let replies = oracle(&queries)?;
        if replies.len() != queries.len() {
            return Err(CascadeError::Protocol(format!(
                "{} replies for {} queries",
                replies.len(),
                queries.len()
            )));
        }
        // frames are in id order within a group; queries come out grouped by frame
        let mut it = queries.iter().zip(&replies).peekable();
        for f in frames.iter_mut() {
            while let Some((q, _)) = it.peek() {
                if q.frame_id != f.id {
                    break;
                }
                let (q, r) = it.next().expect("peeked");
                if r.len() != q.ranges.len() {
                    return Err(CascadeError::Protocol(format!("frame {}: reply length mismatch", q.frame_id)));
                }
                f.absorb(q, r);
            }
        }
        if it.next().is_some() {
            return Err(CascadeError::Protocol("reply for an unknown frame".into()));
        }
    }
}

/// Reconciles one frame against Alice's copy held locally. Useful for
/// testing and for single-process pipelines without a link.
pub fn reconcile_frame(alice: &[u8], bob: &[u8], qber: f64, cfg: &CascadeConfig) -> Result<(Vec<u8>, FrameOutcome), CascadeError> {
    let (mut out, mut outcomes) = reconcile_local(alice, bob, Some(qber), cfg)?;
    let o = outcomes.pop().unwrap_or(FrameOutcome {
        frame_id: 0,
        bits: 0,
        errors: 0,
        disclosed_parities: 0,
        crc_ok: true,
    });
    if !o.crc_ok {
        out = bob.to_vec();
    }
    Ok((out, o))
}

/// In-process reconciliation of a whole key. Returns the reconciled key
/// (passing frames only) and per-frame outcomes. With `qber = None` the first
/// frame discloses a bootstrap sample.
pub fn reconcile_local(
    alice: &[u8],
    bob: &[u8],
    qber: Option<f64>,
    cfg: &CascadeConfig,
) -> Result<(Vec<u8>, Vec<FrameOutcome>), CascadeError> {
    cfg.validate()?;
    if alice.len() != bob.len() {
        return Err(CascadeError::LengthMismatch(alice.len(), bob.len()));
    }
    let cache = LayoutCache::new(cfg.rng_seed);
    let ranges = frame_ranges(alice.len(), cfg.frame_bits);
    let mut estimate = qber;
    let mut out = Vec::with_capacity(bob.len());
    let mut outcomes = Vec::with_capacity(ranges.len());
    let (mut seen_err, mut seen_bits) = (0u64, 0u64);

    for (g, group) in ranges.chunks(cfg.parallel_units).enumerate() {
        let first = g * cfg.parallel_units;
        let mut frames: Vec<FrameState> = group
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let id = (first + i) as u32;
                let sample = if estimate.is_none() && id == 0 {
                    bootstrap_sample(r.len(), cfg.bootstrap_fraction, cfg.rng_seed)
                } else {
                    Vec::new()
                };
                let q = estimate.unwrap_or(0.02);
                FrameState::new(id, bob[r.clone()].to_vec(), cfg.block_lengths(r.len(), q), cache.get(r.len()), sample)
            })
            .collect();
        let mut sources: Vec<ParitySource> = group
            .iter()
            .map(|r| ParitySource::new(alice[r.clone()].to_vec(), cache.get(r.len())))
            .collect();
        if estimate.is_none() {
            // the sample has to be answered before any block can be sized
            let q = bootstrap_local(&mut frames[0], &mut sources[0]);
            for f in frames.iter_mut() {
                let n = f.bits().len();
                f.reset_blocks(cfg.block_lengths(n, q));
            }
        }
        run_group_local(&mut frames, &mut sources, first)?;
        finish_group(frames, &sources, &mut out, &mut outcomes, &mut seen_err, &mut seen_bits);
        estimate = Some(qber_estimate(seen_err, seen_bits));
    }
    Ok((out, outcomes))
}

fn bootstrap_local(frame: &mut FrameState, source: &mut ParitySource) -> f64 {
    for q in frame.advance() {
        let a = source.answer(&q).unwrap_or_default();
        frame.absorb(&q, &a);
    }
    let (e, n) = frame.sample_errors().unwrap_or((0, 0));
    qber_estimate(e, n)
}

fn run_group_local(frames: &mut [FrameState], sources: &mut [ParitySource], first: usize) -> Result<(), CascadeError> {
    run_rounds(frames, |queries| {
        let mut by_frame: Vec<Vec<(usize, &FrameQuery)>> = vec![Vec::new(); sources.len()];
        for (i, q) in queries.iter().enumerate() {
            by_frame[q.frame_id as usize - first].push((i, q));
        }
        let answered: Vec<Vec<(usize, Vec<u8>)>> = sources
            .par_iter_mut()
            .zip(by_frame.par_iter())
            .map(|(src, qs)| qs.iter().map(|&(i, q)| (i, src.answer(q).unwrap_or_default())).collect())
            .collect();
        let mut replies = vec![Vec::new(); queries.len()];
        for (i, r) in answered.into_iter().flatten() {
            replies[i] = r;
        }
        Ok(replies)
    })
}

fn finish_group(
    frames: Vec<FrameState>,
    sources: &[ParitySource],
    out: &mut Vec<u8>,
    outcomes: &mut Vec<FrameOutcome>,
    seen_err: &mut u64,
    seen_bits: &mut u64,
) {
    for (f, src) in frames.into_iter().zip(sources) {
        let ok = crc64(f.bits()) == crc64(src.bits());
        let errors = if ok {
            f.net_corrections()
        } else {
            f.initial_errors(src.bits())
        };
        *seen_err += errors;
        *seen_bits += f.bits().len() as u64;
        outcomes.push(FrameOutcome {
            frame_id: f.id,
            bits: f.bits().len(),
            errors,
            disclosed_parities: f.disclosed(),
            crc_ok: ok,
        });
        if ok {
            out.extend_from_slice(f.bits());
        }
    }
}

#[cfg(test)]
mod tests;
