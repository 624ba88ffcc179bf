//! Cascade over a [`Link`]: Bob drives, Alice answers.

use std::collections::HashMap;
use std::io::{Read, Write};

use super::{
    bootstrap_sample, crc64, frame_ranges, qber_estimate, CascadeConfig, CascadeError, FrameOutcome, FrameQuery,
    FrameState, LayoutCache, ParitySource, ReconcileReport,
};
use crate::session::keybuf::{KeyBuffer, KeyRole};
use crate::session::wire::{CrcMsg, Link, Message, WireError};

const ABORT_PROTOCOL: u8 = 3;

/// Bob's result of a reconciliation run.
#[derive(Debug, Clone)]
pub struct BobReconciled {
    pub key: KeyBuffer,
    pub report: ReconcileReport,
    pub outcomes: Vec<FrameOutcome>,
    /// Alice's full input as Bob now knows it: reconciled frames plus the
    /// revealed failed ones, in frame order.
    pub alice_bits: Vec<u8>,
}

fn exchange<R: Read, W: Write>(link: &mut Link<R, W>, queries: &[FrameQuery]) -> Result<Vec<Vec<u8>>, CascadeError> {
    for q in queries {
        link.send(&Message::ParityRequest(q.clone()))?;
    }
    let mut replies = Vec::with_capacity(queries.len());
    for q in queries {
        match link.recv()? {
            Message::ParityReply { frame_id, pass, parities } if frame_id == q.frame_id && pass == q.pass => {
                replies.push(parities)
            }
            Message::ParityReply { frame_id, .. } => {
                return Err(CascadeError::Protocol(format!(
                    "reply for frame {frame_id}, expected {}",
                    q.frame_id
                )))
            }
            other => {
                return Err(WireError::Unexpected {
                    got: other.msg_type(),
                    wanted: "parity reply",
                }
                .into())
            }
        }
    }
    Ok(replies)
}

/// Bob's side of [`reconcile_stream_alice`]. `qber_hint` sizes the first
/// group's blocks; without it the first frame discloses a sample.
///
/// The reconciled key has failed frames dropped and the reconciliation leak
/// charged.
pub fn reconcile_stream_bob<R: Read, W: Write>(
    link: &mut Link<R, W>,
    mut key: KeyBuffer,
    qber_hint: Option<f64>,
    cfg: &CascadeConfig,
) -> Result<BobReconciled, CascadeError> {
    cfg.validate()?;
    let cache = LayoutCache::new(cfg.rng_seed);
    let ranges = frame_ranges(key.len(), cfg.frame_bits);
    let mut estimate = qber_hint;
    let mut out = Vec::with_capacity(key.len());
    let mut alice_bits = Vec::with_capacity(key.len());
    let mut outcomes = Vec::with_capacity(ranges.len());
    let (mut seen_err, mut seen_bits, mut verification) = (0u64, 0u64, 0u64);

    for (g, group) in ranges.chunks(cfg.parallel_units).enumerate() {
        let first = g * cfg.parallel_units;
        let mut frames: Vec<FrameState> = group
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let id = (first + i) as u32;
                let sample = if estimate.is_none() && i == 0 {
                    bootstrap_sample(r.len(), cfg.bootstrap_fraction, cfg.rng_seed)
                } else {
                    Vec::new()
                };
                let q = estimate.unwrap_or(0.02);
                FrameState::new(id, key.bits()[r.clone()].to_vec(), cfg.block_lengths(r.len(), q), cache.get(r.len()), sample)
            })
            .collect();
        if estimate.is_none() {
            let queries = frames[0].advance();
            let replies = exchange(link, &queries)?;
            for (q, r) in queries.iter().zip(&replies) {
                frames[0].absorb(q, r);
            }
            let (e, n) = frames[0].sample_errors().unwrap_or((0, 0));
            let q = qber_estimate(e, n);
            for f in frames.iter_mut() {
                let n = f.bits().len();
                f.reset_blocks(cfg.block_lengths(n, q));
            }
        }
        super::run_rounds(&mut frames, |queries| exchange(link, queries))?;

        let ids: Vec<u32> = frames.iter().map(|f| f.id).collect();
        link.send(&Message::Crc(CrcMsg::Request(ids.clone())))?;
        let tags = match link.recv()? {
            Message::Crc(CrcMsg::Tags(t)) => t,
            other => {
                return Err(WireError::Unexpected {
                    got: other.msg_type(),
                    wanted: "crc tags",
                }
                .into())
            }
        };
        if tags.len() != ids.len() || tags.iter().zip(&ids).any(|((id, _), want)| id != want) {
            return Err(CascadeError::Protocol("crc tags do not match the request".into()));
        }
        verification += 64 * tags.len() as u64;
        let verdict: Vec<bool> = frames.iter().zip(&tags).map(|(f, (_, t))| crc64(f.bits()) == *t).collect();
        link.send(&Message::Crc(CrcMsg::Verdict(verdict.clone())))?;

        for (f, ok) in frames.into_iter().zip(verdict) {
            let errors = if ok {
                f.net_corrections()
            } else {
                let bits = match link.recv()? {
                    Message::Crc(CrcMsg::Reveal { frame_id, bits }) if frame_id == f.id && bits.len() == f.bits().len() => bits,
                    other => {
                        return Err(WireError::Unexpected {
                            got: other.msg_type(),
                            wanted: "frame reveal",
                        }
                        .into())
                    }
                };
                verification += bits.len() as u64;
                let e = f.initial_errors(&bits);
                alice_bits.extend_from_slice(&bits);
                e
            };
            seen_err += errors;
            seen_bits += f.bits().len() as u64;
            outcomes.push(FrameOutcome {
                frame_id: f.id,
                bits: f.bits().len(),
                errors,
                disclosed_parities: f.disclosed(),
                crc_ok: ok,
            });
            if ok {
                out.extend_from_slice(f.bits());
                alice_bits.extend_from_slice(f.bits());
            }
        }
        estimate = Some(qber_estimate(seen_err, seen_bits));
    }
    link.flush()?;

    let report = ReconcileReport::from_outcomes(&outcomes, verification);
    key.charge_parities(report.disclosed_parities);
    key.charge_verification(verification);
    key.set_crc_ok(report.crc_failures == 0);
    key.promote(KeyRole::Reconciled, out).map_err(|e| CascadeError::Protocol(e.to_string()))?;
    Ok(BobReconciled {
        key,
        report,
        outcomes,
        alice_bits,
    })
}

/// Alice's side: answers parity queries and CRC requests until every frame
/// of `key` has a verdict. Returns her reconciled key (same frames kept as
/// Bob's) with the same leak charged.
pub fn reconcile_stream_alice<R: Read, W: Write>(
    link: &mut Link<R, W>,
    mut key: KeyBuffer,
    cfg: &CascadeConfig,
) -> Result<KeyBuffer, CascadeError> {
    cfg.validate()?;
    let cache = LayoutCache::new(cfg.rng_seed);
    let ranges = frame_ranges(key.len(), cfg.frame_bits);
    let mut sources: HashMap<u32, ParitySource> = HashMap::new();
    let mut kept = vec![false; ranges.len()];
    let mut done = vec![false; ranges.len()];
    let mut decided = 0usize;
    let mut pending: Vec<u32> = Vec::new();
    let (mut parities, mut verification) = (0u64, 0u64);

    let result = (|| -> Result<(), CascadeError> {
        while decided < ranges.len() {
            match link.recv()? {
                Message::ParityRequest(q) => {
                    let r = ranges
                        .get(q.frame_id as usize)
                        .ok_or_else(|| CascadeError::Protocol(format!("unknown frame {}", q.frame_id)))?;
                    let src = sources
                        .entry(q.frame_id)
                        .or_insert_with(|| ParitySource::new(key.bits()[r.clone()].to_vec(), cache.get(r.len())));
                    let ans = src
                        .answer(&q)
                        .ok_or_else(|| CascadeError::Protocol(format!("bad range for frame {}", q.frame_id)))?;
                    parities += ans.len() as u64;
                    link.send(&Message::ParityReply {
                        frame_id: q.frame_id,
                        pass: q.pass,
                        parities: ans,
                    })?;
                }
                Message::Crc(CrcMsg::Request(ids)) => {
                    let mut tags = Vec::with_capacity(ids.len());
                    for &id in &ids {
                        let r = ranges
                            .get(id as usize)
                            .ok_or_else(|| CascadeError::Protocol(format!("unknown frame {id}")))?;
                        tags.push((id, crc64(&key.bits()[r.clone()])));
                    }
                    verification += 64 * tags.len() as u64;
                    link.send(&Message::Crc(CrcMsg::Tags(tags)))?;
                    pending = ids;
                }
                Message::Crc(CrcMsg::Verdict(v)) => {
                    if v.len() != pending.len() {
                        return Err(CascadeError::Protocol("verdict length mismatch".into()));
                    }
                    for (&id, ok) in pending.iter().zip(v) {
                        sources.remove(&id);
                        if std::mem::replace(&mut done[id as usize], true) {
                            return Err(CascadeError::Protocol(format!("frame {id} decided twice")));
                        }
                        decided += 1;
                        if ok {
                            kept[id as usize] = true;
                        } else {
                            let bits = key.bits()[ranges[id as usize].clone()].to_vec();
                            verification += bits.len() as u64;
                            link.send(&Message::Crc(CrcMsg::Reveal { frame_id: id, bits }))?;
                        }
                    }
                    pending.clear();
                }
                other => {
                    return Err(WireError::Unexpected {
                        got: other.msg_type(),
                        wanted: "cascade message",
                    }
                    .into())
                }
            }
        }
        link.flush()?;
        Ok(())
    })();
    if let Err(e) = result {
        if matches!(e, CascadeError::Protocol(_)) {
            link.abort(ABORT_PROTOCOL, &e.to_string());
        }
        return Err(e);
    }

    let out: Vec<u8> = ranges
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k)
        .flat_map(|(r, _)| key.bits()[r.clone()].to_vec())
        .collect();
    key.charge_parities(parities);
    key.charge_verification(verification);
    key.set_crc_ok(kept.iter().all(|&k| k));
    key.promote(KeyRole::Reconciled, out).map_err(|e| CascadeError::Protocol(e.to_string()))?;
    Ok(key)
}
