//! Basis sifting over a [`Link`], one pulse batch at a time.
//!
//! Per batch Bob sends the detected indices and his measured bases; Alice
//! answers with her bases and intensity labels for those indices, then
//! discloses her bits for every index where both used X.

use std::io::{Read, Write};
use std::thread;

use super::keybuf::{KeyBuffer, KeyRole};
use super::sim::{DetectionRecord, PulseRecord};
use super::wire::{Link, Message, TcpLink};
use super::SessionError;
use crate::expect_msg;
use crate::finitekey::{Basis, Intensity, ObservedTallies};

fn basis_code(b: Basis) -> u8 {
    u8::from(b == Basis::X)
}

fn basis_from(code: u8) -> Basis {
    if code == 0 {
        Basis::Z
    } else {
        Basis::X
    }
}

fn intensity_from(code: u8) -> Intensity {
    if code == 0 {
        Intensity::Signal
    } else {
        Intensity::Decoy
    }
}

/// One side's accumulated sifting state.
#[derive(Debug, Clone)]
pub struct SiftState {
    pub key: KeyBuffer,
    /// Intensity of each sifted key bit, `0` signal, `1` decoy.
    pub labels: Vec<u8>,
    /// Alice fills `sent`; both fill detections and X errors. Z errors are
    /// only known after reconciliation.
    pub tallies: ObservedTallies,
    pub detections: u64,
}

impl Default for SiftState {
    fn default() -> Self {
        SiftState {
            key: KeyBuffer::new(KeyRole::Sifted, Vec::new()),
            labels: Vec::new(),
            tallies: ObservedTallies::default(),
            detections: 0,
        }
    }
}

impl SiftState {
    pub fn x_error_rate(&self) -> Option<f64> {
        let n: u64 = self.tallies.x.iter().map(|c| c.detected).sum();
        let e: u64 = self.tallies.x.iter().map(|c| c.errors).sum();
        (n > 0).then(|| e as f64 / n as f64)
    }
}

/// Alice's side for the batch `pulses` (contiguous indices).
pub fn sift_alice<R: Read, W: Write>(
    link: &mut Link<R, W>,
    pulses: &[PulseRecord],
    st: &mut SiftState,
) -> Result<(), SessionError> {
    let base = pulses.first().map_or(0, |p| p.index);
    for p in pulses.iter().filter(|p| !p.calibration) {
        st.tallies.cell_mut(p.basis, p.intensity).sent += 1;
    }
    let (got_base, indices) = expect_msg!(link, Message::DetectedIndices { base, indices } => (base, indices), "detected indices");
    let bob_bases = expect_msg!(link, Message::BasisReveal { bases, .. } => bases, "bob bases");
    if bob_bases.len() != indices.len() {
        return Err(SessionError::Protocol(format!(
            "{} bases for {} indices",
            bob_bases.len(),
            indices.len()
        )));
    }
    let mut records = Vec::with_capacity(indices.len());
    for &i in &indices {
        let off = i.wrapping_sub(base);
        if got_base != base || i < base || off >= pulses.len() as u64 {
            let len = pulses.len() as u64;
            link.abort(3, &format!("index {i} outside batch {base}..{}", base + len));
            return Err(SessionError::IndexOutOfRange { index: i, base, len });
        }
        records.push(pulses[off as usize]);
    }
    st.detections += indices.len() as u64;

    let mut x_bits = Vec::new();
    for (p, &bb) in records.iter().zip(&bob_bases) {
        if p.calibration || basis_from(bb) != p.basis {
            continue;
        }
        st.tallies.cell_mut(p.basis, p.intensity).detected += 1;
        match p.basis {
            Basis::Z => {
                st.key.extend(&[p.bit]);
                st.labels.push(p.intensity.index() as u8);
            }
            Basis::X => x_bits.push(p.bit),
        }
    }
    link.send(&Message::BasisReveal {
        bases: records.iter().map(|p| basis_code(p.basis)).collect(),
        intensities: Some(records.iter().map(|p| p.intensity.index() as u8).collect()),
    })?;
    st.key.charge_x_bits(x_bits.len() as u64);
    link.send(&Message::XBitsDisclose(x_bits))?;
    link.flush()?;
    Ok(())
}

/// Bob's side for the batch starting at pulse `base`.
pub fn sift_bob<R: Read, W: Write>(
    link: &mut Link<R, W>,
    base: u64,
    detections: &[DetectionRecord],
    st: &mut SiftState,
) -> Result<(), SessionError> {
    link.send(&Message::DetectedIndices {
        base,
        indices: detections.iter().map(|d| d.index).collect(),
    })?;
    link.send(&Message::BasisReveal {
        bases: detections.iter().map(|d| basis_code(d.basis_measured)).collect(),
        intensities: None,
    })?;
    let (bases, intensities) = expect_msg!(
        link,
        Message::BasisReveal { bases, intensities: Some(i) } => (bases, i),
        "alice bases"
    );
    let x_bits = expect_msg!(link, Message::XBitsDisclose(b) => b, "x bits");
    if bases.len() != detections.len() || intensities.len() != detections.len() {
        return Err(SessionError::Protocol("basis reveal length mismatch".into()));
    }
    st.key.charge_x_bits(x_bits.len() as u64);
    st.detections += detections.len() as u64;

    let mut x_iter = x_bits.iter();
    for ((d, &ab), &ik) in detections.iter().zip(&bases).zip(&intensities) {
        if basis_from(ab) != d.basis_measured {
            continue;
        }
        let k = intensity_from(ik);
        let cell = st.tallies.cell_mut(d.basis_measured, k);
        cell.detected += 1;
        match d.basis_measured {
            Basis::Z => {
                st.key.extend(&[d.bit_measured]);
                st.labels.push(k.index() as u8);
            }
            Basis::X => {
                let a = *x_iter
                    .next()
                    .ok_or_else(|| SessionError::Protocol("too few X bits disclosed".into()))?;
                cell.errors += u64::from(a != d.bit_measured);
            }
        }
    }
    if x_iter.next().is_some() {
        return Err(SessionError::Protocol("too many X bits disclosed".into()));
    }
    Ok(())
}

/// Both sides of a single-batch sift over a localhost link, returning
/// Alice's and Bob's sifted keys and the joint tallies (X errors counted,
/// Z errors left at zero).
pub fn sift(
    pulses: &[PulseRecord],
    detections: &[DetectionRecord],
) -> Result<(KeyBuffer, KeyBuffer, ObservedTallies), SessionError> {
    let (mut la, mut lb) = TcpLink::loopback_pair()?;
    let base = pulses.first().map_or(0, |p| p.index);
    let (alice, bob) = thread::scope(|s| {
        let a = s.spawn(move || {
            let mut st = SiftState::default();
            sift_alice(&mut la, pulses, &mut st).map(|_| st)
        });
        let mut st = SiftState::default();
        let b = sift_bob(&mut lb, base, detections, &mut st).map(|_| st);
        (a.join().expect("alice thread"), b)
    });
    let (alice, bob) = (alice?, bob?);
    let mut tallies = bob.tallies;
    for b in Basis::ALL {
        for k in Intensity::ALL {
            tallies.cell_mut(b, k).sent = alice.tallies.cell(b, k).sent;
        }
    }
    Ok((alice.key, bob.key, tallies))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sifted_z_per_pulse, ChannelDetectorModel};
    use crate::finitekey::ProtocolParams;
    use crate::session::sim::{alice_generate, channel_detect};

    #[test]
    fn no_detections_give_empty_keys() {
        let pulses: Vec<_> = alice_generate(&ProtocolParams::default(), 100, 1).collect();
        let (a, b, t) = sift(&pulses, &[]).unwrap();
        assert!(a.is_empty() && b.is_empty());
        assert_eq!(t.n_z(), 0);
        let sent: u64 = t.z.iter().chain(&t.x).map(|c| c.sent).sum();
        assert_eq!(sent, 100);
    }

    #[test]
    fn sifted_fraction_and_x_disclosure() {
        let m = ChannelDetectorModel::default().with_loss_db(3.0);
        let p = ProtocolParams::default();
        let n = 1_000_000u64;
        let pulses: Vec<_> = alice_generate(&p, n, 2).collect();
        let det = channel_detect(&pulses, &m, &p, 3);
        let (a, b, t) = sift(&pulses, &det).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.len() as u64, t.n_z());
        let x_det: u64 = t.x.iter().map(|c| c.detected).sum();
        assert_eq!(a.leak().x_bits, x_det);
        assert_eq!(b.leak().x_bits, x_det);

        let want = sifted_z_per_pulse(&m, &p) * n as f64;
        assert!((a.len() as f64 - want).abs() < 5.0 * want.sqrt(), "{} vs {want}", a.len());
    }

    #[test]
    fn out_of_range_index_aborts() {
        let pulses: Vec<_> = alice_generate(&ProtocolParams::default(), 10, 1).collect();
        let (mut la, mut lb) = TcpLink::loopback_pair().unwrap();
        let h = thread::spawn(move || {
            let mut st = SiftState::default();
            sift_alice(&mut la, &pulses, &mut st)
        });
        let bogus = DetectionRecord {
            index: 50,
            basis_measured: Basis::Z,
            bit_measured: 0,
            detector_id: 1,
        };
        let r = sift_bob(&mut lb, 0, &[bogus], &mut SiftState::default());
        assert!(matches!(h.join().unwrap(), Err(SessionError::IndexOutOfRange { index: 50, .. })));
        assert!(r.is_err());
    }
}
