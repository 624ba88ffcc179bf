//! Privacy amplification with a two-stage hash over `GF(p)`, `p = 2^e - 1`
//! a Mersenne prime.
//!
//! The input is cut into `k` blocks `x_i` of `e` bits (zero padded) and
//! compressed in two steps:
//!
//! ```text
//! y = sum_i a_i x_i  mod p          multilinear modular hash
//! z = (alpha y + beta) mod p        modular arithmetic hash
//! out = low out_len bits of z
//! ```
//!
//! All coefficients come from a 32-byte seed expanded with ChaCha20, so both
//! parties get identical output from identical input and seed.

use std::io::{Read, Write};
use std::time::Instant;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::session::keybuf::{pack_bits, KeyBuffer, KeyRole};
use crate::session::wire::{Link, Message, WireError};

/// Exponents `e` for which `2^e - 1` is prime.
pub const MERSENNE_EXPONENTS: &[u32] = &[
    2, 3, 5, 7, 13, 17, 19, 31, 61, 89, 107, 127, 521, 607, 1279, 2203, 2281, 3217, 4253, 4423, 9689, 9941, 11213,
    19937, 21701, 23209, 44497, 86243, 110503, 132049, 216091, 756839, 859433, 1257787, 1398269, 2976221, 3021377,
    6972593, 13466917, 20996011, 24036583, 25964951, 30402457, 32582657, 37156667, 42643801, 43112609, 57885161,
];

pub const DESK_EXPONENT: u32 = 521;
pub const FULL_BLOCK_EXPONENT: u32 = 57_885_161;
/// Exponents from here on need [`PaConfig::allow_large`].
pub const LARGE_EXPONENT: u32 = 20_000_000;

#[derive(Debug, Error)]
pub enum PaError {
    #[error("2^{0} - 1 is not a known Mersenne prime")]
    BadPrime(u32),
    #[error("exponent {0} needs the large-field flag")]
    LargeFieldDisabled(u32),
    #[error("output of {out_len} bits exceeds the ratio limit for {in_len} input bits")]
    RatioExceeded { out_len: usize, in_len: usize },
    #[error("input of {in_len} bits exceeds block capacity {capacity}")]
    InputTooLong { in_len: usize, capacity: usize },
    #[error("block count must be at least 1")]
    BlockCount,
    #[error("seed exchange: {0}")]
    Exchange(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaConfig {
    /// Number of blocks `k`; the compression ratio is capped at `1/k`.
    pub block_count: usize,
    /// Block length in bits; also the Mersenne exponent.
    pub prime_exponent: u32,
    pub allow_large: bool,
}

impl Default for PaConfig {
    fn default() -> Self {
        PaConfig {
            block_count: 2,
            prime_exponent: DESK_EXPONENT,
            allow_large: false,
        }
    }
}

impl PaConfig {
    pub fn validate(&self) -> Result<(), PaError> {
        if self.block_count == 0 {
            return Err(PaError::BlockCount);
        }
        if MERSENNE_EXPONENTS.binary_search(&self.prime_exponent).is_err() {
            return Err(PaError::BadPrime(self.prime_exponent));
        }
        if self.prime_exponent >= LARGE_EXPONENT && !self.allow_large {
            return Err(PaError::LargeFieldDisabled(self.prime_exponent));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.block_count * self.prime_exponent as usize
    }

    /// Largest output for `in_len` input bits.
    pub fn max_output(&self, in_len: usize) -> usize {
        (in_len / self.block_count).min(self.prime_exponent as usize)
    }

    /// Smallest listed exponent (at least the desk default) whose `k` blocks
    /// hold `in_len` bits.
    pub fn for_input_len(in_len: usize, block_count: usize, allow_large: bool) -> Result<PaConfig, PaError> {
        let need = in_len.div_ceil(block_count.max(1));
        let e = MERSENNE_EXPONENTS
            .iter()
            .copied()
            .find(|&e| e >= DESK_EXPONENT && e as usize >= need)
            .ok_or(PaError::InputTooLong {
                in_len,
                capacity: block_count * FULL_BLOCK_EXPONENT as usize,
            })?;
        let cfg = PaConfig {
            block_count,
            prime_exponent: e,
            allow_large,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Field {
    e: u64,
    p: BigUint,
}

impl Field {
    fn new(e: u32) -> Field {
        let p = (BigUint::one() << e as usize) - 1u32;
        Field { e: u64::from(e), p }
    }

    /// Reduction by folding: `2^e = 1 (mod p)`.
    fn reduce(&self, mut x: BigUint) -> BigUint {
        while x.bits() > self.e {
            let hi = &x >> self.e as usize;
            x = (x & &self.p) + hi;
        }
        if x == self.p {
            x.set_zero();
        }
        x
    }

    /// Uniform element of `[lo, p - 1]`, `lo` in {0, 1}.
    fn sample(&self, rng: &mut ChaCha20Rng, lo: u32) -> BigUint {
        let bytes = self.e.div_ceil(8) as usize;
        let extra = bytes as u64 * 8 - self.e;
        let mut buf = vec![0u8; bytes];
        loop {
            rng.fill_bytes(&mut buf);
            buf[0] &= 0xff >> extra;
            let v = BigUint::from_bytes_be(&buf);
            if v < self.p && v >= BigUint::from(lo) {
                return v;
            }
        }
    }
}

/// Integer whose binary expansion (MSB first) is `bits`.
fn bits_to_uint(bits: &[u8]) -> BigUint {
    if bits.is_empty() {
        return BigUint::zero();
    }
    let pad = bits.len().div_ceil(8) * 8 - bits.len();
    BigUint::from_bytes_be(&pack_bits(bits)) >> pad
}

/// Low `n` bits of `v`, MSB first.
fn uint_to_bits(v: &BigUint, n: usize) -> Vec<u8> {
    (0..n as u64).rev().map(|i| u8::from(v.bit(i))).collect()
}

/// Hashes `input` down to `out_len` bits.
pub fn pa_compress(input: &[u8], out_len: usize, seed: &[u8; 32], cfg: &PaConfig) -> Result<Vec<u8>, PaError> {
    cfg.validate()?;
    if input.len() > cfg.capacity() {
        return Err(PaError::InputTooLong {
            in_len: input.len(),
            capacity: cfg.capacity(),
        });
    }
    if out_len > cfg.max_output(input.len()) {
        return Err(PaError::RatioExceeded {
            out_len,
            in_len: input.len(),
        });
    }
    if out_len == 0 {
        return Ok(Vec::new());
    }
    let f = Field::new(cfg.prime_exponent);
    let e = cfg.prime_exponent as usize;
    let mut rng = ChaCha20Rng::from_seed(*seed);
    let coeffs: Vec<BigUint> = (0..cfg.block_count).map(|_| f.sample(&mut rng, 1)).collect();
    let alpha = f.sample(&mut rng, 1);
    let beta = f.sample(&mut rng, 0);

    let mut y = BigUint::zero();
    for (i, a) in coeffs.iter().enumerate() {
        let lo = (i * e).min(input.len());
        let hi = ((i + 1) * e).min(input.len());
        if lo == hi {
            continue;
        }
        // zero padding sits at the low end of the last block
        let x = bits_to_uint(&input[lo..hi]) << (e - (hi - lo));
        y = f.reduce(y + f.reduce(a * x));
    }
    let z = f.reduce(alpha * y + beta);
    Ok(uint_to_bits(&z, out_len))
}

/// Compresses a reconciled buffer into a secret one, keeping its ledger.
pub fn pa_compress_key(mut key: KeyBuffer, out_len: usize, seed: &[u8; 32], cfg: &PaConfig) -> Result<KeyBuffer, PaError> {
    let out = pa_compress(key.bits(), out_len, seed, cfg)?;
    key.promote(KeyRole::Secret, out).map_err(|e| PaError::Exchange(e.to_string()))?;
    Ok(key)
}

fn seed_digest(seed: &[u8; 32], out_len: u64, in_len: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed);
    h.update(out_len.to_le_bytes());
    h.update(in_len.to_le_bytes());
    h.finalize().into()
}

/// Bob announces the seed and lengths; Alice must confirm with their digest.
pub fn exchange_seed_bob<R: Read, W: Write>(
    link: &mut Link<R, W>,
    seed: [u8; 32],
    out_len: u64,
    in_len: u64,
) -> Result<(), PaError> {
    link.send(&Message::PaSeed { seed, out_len, in_len })?;
    match link.recv()? {
        Message::PaConfirm(d) if d == seed_digest(&seed, out_len, in_len) => Ok(()),
        Message::PaConfirm(_) => Err(PaError::Exchange("confirmation digest mismatch".into())),
        other => Err(WireError::Unexpected {
            got: other.msg_type(),
            wanted: "pa confirm",
        }
        .into()),
    }
}

/// Alice's side: checks the announced lengths against her own and confirms.
pub fn exchange_seed_alice<R: Read, W: Write>(
    link: &mut Link<R, W>,
    expect_out: u64,
    expect_in: u64,
) -> Result<[u8; 32], PaError> {
    let (seed, out_len, in_len) = match link.recv()? {
        Message::PaSeed { seed, out_len, in_len } => (seed, out_len, in_len),
        other => {
            return Err(WireError::Unexpected {
                got: other.msg_type(),
                wanted: "pa seed",
            }
            .into())
        }
    };
    if out_len != expect_out || in_len != expect_in {
        let reason = format!("lengths {out_len}/{in_len}, expected {expect_out}/{expect_in}");
        link.abort(3, &reason);
        return Err(PaError::Exchange(reason));
    }
    link.send(&Message::PaConfirm(seed_digest(&seed, out_len, in_len)))?;
    link.flush()?;
    Ok(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub input_bits: usize,
    pub output_bits: usize,
    pub prime_exponent: u32,
    pub seconds: f64,
    pub mbps: f64,
}

/// Wall-clock throughput for each input size at a quarter compression.
/// Informational only.
pub fn pa_throughput_bench(sizes: &[usize], allow_large: bool, seed: u64) -> Result<Vec<BenchRow>, PaError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    sizes
        .iter()
        .map(|&n| {
            let cfg = PaConfig::for_input_len(n, 2, allow_large)?;
            let input: Vec<u8> = (0..n).map(|_| (rng.next_u32() & 1) as u8).collect();
            let mut s = [0u8; 32];
            rng.fill_bytes(&mut s);
            let out_len = n / 4;
            let t = Instant::now();
            pa_compress(&input, out_len, &s, &cfg)?;
            let seconds = t.elapsed().as_secs_f64();
            Ok(BenchRow {
                input_bits: n,
                output_bits: out_len,
                prime_exponent: cfg.prime_exponent,
                seconds,
                mbps: n as f64 / seconds.max(1e-12) / 1e6,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lucas_lehmer(p: u32) -> bool {
        if p == 2 {
            return true;
        }
        let m = (BigUint::one() << p as usize) - 1u32;
        let mut s = BigUint::from(4u32);
        for _ in 0..p - 2 {
            s = (&s * &s + &m - 2u32) % &m;
        }
        s.is_zero()
    }

    #[test]
    fn small_listed_exponents_are_mersenne_primes() {
        for &e in MERSENNE_EXPONENTS.iter().take_while(|&&e| e <= 1279) {
            assert!(lucas_lehmer(e), "2^{e}-1");
        }
        for e in [11u32, 23, 29, 37, 67, 257] {
            assert!(!lucas_lehmer(e));
        }
        assert!(MERSENNE_EXPONENTS.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bad_and_gated_exponents() {
        let c = PaConfig {
            prime_exponent: 520,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(PaError::BadPrime(520))));
        let c = PaConfig {
            prime_exponent: FULL_BLOCK_EXPONENT,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(PaError::LargeFieldDisabled(_))));
        assert!(PaConfig { allow_large: true, ..c }.validate().is_ok());
    }

    #[test]
    fn zero_output_and_limits() {
        let cfg = PaConfig::default();
        let seed = [1u8; 32];
        assert!(pa_compress(&[1; 100], 0, &seed, &cfg).unwrap().is_empty());
        assert!(matches!(
            pa_compress(&[1; 100], 51, &seed, &cfg),
            Err(PaError::RatioExceeded { .. })
        ));
        assert_eq!(pa_compress(&[1; 100], 50, &seed, &cfg).unwrap().len(), 50);
        assert!(matches!(
            pa_compress(&[0; 1043], 10, &seed, &cfg),
            Err(PaError::InputTooLong { .. })
        ));
    }

    #[test]
    fn reduction_matches_plain_modulo() {
        let f = Field::new(13);
        for x in [0u64, 1, 8190, 8191, 8192, 67_108_863, 123_456_789] {
            assert_eq!(f.reduce(BigUint::from(x)), BigUint::from(x % 8191));
        }
    }

    #[test]
    fn matches_direct_evaluation_at_e13() {
        // independent u64 evaluation of the same construction
        let cfg = PaConfig {
            prime_exponent: 13,
            ..Default::default()
        };
        let seed = [42u8; 32];
        let input: Vec<u8> = (0..26).map(|i| ((i * 7 + 3) % 5 % 2) as u8).collect();
        let out = pa_compress(&input, 8, &seed, &cfg).unwrap();

        let f = Field::new(13);
        let mut rng = ChaCha20Rng::from_seed(seed);
        let c: Vec<u64> = (0..4)
            .map(|i| f.sample(&mut rng, if i == 3 { 0 } else { 1 }).try_into().unwrap())
            .collect();
        let val = |b: &[u8]| b.iter().fold(0u64, |acc, &x| acc * 2 + u64::from(x));
        let p = 8191u64;
        let y = (c[0] * val(&input[..13]) + c[1] * val(&input[13..])) % p;
        let z = (c[2] * y + c[3]) % p;
        let want: Vec<u8> = (0..8).rev().map(|i| ((z >> i) & 1) as u8).collect();
        assert_eq!(out, want);
    }

    #[test]
    fn config_for_input_len_picks_smallest_cover() {
        assert_eq!(PaConfig::for_input_len(100, 2, false).unwrap().prime_exponent, 521);
        assert_eq!(PaConfig::for_input_len(1043, 2, false).unwrap().prime_exponent, 607);
        assert_eq!(PaConfig::for_input_len(10_000_000, 2, false).unwrap().prime_exponent, 6_972_593);
        assert!(PaConfig::for_input_len(60_000_000, 2, false).is_err());
        assert_eq!(
            PaConfig::for_input_len(115_770_322, 2, true).unwrap().prime_exponent,
            FULL_BLOCK_EXPONENT
        );
    }

    #[test]
    fn bench_on_empty_sizes_is_empty() {
        assert!(pa_throughput_bench(&[], false, 0).unwrap().is_empty());
        let rows = pa_throughput_bench(&[1000, 4000], false, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].output_bits, 1000);
    }

    #[test]
    fn seed_exchange_over_link() {
        use crate::session::wire::TcpLink;
        let (mut a, mut b) = TcpLink::loopback_pair().unwrap();
        let h = std::thread::spawn(move || exchange_seed_alice(&mut a, 10, 40).unwrap());
        exchange_seed_bob(&mut b, [5; 32], 10, 40).unwrap();
        assert_eq!(h.join().unwrap(), [5; 32]);

        let (mut a, mut b) = TcpLink::loopback_pair().unwrap();
        let h = std::thread::spawn(move || exchange_seed_alice(&mut a, 11, 40).is_err());
        assert!(exchange_seed_bob(&mut b, [5; 32], 10, 40).is_err());
        assert!(h.join().unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn deterministic_and_sized(bits in proptest::collection::vec(0u8..2, 1..1042), seed in any::<[u8; 32]>(), frac in 0.0f64..0.5) {
            let cfg = PaConfig::default();
            let out_len = (bits.len() as f64 * frac) as usize;
            let a = pa_compress(&bits, out_len, &seed, &cfg).unwrap();
            let b = pa_compress(&bits, out_len, &seed, &cfg).unwrap();
            prop_assert_eq!(a.len(), out_len);
            prop_assert_eq!(a, b);
        }
    }
}
