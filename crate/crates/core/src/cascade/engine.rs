//! Bob-side Cascade state machine, independent of transport.
//!
//! A [`FrameState`] alternates between [`FrameState::advance`], which does
//! all the work it can with parities already known and returns the queries it
//! still needs, and [`FrameState::absorb`], which records Alice's answers.
//! Many frames are driven in lock-step rounds so one link round trip serves
//! all of them.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parity queries for one frame and one pass, as half-open ranges in the
/// pass' permuted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameQuery {
    pub frame_id: u32,
    pub pass: u8,
    pub ranges: Vec<(u32, u32)>,
}

/// Shuffle of one pass. Pass 0 is the identity; later passes are seeded
/// shuffles shared by every frame of the same length.
#[derive(Debug)]
pub struct Layout {
    /// `perm[slot]` is the frame position at permuted slot `slot`.
    pub perm: Vec<u32>,
    /// `slot[pos]` inverts `perm`.
    pub slot: Vec<u32>,
}

impl Layout {
    pub fn new(n: usize, pass: u8, seed: u64) -> Layout {
        let mut perm: Vec<u32> = (0..n as u32).collect();
        if pass > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((n as u64) << 8) | u64::from(pass));
            perm.shuffle(&mut rng);
        }
        let mut slot = vec![0u32; n];
        for (s, &p) in perm.iter().enumerate() {
            slot[p as usize] = s as u32;
        }
        Layout { perm, slot }
    }
}

/// Lazily built, shared pass layouts for one frame length.
#[derive(Debug)]
pub struct Layouts {
    n: usize,
    seed: u64,
    passes: std::sync::Mutex<Vec<Arc<Layout>>>,
}

impl Layouts {
    pub fn new(n: usize, seed: u64) -> Layouts {
        Layouts {
            n,
            seed,
            passes: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn get(&self, pass: u8) -> Arc<Layout> {
        let mut v = self.passes.lock().expect("layout cache poisoned");
        while v.len() <= pass as usize {
            let p = v.len() as u8;
            v.push(Arc::new(Layout::new(self.n, p, self.seed)));
        }
        Arc::clone(&v[pass as usize])
    }
}

/// Alice's side of one frame: answers range-parity queries.
#[derive(Debug)]
pub struct ParitySource {
    bits: Vec<u8>,
    layouts: Arc<Layouts>,
    /// Prefix parities in permuted order, per pass.
    prefix: HashMap<u8, Vec<u8>>,
}

impl ParitySource {
    pub fn new(bits: Vec<u8>, layouts: Arc<Layouts>) -> ParitySource {
        ParitySource {
            bits,
            layouts,
            prefix: HashMap::new(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Parity of `[start, end)` in `pass` order; `None` for an invalid range.
    pub fn parity(&mut self, pass: u8, start: u32, end: u32) -> Option<u8> {
        let n = self.bits.len();
        if start >= end || end as usize > n {
            return None;
        }
        let pre = self.prefix.entry(pass).or_insert_with(|| {
            let layout = self.layouts.get(pass);
            let mut pre = Vec::with_capacity(n + 1);
            let mut acc = 0u8;
            pre.push(0);
            for &p in &layout.perm {
                acc ^= self.bits[p as usize];
                pre.push(acc);
            }
            pre
        });
        Some(pre[start as usize] ^ pre[end as usize])
    }

    pub fn answer(&mut self, q: &FrameQuery) -> Option<Vec<u8>> {
        q.ranges.iter().map(|&(s, e)| self.parity(q.pass, s, e)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Sample,
    AwaitSample,
    StartPass(usize),
    Search(usize),
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Range {
    pass: u8,
    start: u32,
    end: u32,
}

/// Bob's side of one frame.
#[derive(Debug)]
pub struct FrameState {
    pub id: u32,
    bits: Vec<u8>,
    layouts: Arc<Layouts>,
    passes: Vec<Arc<Layout>>,
    blocks: Vec<usize>,
    /// Bob's current parity of every top-level block, per started pass.
    top: Vec<Vec<u8>>,
    known: HashMap<Range, u8>,
    searches: Vec<Range>,
    sample: Vec<u32>,
    phase: Phase,
    disclosed: u64,
    sample_bits: u64,
    corrected: Vec<u32>,
}

impl FrameState {
    /// `blocks[i]` is the top-level block length of pass `i`. `sample` lists
    /// positions whose values Alice discloses before the first pass.
    pub fn new(id: u32, bits: Vec<u8>, blocks: Vec<usize>, layouts: Arc<Layouts>, sample: Vec<u32>) -> FrameState {
        assert!(!blocks.is_empty() && blocks.iter().all(|&k| k >= 1));
        let phase = if sample.is_empty() { Phase::StartPass(0) } else { Phase::Sample };
        FrameState {
            id,
            bits,
            layouts,
            passes: Vec::new(),
            blocks,
            top: Vec::new(),
            known: HashMap::new(),
            searches: Vec::new(),
            sample,
            phase,
            disclosed: 0,
            sample_bits: 0,
            corrected: Vec::new(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<u8> {
        self.bits
    }

    /// Parity bits received from Alice, sample bits included.
    pub fn disclosed(&self) -> u64 {
        self.disclosed
    }

    pub fn sample_bits(&self) -> u64 {
        self.sample_bits
    }

    /// Positions flipped so far, in order.
    pub fn corrected(&self) -> &[u32] {
        &self.corrected
    }

    /// Error estimate from the disclosed sample, if any.
    pub fn sample_errors(&self) -> Option<(u64, u64)> {
        if self.sample_bits == 0 {
            return None;
        }
        let n = self.sample_bits;
        // sample corrections are the first ones recorded
        let e = self.corrected.iter().take_while(|&&p| self.sample.binary_search(&p).is_ok()).count() as u64;
        Some((e.min(n), n))
    }

    /// Replaces the block schedule. Only valid before the first pass starts.
    pub fn reset_blocks(&mut self, blocks: Vec<usize>) {
        assert!(self.passes.is_empty(), "schedule fixed once a pass has started");
        assert!(!blocks.is_empty() && blocks.iter().all(|&k| k >= 1));
        self.blocks = blocks;
    }

    /// Positions flipped an odd number of times, i.e. net changes to the
    /// starting frame.
    pub fn net_corrections(&self) -> u64 {
        let mut seen = std::collections::HashMap::new();
        for &p in &self.corrected {
            *seen.entry(p).or_insert(0u32) += 1;
        }
        seen.values().filter(|&&c| c % 2 == 1).count() as u64
    }

    /// Hamming distance between Bob's starting frame and `alice`.
    pub fn initial_errors(&self, alice: &[u8]) -> u64 {
        let mut orig = self.bits.clone();
        for &p in &self.corrected {
            orig[p as usize] ^= 1;
        }
        orig.iter().zip(alice).filter(|(a, b)| a != b).count() as u64
    }

    fn n(&self) -> usize {
        self.bits.len()
    }

    fn block_range(&self, pass: usize, j: usize) -> Range {
        let k = self.blocks[pass];
        let start = j * k;
        let end = ((j + 1) * k).min(self.n());
        Range {
            pass: pass as u8,
            start: start as u32,
            end: end as u32,
        }
    }

    fn n_blocks(&self, pass: usize) -> usize {
        self.n().div_ceil(self.blocks[pass])
    }

    fn bob_parity(&self, r: Range) -> u8 {
        let layout = &self.passes[r.pass as usize];
        layout.perm[r.start as usize..r.end as usize]
            .iter()
            .fold(0u8, |acc, &p| acc ^ self.bits[p as usize])
    }

    fn start_pass_layout(&mut self, pass: usize) {
        let layout = self.layouts.get(pass as u8);
        let nb = self.n_blocks(pass);
        let k = self.blocks[pass];
        let mut top = vec![0u8; nb];
        for (s, &p) in layout.perm.iter().enumerate() {
            top[s / k] ^= self.bits[p as usize];
        }
        self.passes.push(layout);
        self.top.push(top);
    }

    fn flip(&mut self, pos: u32) {
        self.bits[pos as usize] ^= 1;
        self.corrected.push(pos);
        for (q, layout) in self.passes.iter().enumerate() {
            let j = layout.slot[pos as usize] as usize / self.blocks[q];
            self.top[q][j] ^= 1;
        }
    }

    /// Total parity of Alice's frame, once the first pass is known.
    fn alice_total(&self) -> Option<u8> {
        if self.top.is_empty() {
            return None;
        }
        let mut acc = 0u8;
        for j in 0..self.n_blocks(0) {
            acc ^= *self.known.get(&self.block_range(0, j))?;
        }
        Some(acc)
    }

    /// Runs all local progress; returns the queries needed to continue. An
    /// empty result means the frame is finished.
    pub fn advance(&mut self) -> Vec<FrameQuery> {
        loop {
            match self.phase {
                Phase::Done => return Vec::new(),
                Phase::Sample => {
                    self.phase = Phase::AwaitSample;
                    return vec![FrameQuery {
                        frame_id: self.id,
                        pass: 0,
                        ranges: self.sample.iter().map(|&p| (p, p + 1)).collect(),
                    }];
                }
                Phase::AwaitSample => unreachable!("sample answer not absorbed"),
                Phase::StartPass(p) => {
                    if p >= self.blocks.len() {
                        self.phase = Phase::Done;
                        continue;
                    }
                    self.start_pass_layout(p);
                    let nb = self.n_blocks(p);
                    let derive_last = p > 0 && nb > 1;
                    let mut ranges = Vec::new();
                    for j in 0..nb {
                        let r = self.block_range(p, j);
                        if self.known.contains_key(&r) || (derive_last && j + 1 == nb) {
                            continue;
                        }
                        ranges.push((r.start, r.end));
                    }
                    self.phase = Phase::Search(p);
                    if !ranges.is_empty() {
                        return vec![FrameQuery {
                            frame_id: self.id,
                            pass: p as u8,
                            ranges,
                        }];
                    }
                }
                Phase::Search(p) => {
                    if p > 0 && !self.known.contains_key(&self.block_range(p, self.n_blocks(p) - 1)) {
                        self.derive_last_block(p);
                    }
                    let queries = self.step_searches();
                    if !queries.is_empty() {
                        return queries;
                    }
                    if self.searches.is_empty() && !self.sweep(p) {
                        self.phase = Phase::StartPass(p + 1);
                    }
                }
            }
        }
    }

    fn derive_last_block(&mut self, p: usize) {
        let Some(total) = self.alice_total() else {
            return;
        };
        let nb = self.n_blocks(p);
        let mut acc = total;
        for j in 0..nb - 1 {
            match self.known.get(&self.block_range(p, j)) {
                Some(&v) => acc ^= v,
                None => return,
            }
        }
        self.known.insert(self.block_range(p, nb - 1), acc);
    }

    /// Queues a search on every top-level block whose parity disagrees.
    fn sweep(&mut self, through: usize) -> bool {
        for q in 0..=through {
            for j in 0..self.n_blocks(q) {
                let r = self.block_range(q, j);
                if let Some(&a) = self.known.get(&r) {
                    if a != self.top[q][j] {
                        self.searches.push(r);
                    }
                }
            }
        }
        !self.searches.is_empty()
    }

    fn step_searches(&mut self) -> Vec<FrameQuery> {
        let mut pending: Vec<Range> = Vec::new();
        let mut asked: HashSet<Range> = HashSet::new();
        while let Some(r) = self.searches.pop() {
            let Some(&alice) = self.known.get(&r) else {
                continue;
            };
            if self.bob_parity(r) == alice {
                continue;
            }
            if r.end - r.start == 1 {
                let pos = self.passes[r.pass as usize].perm[r.start as usize];
                self.flip(pos);
                self.backpropagate(pos, r.pass);
                continue;
            }
            let mid = r.start + (r.end - r.start) / 2;
            let left = Range { end: mid, ..r };
            let right = Range { start: mid, ..r };
            match self.known.get(&left) {
                Some(&a) => {
                    self.known.insert(right, alice ^ a);
                    let next = if self.bob_parity(left) != a { left } else { right };
                    self.searches.push(next);
                }
                None => {
                    asked.insert(left);
                    pending.push(r);
                }
            }
        }
        self.searches = pending;
        let mut by_pass: Vec<FrameQuery> = Vec::new();
        let mut asked: Vec<Range> = asked.into_iter().collect();
        asked.sort_by_key(|r| (r.pass, r.start, r.end));
        for r in asked {
            match by_pass.last_mut() {
                Some(q) if q.pass == r.pass => q.ranges.push((r.start, r.end)),
                _ => by_pass.push(FrameQuery {
                    frame_id: self.id,
                    pass: r.pass,
                    ranges: vec![(r.start, r.end)],
                }),
            }
        }
        by_pass
    }

    fn backpropagate(&mut self, pos: u32, from: u8) {
        for q in 0..self.passes.len() {
            if q == from as usize {
                continue;
            }
            let j = self.passes[q].slot[pos as usize] as usize / self.blocks[q];
            let r = self.block_range(q, j);
            if let Some(&a) = self.known.get(&r) {
                if a != self.top[q][j] {
                    self.searches.push(r);
                }
            }
        }
    }

    /// Records Alice's answers to queries produced by the last `advance`.
    pub fn absorb(&mut self, query: &FrameQuery, parities: &[u8]) {
        debug_assert_eq!(query.ranges.len(), parities.len());
        self.disclosed += parities.len() as u64;
        if self.phase == Phase::AwaitSample {
            self.sample_bits += parities.len() as u64;
            let mut flips = Vec::new();
            for (&(s, _), &a) in query.ranges.iter().zip(parities) {
                self.known.insert(Range { pass: 0, start: s, end: s + 1 }, a);
                if self.bits[s as usize] != a {
                    flips.push(s);
                }
            }
            for pos in flips {
                self.bits[pos as usize] ^= 1;
                self.corrected.push(pos);
            }
            self.phase = Phase::StartPass(0);
            return;
        }
        for (&(s, e), &a) in query.ranges.iter().zip(parities) {
            self.known.insert(
                Range {
                    pass: query.pass,
                    start: s,
                    end: e,
                },
                a,
            );
        }
    }
}
