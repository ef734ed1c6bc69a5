//! Exhaustive comparison of BLEU, ROUGE-L and METEOR against brute-force
//! oracles over every pair of sequences of length 0..=8 on {a, b, c}.
//!
//! Every metric is invariant under relabelling the alphabet and under
//! reversing both sequences, so one representative per orbit of that
//! 12-element group is compared and weighted by its orbit size. The weights
//! must add up to the full pair count, and `check_invariance` confirms the
//! implementation really is invariant on random full-space pairs.

use nldbench::metrics::meteor::{Meteor, MeteorInput};
use nldbench::metrics::{bleu, rouge_l, MetricConfig, TokenSeq};
use std::sync::atomic::{AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_LEN: usize = 8;
const SYMBOLS: [&str; 3] = ["a", "b", "c"];
const PERMS: [[u8; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
const TOL: f64 = 1e-9;

pub struct Space {
    pub seqs: Vec<Vec<u8>>,
    offset: Vec<usize>,
    /// `images[s][g]`: index of sequence `s` under group element `g`.
    images: Vec<[u32; 12]>,
}

impl Space {
    pub fn new() -> Self {
        let mut offset = vec![0usize; MAX_LEN + 2];
        for len in 0..=MAX_LEN {
            offset[len + 1] = offset[len] + 3usize.pow(len as u32);
        }
        let mut seqs = Vec::with_capacity(offset[MAX_LEN + 1]);
        for len in 0..=MAX_LEN {
            for code in 0..3usize.pow(len as u32) {
                let mut s = vec![0u8; len];
                let mut c = code;
                for k in (0..len).rev() {
                    s[k] = (c % 3) as u8;
                    c /= 3;
                }
                seqs.push(s);
            }
        }
        let mut space = Space {
            seqs,
            offset,
            images: Vec::new(),
        };
        space.images = (0..space.seqs.len())
            .map(|i| {
                let mut out = [0u32; 12];
                for (g, slot) in out.iter_mut().enumerate() {
                    *slot = space.index(&space.transform(&space.seqs[i], g)) as u32;
                }
                out
            })
            .collect();
        space
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn index(&self, s: &[u8]) -> usize {
        self.offset[s.len()] + s.iter().fold(0usize, |acc, &d| acc * 3 + d as usize)
    }

    pub fn transform(&self, s: &[u8], g: usize) -> Vec<u8> {
        let p = PERMS[g % 6];
        let mut out: Vec<u8> = s.iter().map(|&d| p[d as usize]).collect();
        if g >= 6 {
            out.reverse();
        }
        out
    }

    fn block(&self, len: usize) -> (usize, usize) {
        (self.offset[len], self.offset[len + 1])
    }
}

pub fn token_seq(s: &[u8]) -> TokenSeq {
    TokenSeq::from_tokens(s.iter().map(|&d| SYMBOLS[d as usize]))
}

// ---- oracles ----

/// Offsets of each n-gram order in a [`NgramCounts`] table.
const ORDER_OFFSET: [usize; 5] = [0, 3, 12, 39, 120];

/// Occurrence count of every possible 1..=4-gram over the alphabet.
pub type NgramCounts = [u8; 120];

pub fn ngram_counts(s: &[u8]) -> NgramCounts {
    let mut t = [0u8; 120];
    for n in 1..=4 {
        for w in s.windows(n) {
            let code = w.iter().fold(0usize, |acc, &d| acc * 3 + d as usize);
            t[ORDER_OFFSET[n - 1] + code] += 1;
        }
    }
    t
}

/// Clipped n-gram counting with epsilon smoothing over the orders the
/// candidate actually has. `None` for an empty candidate.
pub fn bleu_oracle(
    c: &NgramCounts,
    clen: usize,
    r: &NgramCounts,
    rlen: usize,
    eps: f64,
) -> Option<f64> {
    if clen == 0 {
        return None;
    }
    let mut logs = Vec::with_capacity(4);
    for n in 1..=4usize.min(clen) {
        let total = clen - n + 1;
        let matched: usize = (ORDER_OFFSET[n - 1]..ORDER_OFFSET[n])
            .map(|g| c[g].min(r[g]) as usize)
            .sum();
        let p = if matched == 0 {
            eps / total as f64
        } else {
            matched as f64 / total as f64
        };
        logs.push(p.ln());
    }
    let bp = if clen > rlen {
        1.0
    } else {
        (1.0 - rlen as f64 / clen as f64).exp()
    };
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    Some(bp * mean.exp())
}

/// For every sequence, the set of its subsequences as a bitset over the
/// sequence index space.
pub struct Subsequences {
    words: usize,
    bits: Vec<u64>,
}

impl Subsequences {
    pub fn new(space: &Space) -> Self {
        let words = space.len().div_ceil(64);
        let mut bits = vec![0u64; words * space.len()];
        let mut sub = Vec::with_capacity(MAX_LEN);
        for (i, s) in space.seqs.iter().enumerate() {
            let row = &mut bits[i * words..(i + 1) * words];
            for mask in 0u32..(1 << s.len()) {
                sub.clear();
                sub.extend((0..s.len()).filter(|k| mask >> k & 1 == 1).map(|k| s[k]));
                let j = space.index(&sub);
                row[j / 64] |= 1 << (j % 64);
            }
        }
        Self { words, bits }
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    /// Longest sequence that is a subsequence of both.
    pub fn lcs(&self, space: &Space, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.row(a), self.row(b));
        let top = space.seqs[a].len().min(space.seqs[b].len());
        for len in (1..=top).rev() {
            let (lo, hi) = space.block(len);
            for w in lo / 64..=(hi - 1) / 64 {
                let mut x = ra[w] & rb[w];
                if w == lo / 64 {
                    x &= !0u64 << (lo % 64);
                }
                if w == (hi - 1) / 64 && hi % 64 != 0 {
                    x &= (1u64 << (hi % 64)) - 1;
                }
                if x != 0 {
                    return len;
                }
            }
        }
        0
    }
}

pub fn rouge_oracle(lcs: usize, clen: usize, rlen: usize, beta: f64) -> (f64, f64, f64) {
    if lcs == 0 || clen == 0 || rlen == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = lcs as f64 / clen as f64;
    let r = lcs as f64 / rlen as f64;
    let b2 = beta * beta;
    (p, r, (1.0 + b2) * p * r / (r + b2 * p))
}

/// Minimum chunk count over every alignment with the maximum number of
/// exact matches.
///
/// Walks the reference left to right; each position is either skipped or
/// matched to any unused candidate position holding the same symbol. A
/// state is (reference suffix, used candidate positions, candidate position
/// matched to the previous reference token), and its value depends on
/// nothing else, so for one candidate the memo is shared by all references.
pub struct ChunkOracle {
    /// `gen << 8 | value` per state.
    memo: Vec<u32>,
    gen: u32,
    /// Index of each sequence without its first token.
    tail: Vec<u32>,
    head: Vec<u8>,
    counts: Vec<[u8; 3]>,
    /// Candidate positions holding each symbol.
    at: [u32; 3],
}

const NONE: usize = MAX_LEN;
const UNREACHABLE: u8 = u8::MAX;

/// Bit counts of every 8-bit mask.
const POP: [u8; 256] = {
    let mut t = [0u8; 256];
    let mut i = 1;
    while i < 256 {
        t[i] = t[i >> 1] + (i & 1) as u8;
        i += 1;
    }
    t
};

impl ChunkOracle {
    pub fn new(space: &Space) -> Self {
        let n = space.len();
        let mut tail = vec![0u32; n];
        let mut head = vec![0u8; n];
        let mut counts = vec![[0u8; 3]; n];
        for (i, s) in space.seqs.iter().enumerate() {
            if let Some((&h, rest)) = s.split_first() {
                tail[i] = space.index(rest) as u32;
                head[i] = h;
            }
            for &d in s {
                counts[i][d as usize] += 1;
            }
        }
        Self {
            memo: vec![0; n * (1 << MAX_LEN) * (MAX_LEN + 1)],
            gen: 0,
            tail,
            head,
            counts,
            at: [0; 3],
        }
    }

    /// Fix the candidate for following [`ChunkOracle::solve`] calls.
    pub fn begin(&mut self, c: &[u8]) {
        self.gen += 1;
        self.at = [0; 3];
        for (i, &d) in c.iter().enumerate() {
            self.at[d as usize] |= 1 << i;
        }
    }

    /// Chunks of the best alignment of the current candidate with the
    /// reference at index `r`.
    pub fn solve(&mut self, r: usize) -> usize {
        let chunks = self.go(r, 0, NONE);
        assert_ne!(chunks, UNREACHABLE);
        chunks as usize
    }

    fn go(&mut self, s: usize, used: u32, prev: usize) -> u8 {
        // Index 0 is the empty sequence.
        if s == 0 {
            return 0;
        }
        let key = (s * (1 << MAX_LEN) + used as usize) * (MAX_LEN + 1) + prev;
        let slot = self.memo[key];
        if slot >> 8 == self.gen {
            return slot as u8;
        }
        let d = self.head[s] as usize;
        let t = self.tail[s] as usize;
        let free = self.at[d] & !used;
        let mut best = UNREACHABLE;
        // Skipping keeps the maximum only if this symbol is in surplus.
        if self.counts[s][d] > POP[free as usize] {
            best = self.go(t, used, NONE);
        }
        let mut options = free;
        while options != 0 {
            let i = options.trailing_zeros() as usize;
            options &= options - 1;
            let sub = self.go(t, used | 1 << i, i);
            let cost = u8::from(!(prev != NONE && i == prev + 1));
            best = best.min(sub.saturating_add(cost));
        }
        self.memo[key] = self.gen << 8 | best as u32;
        best
    }
}

pub fn meteor_oracle(m: usize, chunks: usize, clen: usize, rlen: usize, cfg: &MetricConfig) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / clen as f64;
    let r = m as f64 / rlen as f64;
    let fmean = p * r / (cfg.meteor_alpha * p + (1.0 - cfg.meteor_alpha) * r);
    let pen = cfg.meteor_gamma * (chunks as f64 / m as f64).powf(cfg.meteor_beta);
    fmean * (1.0 - pen)
}

// ---- drivers ----

struct Implementation {
    cfg: MetricConfig,
    meteor: Meteor,
    seqs: Vec<TokenSeq>,
    prepared: Vec<MeteorInput>,
}

impl Implementation {
    fn new(space: &Space) -> Self {
        let cfg = MetricConfig::default();
        let meteor = Meteor::from_config(&cfg).unwrap();
        let seqs: Vec<TokenSeq> = space.seqs.iter().map(|s| token_seq(s)).collect();
        let prepared = seqs.iter().map(|s| meteor.prepare(s)).collect();
        Self {
            cfg,
            meteor,
            seqs,
            prepared,
        }
    }

    /// BLEU (NaN for a rejected empty candidate), ROUGE-L P/R/F, METEOR.
    fn values(&self, c: usize, r: usize) -> [f64; 5] {
        let b = bleu(&self.seqs[c], std::slice::from_ref(&self.seqs[r]), &self.cfg)
            .unwrap_or(f64::NAN);
        let rl = rouge_l(&self.seqs[c], &self.seqs[r], self.cfg.rouge_beta);
        let mt = self.meteor.score_prepared(&self.prepared[c], &self.prepared[r]);
        [b, rl.precision, rl.recall, rl.f, mt]
    }
}

pub struct Outcome {
    pub representatives: u64,
    pub covered_pairs: u64,
    pub mismatches: Vec<String>,
}

fn close(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= TOL
}

fn max_matches(c: &[u8], r: &[u8]) -> usize {
    let mut cc = [0usize; 3];
    let mut rc = [0usize; 3];
    c.iter().for_each(|&d| cc[d as usize] += 1);
    r.iter().for_each(|&d| rc[d as usize] += 1);
    (0..3).map(|k| cc[k].min(rc[k])).sum()
}

pub fn run_exhaustive(space: &Space) -> Outcome {
    let imp = Implementation::new(space);
    for s in SYMBOLS {
        assert_eq!(imp.meteor.stem(s), s, "stemmer must leave the alphabet alone");
    }
    let subs = Subsequences::new(space);
    let counts: Vec<NgramCounts> = space.seqs.iter().map(|s| ngram_counts(s)).collect();
    let n = space.len();
    // Chunk counts do not depend on which side is the candidate, so each is
    // computed once per unordered orbit. Keyed by the representative pair.
    let chunk_cache: Vec<AtomicU8> = (0..n * n).map(|_| AtomicU8::new(UNREACHABLE)).collect();
    let canonical = |a: usize, b: usize| -> usize {
        (0..12)
            .map(|g| (space.images[a][g] as usize, space.images[b][g] as usize))
            .min()
            .map(|(x, y)| x * n + y)
            .unwrap()
    };

    let next_c = AtomicUsize::new(0);
    let representatives = AtomicU64::new(0);
    let covered = AtomicU64::new(0);
    let mismatches = Mutex::new(Vec::new());
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut chunk_oracle = ChunkOracle::new(space);
                let (mut reps, mut cov) = (0u64, 0u64);
                loop {
                    let c = next_c.fetch_add(1, Ordering::Relaxed);
                    if c >= n {
                        break;
                    }
                    let img_c = &space.images[c];
                    // Only orbit minima of the candidate can lead a representative pair.
                    if img_c.iter().any(|&x| (x as usize) < c) {
                        continue;
                    }
                    chunk_oracle.begin(&space.seqs[c]);
                    let stab: Vec<usize> = (0..12).filter(|&g| img_c[g] as usize == c).collect();
                    'refs: for r in 0..n {
                        let mut fixed = 0u64;
                        for &g in &stab {
                            let img = space.images[r][g] as usize;
                            if img < r {
                                continue 'refs;
                            }
                            fixed += u64::from(img == r);
                        }
                        reps += 1;
                        cov += 12 / fixed;

                        let (cs, rs) = (&space.seqs[c], &space.seqs[r]);
                        let got = imp.values(c, r);
                        let b = bleu_oracle(&counts[c], cs.len(), &counts[r], rs.len(), imp.cfg.bleu_epsilon)
                            .unwrap_or(f64::NAN);
                        let lcs = subs.lcs(space, c, r);
                        let (rp, rr, rf) = rouge_oracle(lcs, cs.len(), rs.len(), imp.cfg.rouge_beta);
                        let mt = if cs.is_empty() || rs.is_empty() {
                            0.0
                        } else {
                            let m = max_matches(cs, rs);
                            let swapped = canonical(r, c);
                            let cached = chunk_cache[swapped].load(Ordering::Relaxed);
                            let ch = if cached != UNREACHABLE {
                                cached as usize
                            } else {
                                let ch = chunk_oracle.solve(r);
                                chunk_cache[c * n + r].store(ch as u8, Ordering::Relaxed);
                                ch
                            };
                            meteor_oracle(m, ch, cs.len(), rs.len(), &imp.cfg)
                        };
                        let want = [b, rp, rr, rf, mt];
                        for (k, name) in ["bleu", "rouge_p", "rouge_r", "rouge_f", "meteor"].iter().enumerate() {
                            if !close(got[k], want[k]) {
                                let mut mm = mismatches.lock().unwrap();
                                if mm.len() < 20 {
                                    mm.push(format!(
                                        "{name} {:?} vs {:?}: got {} want {}",
                                        cs, rs, got[k], want[k]
                                    ));
                                }
                            }
                        }
                    }
                }
                representatives.fetch_add(reps, Ordering::Relaxed);
                covered.fetch_add(cov, Ordering::Relaxed);
            });
        }
    });
    Outcome {
        representatives: representatives.into_inner(),
        covered_pairs: covered.into_inner(),
        mismatches: mismatches.into_inner().unwrap(),
    }
}

/// Implementation values are bit-identical on `(c, r)` and on its image
/// under a random group element, for `samples` random pairs.
pub fn check_invariance(space: &Space, samples: usize, seed: u64) -> Result<(), String> {
    let imp = Implementation::new(space);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let c = rng.random_range(0..space.len());
        let r = rng.random_range(0..space.len());
        let g = rng.random_range(1..12);
        let (gc, gr) = (space.images[c][g] as usize, space.images[r][g] as usize);
        let a = imp.values(c, r);
        let b = imp.values(gc, gr);
        let same = a
            .iter()
            .zip(&b)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(format!(
                "{:?}/{:?} -> {:?}/{:?}: {a:?} vs {b:?}",
                space.seqs[c], space.seqs[r], space.seqs[gc], space.seqs[gr]
            ));
        }
    }
    Ok(())
}
