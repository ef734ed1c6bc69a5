//! METEOR with staged one-to-one alignment.
//!
//! Tokens are aligned in three stages over whatever is still unmatched:
//! exact surface form, then Snowball stem, then synonym class. Each stage
//! matches as many tokens as possible, which fixes the number of matches per
//! stage; among all alignments reaching those counts the one with the fewest
//! chunks is chosen. Finding that alignment is a combinatorial search, so it
//! is branch-and-bound seeded with a greedy alignment and capped at
//! [`SEARCH_BUDGET`] nodes (the best alignment found so far is used if the
//! cap is hit, which only happens on long texts with many repeated words).
//!
//! Score: `F = P·R / (α·P + (1−α)·R)`, penalty `γ·(chunks/matches)^β`,
//! result `F·(1 − penalty)`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rust_stemmers::{Algorithm, Stemmer};

use super::{MetricConfig, MetricError, TokenSeq};

pub const SEARCH_BUDGET: usize = 200_000;

const LEVELS: usize = 3;

/// Synonym classes over stems; sets that share a word are merged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymTable {
    class_of: HashMap<String, usize>,
}

impl SynonymTable {
    /// One synonym set per line, whitespace-separated words.
    pub fn parse(text: &str, stem: impl Fn(&str) -> String) -> Self {
        let mut parent: Vec<usize> = Vec::new();
        let mut id_of: HashMap<String, usize> = HashMap::new();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for line in text.lines() {
            let mut first: Option<usize> = None;
            for word in line.split_whitespace() {
                let key = stem(&word.to_lowercase());
                let id = *id_of.entry(key).or_insert_with(|| {
                    parent.push(parent.len());
                    parent.len() - 1
                });
                match first {
                    None => first = Some(id),
                    Some(f) => {
                        let (a, b) = (find(&mut parent, f), find(&mut parent, id));
                        if a != b {
                            parent[b.max(a)] = a.min(b);
                        }
                    }
                }
            }
        }
        let class_of = id_of
            .into_iter()
            .map(|(k, id)| {
                let root = find(&mut parent, id);
                (k, root)
            })
            .collect();
        Self { class_of }
    }

    pub fn class(&self, stem: &str) -> Option<usize> {
        self.class_of.get(stem).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }
}

/// A tokenized text with its per-token stems and synonym classes.
#[derive(Debug, Clone, PartialEq)]
pub struct MeteorInput {
    surface: Vec<String>,
    stem: Vec<String>,
    class: Vec<Option<usize>>,
}

impl MeteorInput {
    pub fn len(&self) -> usize {
        self.surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface.is_empty()
    }
}

pub struct Meteor {
    alpha: f64,
    beta: f64,
    gamma: f64,
    stemmer: Option<Stemmer>,
    synonyms: SynonymTable,
}

impl std::fmt::Debug for Meteor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Meteor")
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("gamma", &self.gamma)
            .field("stemming", &self.stemmer.is_some())
            .field("synonym_words", &self.synonyms.class_of.len())
            .finish()
    }
}

/// Result of aligning two inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    /// `pairs[i] = Some(j)` when candidate token `i` is aligned to reference token `j`.
    pub pairs: Vec<Option<usize>>,
    pub matches: usize,
    pub chunks: usize,
    /// False when the search budget ran out before optimality was proven.
    pub exhaustive: bool,
    /// Search nodes visited.
    pub nodes: usize,
}

pub fn count_chunks(pairs: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    for (i, p) in pairs.iter().enumerate() {
        if let Some(j) = *p {
            let continues = i > 0 && j > 0 && pairs[i - 1] == Some(j - 1);
            if !continues {
                chunks += 1;
            }
        }
    }
    chunks
}

impl Meteor {
    pub fn new(alpha: f64, beta: f64, gamma: f64, stemming: bool, synonyms: SynonymTable) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            stemmer: stemming.then(|| Stemmer::create(Algorithm::English)),
            synonyms,
        }
    }

    pub fn from_config(cfg: &MetricConfig) -> Result<Self, MetricError> {
        let mut m = Self::new(
            cfg.meteor_alpha,
            cfg.meteor_beta,
            cfg.meteor_gamma,
            cfg.meteor_stemming,
            SynonymTable::default(),
        );
        if let Some(path) = &cfg.meteor_synonym_table {
            m.synonyms = m.load_synonyms(path)?;
        }
        Ok(m)
    }

    pub fn load_synonyms(&self, path: &Path) -> Result<SynonymTable, MetricError> {
        let text = fs::read_to_string(path).map_err(|source| MetricError::SynonymTable {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(SynonymTable::parse(&text, |w| self.stem(w)))
    }

    pub fn stem(&self, word: &str) -> String {
        match &self.stemmer {
            Some(s) => s.stem(word).into_owned(),
            None => word.to_string(),
        }
    }

    pub fn prepare(&self, seq: &TokenSeq) -> MeteorInput {
        let stem: Vec<String> = seq.tokens.iter().map(|t| self.stem(t)).collect();
        let class = stem.iter().map(|s| self.synonyms.class(s)).collect();
        MeteorInput {
            surface: seq.tokens.clone(),
            stem,
            class,
        }
    }

    pub fn score(&self, candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
        self.score_prepared(&self.prepare(candidate), &self.prepare(reference))
    }

    pub fn score_prepared(&self, cand: &MeteorInput, reference: &MeteorInput) -> f64 {
        if cand.is_empty() || reference.is_empty() {
            return 0.0;
        }
        let al = align(cand, reference);
        self.score_alignment(al.matches, al.chunks, cand.len(), reference.len())
    }

    pub fn score_alignment(
        &self,
        matches: usize,
        chunks: usize,
        cand_len: usize,
        ref_len: usize,
    ) -> f64 {
        if matches == 0 {
            return 0.0;
        }
        let m = matches as f64;
        let p = m / cand_len as f64;
        let r = m / ref_len as f64;
        let fmean = p * r / (self.alpha * p + (1.0 - self.alpha) * r);
        let frag = chunks as f64 / m;
        let penalty = self.gamma * frag.powf(self.beta);
        (fmean * (1.0 - penalty)).clamp(0.0, 1.0)
    }
}

/// Sentence METEOR under `cfg`.
pub fn meteor(
    candidate: &TokenSeq,
    reference: &TokenSeq,
    cfg: &MetricConfig,
) -> Result<f64, MetricError> {
    Ok(Meteor::from_config(cfg)?.score(candidate, reference))
}

/// Key chains for both sides, candidate tokens first. Ids are global across
/// levels, so one flat array indexed by id can hold a per-group value for
/// every level.
struct Keys {
    keys: Vec<[u32; LEVELS]>,
    n: usize,
    /// Chain of each distinct surface form; `distinct[s][0] == s`.
    distinct: Vec<[u32; LEVELS]>,
    total: usize,
}

impl Keys {
    fn cand(&self) -> &[[u32; LEVELS]] {
        &self.keys[..self.n]
    }

    fn refr(&self) -> &[[u32; LEVELS]] {
        &self.keys[self.n..]
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ClassKey<'a> {
    Set(usize),
    /// Not in any synonym set: only equal stems share a class.
    Stem(&'a str),
}

/// Dense id of `k` in `seen`, appending it when new.
fn intern<T: PartialEq + Copy>(seen: &mut Vec<T>, k: T) -> u32 {
    match seen.iter().position(|x| *x == k) {
        Some(i) => i as u32,
        None => {
            seen.push(k);
            (seen.len() - 1) as u32
        }
    }
}

struct Interner<'a> {
    surface: Vec<&'a str>,
    chains: Vec<[u32; LEVELS]>,
    stems: Vec<&'a str>,
    classes: Vec<ClassKey<'a>>,
}

impl<'a> Interner<'a> {
    fn side(&mut self, input: &'a MeteorInput, out: &mut Vec<[u32; LEVELS]>) {
        for i in 0..input.len() {
            let s = intern(&mut self.surface, &input.surface[i]) as usize;
            if s == self.chains.len() {
                let class = match input.class[i] {
                    Some(c) => ClassKey::Set(c),
                    None => ClassKey::Stem(&input.stem[i]),
                };
                self.chains.push([
                    s as u32,
                    intern(&mut self.stems, &input.stem[i]),
                    intern(&mut self.classes, class),
                ]);
            }
            out.push(self.chains[s]);
        }
    }
}

fn intern_keys(cand: &MeteorInput, refr: &MeteorInput) -> Keys {
    let cap = cand.len() + refr.len();
    let mut it = Interner {
        surface: Vec::with_capacity(cap),
        chains: Vec::with_capacity(cap),
        stems: Vec::with_capacity(cap),
        classes: Vec::with_capacity(cap),
    };
    let mut keys = Vec::with_capacity(cap);
    it.side(cand, &mut keys);
    it.side(refr, &mut keys);
    let sizes = [it.surface.len(), it.stems.len(), it.classes.len()];
    let offset = [0, sizes[0] as u32, (sizes[0] + sizes[1]) as u32];
    for k in keys.iter_mut().chain(it.chains.iter_mut()) {
        for l in 0..LEVELS {
            k[l] += offset[l];
        }
    }
    Keys {
        keys,
        n: cand.len(),
        distinct: it.chains,
        total: sizes.iter().sum(),
    }
}

/// Earliest stage at which the two key chains agree.
fn stage_of(a: &[u32; LEVELS], b: &[u32; LEVELS]) -> Option<usize> {
    (0..LEVELS).find(|&l| a[l] == b[l])
}

fn bump(v: &mut [u32], id: u32, take: bool) {
    let x = &mut v[id as usize];
    if take {
        *x -= 1;
    } else {
        *x += 1;
    }
}

const NONE: u32 = u32::MAX;

fn chunks_in(pairs: &[u32]) -> usize {
    let mut chunks = 0;
    for (i, &j) in pairs.iter().enumerate() {
        if j != NONE && !(i > 0 && j > 0 && pairs[i - 1] == j - 1) {
            chunks += 1;
        }
    }
    chunks
}

/// Splits the first `len` values off `rest`.
fn carve<'a>(rest: &mut &'a mut [u32], len: usize) -> &'a mut [u32] {
    let (head, tail) = std::mem::take(rest).split_at_mut(len);
    *rest = tail;
    head
}

struct Search<'a> {
    keys: &'a Keys,
    /// Options open to candidate token `i`, encoded `j << 2 | stage`, are
    /// `options[starts[i]..starts[i + 1]]`.
    options: &'a [u32],
    starts: &'a [u32],
    bounds: ChunkBounds<'a>,
    /// Matches still available to each group at the stage it belongs to.
    quota: &'a mut [u32],
    /// Matches each group must still take part in, at its level or finer.
    demand: &'a mut [u32],
    supply_c: &'a mut [u32],
    supply_r: &'a mut [u32],
    used_r: &'a mut [u32],
    pairs: &'a mut [u32],
    best: &'a mut [u32],
    best_chunks: usize,
    /// Matches still to place.
    owed: usize,
    nodes: usize,
    exhausted_budget: bool,
}

impl Search<'_> {
    fn feasible(&self, chain: &[u32; LEVELS], cand_side: bool) -> bool {
        let supply: &[u32] = if cand_side {
            self.supply_c
        } else {
            self.supply_r
        };
        chain
            .iter()
            .all(|&g| supply[g as usize] >= self.demand[g as usize])
    }

    fn consume(&mut self, chain: [u32; LEVELS], cand_side: bool, take: bool) {
        let supply: &mut [u32] = if cand_side {
            self.supply_c
        } else {
            self.supply_r
        };
        for g in chain {
            bump(supply, g, take);
        }
    }

    fn take_quota(&mut self, stage: usize, chain: [u32; LEVELS], take: bool) {
        bump(self.quota, chain[stage], take);
        for &g in &chain[stage..] {
            bump(self.demand, g, take);
        }
    }

    /// Upper bound on how many more tokens the open chunk can absorb when
    /// it continues at reference position `cont`.
    fn run_room(&self, i: usize, cont: Option<usize>) -> usize {
        let Some(mut j) = cont else { return 0 };
        let refr = self.keys.refr();
        let mut room = 0;
        for c in &self.keys.cand()[i..] {
            if j >= refr.len() || self.used_r[j] != 0 || stage_of(c, &refr[j]).is_none() {
                break;
            }
            room += 1;
            j += 1;
        }
        room
    }

    fn dfs(&mut self, i: usize, chunks: usize) {
        if self.nodes >= SEARCH_BUDGET {
            self.exhausted_budget = true;
            return;
        }
        self.nodes += 1;
        if chunks >= self.best_chunks {
            return;
        }
        if i == self.keys.n {
            self.best_chunks = chunks;
            self.best.copy_from_slice(self.pairs);
            return;
        }
        let ci = self.keys.cand()[i];
        let prev = if i > 0 { self.pairs[i - 1] } else { NONE };
        let cont = (prev != NONE).then(|| prev as usize + 1);
        let room = self.run_room(i, cont).min(self.owed);
        let lower = (0..=room)
            .map(|e| self.bounds.get(i + e, self.owed - e))
            .min()
            .unwrap_or(0);
        if chunks.saturating_add(lower) >= self.best_chunks {
            return;
        }
        let options = self.options;
        let opts = &options[self.starts[i] as usize..self.starts[i + 1] as usize];
        let first = cont.and_then(|c| opts.binary_search_by_key(&(c as u32), |o| o >> 2).ok());
        let rest = (0..opts.len()).filter(|&k| Some(k) != first);

        self.consume(ci, true, true);
        for o in first.into_iter().chain(rest).map(|k| opts[k]) {
            let (j, stage) = ((o >> 2) as usize, (o & 3) as usize);
            if self.used_r[j] != 0 || self.quota[ci[stage] as usize] == 0 {
                continue;
            }
            let add = usize::from(Some(j) != cont);
            if chunks + add >= self.best_chunks {
                continue;
            }
            let rj = self.keys.refr()[j];
            self.take_quota(stage, ci, true);
            self.consume(rj, false, true);
            if self.feasible(&ci, true) && self.feasible(&rj, false) {
                self.used_r[j] = 1;
                self.pairs[i] = j as u32;
                self.owed -= 1;
                self.dfs(i + 1, chunks + add);
                self.owed += 1;
                self.pairs[i] = NONE;
                self.used_r[j] = 0;
            }
            self.consume(rj, false, false);
            self.take_quota(stage, ci, false);
            if self.best_chunks <= 1 || self.exhausted_budget {
                self.consume(ci, true, false);
                return;
            }
        }
        // Leaving token i unmatched means the next match opens a chunk.
        let skip_cost = usize::from(self.owed > 0);
        if chunks + skip_cost < self.best_chunks && self.feasible(&ci, true) {
            self.dfs(i + 1, chunks);
        }
        self.consume(ci, true, false);
    }
}

/// `get(i, k)`: fewest chunks that can hold `k` matches among candidate
/// tokens `i..`, when any run of candidate tokens equal to some stretch of
/// the reference may form a chunk. Ignores reuse of reference tokens and the
/// stage quotas, so it never overestimates.
struct ChunkBounds<'a> {
    width: usize,
    table: &'a [u32],
}

impl<'a> ChunkBounds<'a> {
    /// `scratch` needs `2m + 2` values; `table` needs `(n + 1)²`.
    fn new(keys: &Keys, scratch: &mut [u32], table: &'a mut [u32]) -> Self {
        let (cand, refr) = (keys.cand(), keys.refr());
        let (n, m) = (cand.len(), refr.len());
        let (mut ext, mut next) = scratch.split_at_mut(m + 1);
        ext.fill(0);
        let width = n + 1;
        table.fill(NONE);
        table[n * width] = 0;
        for i in (0..n).rev() {
            // Longest run starting at i that lines up with a reference stretch.
            let mut longest = 0;
            for j in 0..m {
                next[j] = if stage_of(&cand[i], &refr[j]).is_some() {
                    1 + ext[j + 1]
                } else {
                    0
                };
                longest = longest.max(next[j] as usize);
            }
            next[m] = 0;
            std::mem::swap(&mut ext, &mut next);
            table[i * width] = 0;
            for k in 1..=n - i {
                let mut best = table[(i + 1) * width + k];
                for len in 1..=longest.min(k) {
                    let rest = table[(i + len) * width + k - len];
                    if rest != NONE {
                        best = best.min(rest + 1);
                    }
                }
                table[i * width + k] = best;
            }
        }
        Self { width, table }
    }

    fn get(&self, i: usize, k: usize) -> usize {
        if k >= self.width {
            return usize::MAX;
        }
        match self.table[i * self.width + k] {
            NONE => usize::MAX,
            v => v as usize,
        }
    }
}

/// Per-stage match quotas, by group id: maximal matching at each stage over
/// what earlier stages left unmatched. `gc` and `gr` are scratch by group id,
/// `lc` and `lr` scratch by distinct surface.
fn stage_quotas(
    keys: &Keys,
    quota: &mut [u32],
    gc: &mut [u32],
    gr: &mut [u32],
    lc: &mut [u32],
    lr: &mut [u32],
) {
    // Unmatched token counts per distinct key chain.
    for k in keys.cand() {
        lc[k[0] as usize] += 1;
    }
    for k in keys.refr() {
        lr[k[0] as usize] += 1;
    }
    let left = &keys.distinct;
    for level in 0..LEVELS {
        for (s, k) in left.iter().enumerate() {
            gc[k[level] as usize] += lc[s];
            gr[k[level] as usize] += lr[s];
        }
        for k in left {
            let g = k[level] as usize;
            quota[g] = gc[g].min(gr[g]);
        }
        // Remove matched counts from the leftovers. Which chains inside a
        // group give them up does not matter for later levels: a group at
        // level `l` lies inside a single group at every coarser level.
        for k in left {
            let g = k[level] as usize;
            gc[g] = quota[g];
            gr[g] = quota[g];
        }
        for (s, k) in left.iter().enumerate() {
            let g = k[level] as usize;
            let tc = gc[g].min(lc[s]);
            gc[g] -= tc;
            lc[s] -= tc;
            let tr = gr[g].min(lr[s]);
            gr[g] -= tr;
            lr[s] -= tr;
        }
    }
}

fn greedy(keys: &Keys, q: &mut [u32], pairs: &mut [u32], used: &mut [u32]) {
    let (cand, refr) = (keys.cand(), keys.refr());
    pairs.fill(NONE);
    for stage in 0..LEVELS {
        for i in 0..cand.len() {
            if pairs[i] != NONE {
                continue;
            }
            let ci = cand[i];
            let g = ci[stage] as usize;
            if q[g] == 0 {
                continue;
            }
            let fits = |j: usize| used[j] == 0 && stage_of(&ci, &refr[j]) == Some(stage);
            let cont = (i > 0 && pairs[i - 1] != NONE)
                .then(|| pairs[i - 1] as usize + 1)
                .filter(|&j| j < refr.len() && fits(j));
            // Open a new chunk where the longest run lines up.
            let run = |j: usize| {
                (0..)
                    .take_while(|&k| {
                        i + k < cand.len()
                            && j + k < refr.len()
                            && used[j + k] == 0
                            && pairs[i + k] == NONE
                            && stage_of(&cand[i + k], &refr[j + k]).is_some()
                    })
                    .count()
            };
            let pick = cont.or_else(|| {
                (0..refr.len())
                    .filter(|&j| fits(j))
                    .max_by_key(|&j| (run(j), std::cmp::Reverse(j)))
            });
            if let Some(j) = pick {
                used[j] = 1;
                pairs[i] = j as u32;
                q[g] -= 1;
            }
        }
    }
}

fn alignment(pairs: &[u32], matches: usize, chunks: usize, exhaustive: bool, nodes: usize) -> Alignment {
    Alignment {
        pairs: pairs
            .iter()
            .map(|&j| (j != NONE).then_some(j as usize))
            .collect(),
        matches,
        chunks,
        exhaustive,
        nodes,
    }
}

/// Minimum-chunk staged alignment.
pub fn align(cand: &MeteorInput, reference: &MeteorInput) -> Alignment {
    let keys = intern_keys(cand, reference);
    let (n, m, t, s) = (keys.n, keys.keys.len() - keys.n, keys.total, keys.distinct.len());
    let mut arena = vec![0u32; 8 * t + 2 * s + 4 * n + 3 * m + 4 + (n + 1) * (n + 1) + n * m];
    let mut rest = arena.as_mut_slice();
    let quota = carve(&mut rest, t);
    let demand = carve(&mut rest, t);
    let seen = carve(&mut rest, t);
    let supply_c = carve(&mut rest, t);
    let supply_r = carve(&mut rest, t);
    let gc = carve(&mut rest, t);
    let gr = carve(&mut rest, t);
    let q = carve(&mut rest, t);
    let lc = carve(&mut rest, s);
    let lr = carve(&mut rest, s);
    let initial = carve(&mut rest, n);
    let pairs = carve(&mut rest, n);
    let used_r = carve(&mut rest, m);
    let scratch = carve(&mut rest, 2 * m + 2);
    let starts = carve(&mut rest, n + 1);
    let table = carve(&mut rest, (n + 1) * (n + 1));
    let options = rest;

    stage_quotas(&keys, quota, gc, gr, lc, lr);
    let matches: usize = quota.iter().map(|&q| q as usize).sum();
    q.copy_from_slice(quota);
    greedy(&keys, q, initial, used_r);
    let initial_chunks = chunks_in(initial);
    if matches == 0 || initial_chunks <= 1 {
        return alignment(initial, matches, initial_chunks, true, 0);
    }
    let bounds = ChunkBounds::new(&keys, scratch, table);
    if bounds.get(0, matches) >= initial_chunks {
        return alignment(initial, matches, initial_chunks, true, 0);
    }

    // A group's quota also counts toward the groups containing it at every
    // coarser level.
    for ch in &keys.keys {
        for l in 0..LEVELS {
            let g = ch[l] as usize;
            if std::mem::replace(&mut seen[g], 1) == 0 {
                for &up in &ch[l..] {
                    demand[up as usize] += quota[g];
                }
            }
        }
    }
    for (side, supply) in [(keys.cand(), &mut *supply_c), (keys.refr(), &mut *supply_r)] {
        for ch in side {
            for &g in ch {
                supply[g as usize] += 1;
            }
        }
    }
    let mut len = 0;
    for (i, ci) in keys.cand().iter().enumerate() {
        starts[i] = len as u32;
        for (j, rj) in keys.refr().iter().enumerate() {
            if let Some(st) = stage_of(ci, rj) {
                options[len] = (j as u32) << 2 | st as u32;
                len += 1;
            }
        }
    }
    starts[n] = len as u32;
    used_r.fill(0);
    pairs.fill(NONE);
    let mut search = Search {
        keys: &keys,
        options: &options[..len],
        starts,
        bounds,
        quota,
        demand,
        supply_c,
        supply_r,
        used_r,
        pairs,
        best: initial,
        best_chunks: initial_chunks,
        owed: matches,
        nodes: 0,
        exhausted_budget: false,
    };
    search.dfs(0, 0);
    alignment(
        search.best,
        matches,
        search.best_chunks,
        !search.exhausted_budget,
        search.nodes,
    )
}
