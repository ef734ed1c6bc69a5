//! Code/reference corpus: one JSON object per line.
//!
//! ```text
//! {"id":"ex001","lang":"cpp","code":"int add(int a,int b){return a+b;}","reference":"Returns the sum of two integers."}
//! ```
//!
//! Required keys are `id`, `lang`, `code` and `reference`; `tags` is an
//! optional string array. Any other keys are kept verbatim and written back
//! out by [`write_corpus`], but otherwise ignored.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::metrics::tokenize::{tokenize, TokenScheme};
use crate::util::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate id {id:?} (first seen on line {first_line})")]
    DuplicateId {
        path: PathBuf,
        id: String,
        line: usize,
        first_line: usize,
    },
    #[error("cannot sample {requested} examples from a corpus of {available}")]
    Range { requested: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lang {
    #[serde(rename = "c")]
    C,
    #[serde(rename = "cpp")]
    Cpp,
}

impl Lang {
    /// Accepts `c`, `cpp` and `c++` in any case.
    pub fn parse(token: &str) -> Option<Lang> {
        match token.trim().to_ascii_lowercase().as_str() {
            "c" => Some(Lang::C),
            "cpp" | "c++" => Some(Lang::Cpp),
            _ => None,
        }
    }

    /// Fence tag used when embedding code in a prompt.
    pub fn fence_tag(self) -> &'static str {
        match self {
            Lang::C => "c",
            Lang::Cpp => "cpp",
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lang::C => "C",
            Lang::Cpp => "CPP",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeExample {
    pub id: String,
    pub lang: Lang,
    pub code: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    /// Unrecognised keys, preserved for round-tripping.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CodeExample {
    pub fn new(
        id: impl Into<String>,
        lang: Lang,
        code: impl Into<String>,
        reference: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            lang,
            code: code.into(),
            reference: reference.into(),
            tags: None,
            extra: Map::new(),
        }
    }
}

/// A record as it appears on disk, before the language token is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub lang: String,
    pub code: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl From<&CodeExample> for RawExample {
    fn from(ex: &CodeExample) -> Self {
        RawExample {
            id: ex.id.clone(),
            lang: ex.lang.fence_tag().to_string(),
            code: ex.code.clone(),
            reference: ex.reference.clone(),
            tags: ex.tags.clone(),
            extra: ex.extra.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    EmptyCode,
    EmptyReference,
    UnknownLang(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => f.write_str("id empty"),
            Violation::EmptyCode => f.write_str("code empty"),
            Violation::EmptyReference => f.write_str("reference empty"),
            Violation::UnknownLang(tok) => write!(f, "unknown lang {tok:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationResult {
    Ok,
    Violations(Vec<Violation>),
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, ValidationResult::Ok)
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            ValidationResult::Ok => &[],
            ValidationResult::Violations(v) => v,
        }
    }
}

/// Check every record invariant and report all failures, not just the first.
pub fn validate_example(ex: &RawExample) -> ValidationResult {
    let mut violations = Vec::new();
    if ex.id.trim().is_empty() {
        violations.push(Violation::EmptyId);
    }
    if Lang::parse(&ex.lang).is_none() {
        violations.push(Violation::UnknownLang(ex.lang.clone()));
    }
    if ex.code.trim().is_empty() {
        violations.push(Violation::EmptyCode);
    }
    if ex.reference.trim().is_empty() {
        violations.push(Violation::EmptyReference);
    }
    if violations.is_empty() {
        ValidationResult::Ok
    } else {
        ValidationResult::Violations(violations)
    }
}

/// A record skipped during load because it failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadWarning {
    pub line: usize,
    pub id: String,
    pub violations: Vec<Violation>,
}

impl fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(
            f,
            "line {}: skipped record {:?}: {}",
            self.line,
            self.id,
            list.join(", ")
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<CodeExample>,
    pub source_path: String,
}

impl Corpus {
    pub fn new(examples: Vec<CodeExample>, source_path: impl Into<String>) -> Self {
        Self {
            examples,
            source_path: source_path.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CodeExample> {
        self.examples.iter()
    }

    pub fn get(&self, id: &str) -> Option<&CodeExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Serialize in the on-disk line format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(&RawExample::from(ex)).expect("corpus row"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }
}

/// Load a corpus, logging skipped records.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let (corpus, warnings) = load_corpus_checked(path)?;
    for w in &warnings {
        log::warn!("{}: {w}", corpus.source_path);
    }
    if corpus.is_empty() {
        log::warn!("{}: corpus is empty", corpus.source_path);
    }
    Ok(corpus)
}

/// Load a corpus and return records that failed validation as warnings.
///
/// Structurally malformed lines (bad JSON, missing or mistyped keys) are
/// errors; records that parse but break an invariant are skipped.
pub fn load_corpus_checked(
    path: impl AsRef<Path>,
) -> Result<(Corpus, Vec<LoadWarning>), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);

    let mut examples = Vec::new();
    let mut warnings = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(&first_line) = seen.get(&raw.id) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                id: raw.id,
                line: line_no,
                first_line,
            });
        }
        seen.insert(raw.id.clone(), line_no);
        match validate_example(&raw) {
            ValidationResult::Ok => examples.push(CodeExample {
                lang: Lang::parse(&raw.lang).expect("validated"),
                id: raw.id,
                code: raw.code,
                reference: raw.reference,
                tags: raw.tags,
                extra: raw.extra,
            }),
            ValidationResult::Violations(violations) => warnings.push(LoadWarning {
                line: line_no,
                id: raw.id,
                violations,
            }),
        }
    }

    Ok((Corpus::new(examples, path.display().to_string()), warnings))
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    fs::write(path, corpus.to_jsonl()).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Deterministic sample of `n` examples, kept in file order.
pub fn sample_corpus(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus, CorpusError> {
    if n > corpus.len() {
        return Err(CorpusError::Range {
            requested: n,
            available: corpus.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, corpus.len(), n).into_vec();
    picked.sort_unstable();
    let examples = picked
        .into_iter()
        .map(|i| corpus.examples[i].clone())
        .collect();
    Ok(Corpus::new(examples, corpus.source_path.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LengthStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub count: usize,
    pub per_lang_count: BTreeMap<Lang, usize>,
    /// Reference length in metric tokens; `None` for an empty corpus.
    pub reference_word_length: Option<LengthStats>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "examples: {}", self.count)?;
        for (lang, n) in &self.per_lang_count {
            write!(f, "  {lang}: {n}")?;
        }
        if let Some(len) = &self.reference_word_length {
            write!(
                f,
                "\nreference tokens: min {} / mean {:.2} / max {}",
                len.min, len.mean, len.max
            )?;
        }
        Ok(())
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut per_lang_count = BTreeMap::new();
    for ex in corpus.iter() {
        *per_lang_count.entry(ex.lang).or_insert(0) += 1;
    }
    let lengths: Vec<usize> = corpus
        .iter()
        .map(|ex| tokenize(&ex.reference, TokenScheme::Default).len())
        .collect();
    let reference_word_length = if lengths.is_empty() {
        None
    } else {
        Some(LengthStats {
            min: *lengths.iter().min().unwrap(),
            mean: lengths.iter().sum::<usize>() as f64 / lengths.len() as f64,
            max: *lengths.iter().max().unwrap(),
        })
    };
    CorpusStats {
        count: corpus.len(),
        per_lang_count,
        reference_word_length,
    }
}
