//! Offline backend. Every answer is a pure function of the request content,
//! the model id and the seed, so runs are reproducible regardless of call
//! order, thread interleaving or wall clock.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    check_embed_input, ChatBackend, ClientError, CompletionResult, DecodingParams, Embedder,
    EmbeddingMatrix, ModelEndpoint,
};
use crate::metrics::tokenize::{tokenize, TokenScheme};
use crate::prompting::{PromptBundle, PromptKind};

pub const MOCK_EMBEDDING_DIM: usize = 64;

const C_KEYWORDS: &[&str] = &[
    "auto", "bool", "break", "case", "char", "class", "const", "continue", "default", "delete",
    "do", "double", "else", "enum", "extern", "float", "for", "if", "include", "inline", "int",
    "long", "namespace", "new", "nullptr", "private", "public", "return", "short", "signed",
    "sizeof", "static", "std", "struct", "switch", "template", "this", "typedef", "typename",
    "unsigned", "using", "void", "volatile", "while", "size_t", "true", "false", "NULL",
];

const VERBS: &[&str] = &[
    "Returns", "Computes", "Checks", "Updates", "Builds", "Processes", "Calculates", "Finds",
];
const OBJECTS: &[&str] = &[
    "the value of", "the result of", "the sum of", "a pointer to", "the number of", "the size of",
];
const LINKS: &[&str] = &["using", "from", "for", "with", "based on"];
const REWRITE_VERBS: &[&str] = &["Returns", "Computes", "Determines", "Produces"];

#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend {
    seed: u64,
}

fn rng_for(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Identifier-like words inside fenced code blocks of `text`, first
/// occurrence order, keywords removed.
fn code_identifiers(text: &str) -> Vec<String> {
    let mut in_fence = false;
    let mut out: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            in_fence = !in_fence;
            continue;
        }
        if !in_fence {
            continue;
        }
        for word in line.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')) {
            let ok = word.len() >= 2
                && word.starts_with(|c: char| c.is_ascii_alphabetic() || c == '_')
                && !C_KEYWORDS.contains(&word);
            if ok && !out.iter().any(|w| w == word) {
                out.push(word.to_string());
            }
        }
    }
    out
}

fn draft_of(text: &str) -> Option<&str> {
    let marker = "Draft description:\n";
    text.find(marker).map(|i| text[i + marker.len()..].trim())
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn describe(&self, rng: &mut ChaCha8Rng, idents: &[String]) -> String {
        let pick = |rng: &mut ChaCha8Rng| -> String {
            idents
                .choose(rng)
                .cloned()
                .unwrap_or_else(|| "input".to_string())
        };
        let mut s = format!(
            "{} {} {}",
            VERBS.choose(rng).unwrap(),
            OBJECTS.choose(rng).unwrap(),
            pick(rng)
        );
        let extra = rng.random_range(0..3);
        for _ in 0..extra {
            s.push_str(&format!(" {} {}", LINKS.choose(rng).unwrap(), pick(rng)));
        }
        s.push('.');
        s
    }

    fn refine(&self, rng: &mut ChaCha8Rng, draft: &str) -> String {
        // Roughly half of the drafts come back untouched.
        if rng.random_bool(0.5) {
            return draft.to_string();
        }
        let mut words: Vec<&str> = draft.split_whitespace().collect();
        if words.is_empty() {
            return draft.to_string();
        }
        words[0] = REWRITE_VERBS.choose(rng).unwrap();
        if words.len() > 6 && rng.random_bool(0.5) {
            words.truncate(6);
            let mut out = words.join(" ");
            out.push('.');
            return out.replace("..", ".");
        }
        words.join(" ")
    }

    /// The reply text alone; `complete` wraps it into a result.
    pub fn reply_text(&self, endpoint: &ModelEndpoint, bundle: &PromptBundle, params: &DecodingParams) -> String {
        let seed = self.seed.to_le_bytes();
        let req_seed = params.seed.unwrap_or(0).to_le_bytes();
        let mut rng = rng_for(&[
            &seed,
            &req_seed,
            endpoint.model_id.as_bytes(),
            bundle.content_hash.as_bytes(),
        ]);
        let user = bundle.user_text();
        match (bundle.kind, draft_of(user)) {
            (PromptKind::Refiner, Some(draft)) if !draft.is_empty() => self.refine(&mut rng, draft),
            _ => self.describe(&mut rng, &code_identifiers(user)),
        }
    }
}

impl ChatBackend for MockBackend {
    fn complete(
        &self,
        endpoint: &ModelEndpoint,
        bundle: &PromptBundle,
        params: &DecodingParams,
    ) -> Result<CompletionResult, ClientError> {
        if bundle.messages.is_empty() {
            return Err(ClientError::InvalidRequest("prompt has no messages".into()));
        }
        let text = self.reply_text(endpoint, bundle, params);
        let completion_tokens = text.split_whitespace().count() as u64;
        let prompt_tokens = bundle
            .messages
            .iter()
            .map(|m| m.content.split_whitespace().count() as u64)
            .sum();
        Ok(CompletionResult {
            text,
            prompt_tokens: Some(prompt_tokens),
            completion_tokens: Some(completion_tokens),
            latency_ms: 0,
            model_id: endpoint.model_id.clone(),
        })
    }
}

/// Bag-of-tokens embeddings: each metric token hashes to one signed basis
/// direction of a 64-dimensional space; a text is the L2-normalised sum.
/// Texts sharing tokens therefore share components.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEmbedder {
    seed: u64,
}

impl MockEmbedder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn direction(&self, token: &str) -> (usize, f64) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let d = h.finalize();
        let idx = u64::from_le_bytes(d[..8].try_into().unwrap()) as usize % MOCK_EMBEDDING_DIM;
        let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        (idx, sign)
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; MOCK_EMBEDDING_DIM];
        for tok in &tokenize(text, TokenScheme::Default).tokens {
            let (i, s) = self.direction(tok);
            v[i] += s;
        }
        let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Contributions cancelled out; fall back to the whole text's direction.
            let (i, s) = self.direction(&format!("\u{0}{text}"));
            v[i] = s;
            norm = 1.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, ClientError> {
        check_embed_input(texts)?;
        EmbeddingMatrix::new(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}
