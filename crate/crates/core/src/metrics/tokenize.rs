use serde::{Deserialize, Serialize};

/// Tokenization scheme. Only one exists today; the enum keeps the call
/// sites explicit about which rules produced a sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenScheme {
    #[default]
    Default,
}

/// Lowercased tokens of a text plus the text they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub source_text: String,
}

impl TokenSeq {
    /// Build directly from pre-split tokens. Empty tokens are dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| !t.is_empty())
            .collect();
        let source_text = tokens.join(" ");
        Self {
            tokens,
            source_text,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.tokens
    }
}

const EXTRA_PUNCT: &[char] = &[
    '\u{2018}', '\u{2019}', '\u{201C}', '\u{201D}', '\u{2026}', '\u{2013}', '\u{2014}', '\u{00AB}',
    '\u{00BB}', '\u{00BF}', '\u{00A1}',
];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || EXTRA_PUNCT.contains(&c)
}

/// Lowercase, split on whitespace, and peel leading/trailing punctuation off
/// each word as one-character tokens. Inner punctuation (`a->b`, `x.y`) stays
/// attached to the word.
pub fn tokenize(text: &str, scheme: TokenScheme) -> TokenSeq {
    let TokenScheme::Default = scheme;
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    for word in lower.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let lead = chars.iter().take_while(|c| is_punct(**c)).count();
        if lead == chars.len() {
            tokens.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| is_punct(**c)).count();
        tokens.extend(chars[..lead].iter().map(|c| c.to_string()));
        tokens.push(chars[lead..chars.len() - trail].iter().collect());
        tokens.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    TokenSeq {
        tokens,
        source_text: text.to_string(),
    }
}
