//! Prompt rendering for the generator and refiner stages.
//!
//! A generator prompt is a system message made of a style's task text, an
//! optional `Guidance:` block, and (for the few-shot style) worked examples,
//! followed by a user message holding the fenced code. Rendering is pure:
//! identical inputs give byte-identical messages and the same content hash.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, CodeExample, Corpus, CorpusError};
use crate::util::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("draft description is empty")]
    EmptyDraft,
    #[error("unknown guidance point {0:?}")]
    UnknownGuidance(String),
    #[error("few-shot exemplars: {0}")]
    Exemplars(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    SystemRoleBased,
    ZeroShotInstruction,
    FewShotTask,
    SystemMessageChat,
    DeveloperToolInstruction,
    ConciseOneLine,
}

impl PromptStyle {
    pub const ALL: [PromptStyle; 6] = [
        PromptStyle::SystemRoleBased,
        PromptStyle::ZeroShotInstruction,
        PromptStyle::FewShotTask,
        PromptStyle::SystemMessageChat,
        PromptStyle::DeveloperToolInstruction,
        PromptStyle::ConciseOneLine,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PromptStyle::SystemRoleBased => "System Role-Based",
            PromptStyle::ZeroShotInstruction => "Zero-Shot Instruction",
            PromptStyle::FewShotTask => "Few-Shot Task",
            PromptStyle::SystemMessageChat => "System Message (Chat Setup)",
            PromptStyle::DeveloperToolInstruction => "Developer Tool Instruction",
            PromptStyle::ConciseOneLine => "Concise One-Line Description",
        }
    }

    /// The task description that opens the system message.
    pub fn task_text(self) -> &'static str {
        match self {
            PromptStyle::SystemRoleBased => {
                "You are an AI assistant trained to analyze C and C++ code. Your task is to \
                 generate a natural language description that interprets the code\u{2019}s logic, \
                 explains its purpose, or suggests relevant actions. Focus on producing a clear \
                 and purposeful explanation that reflects deep understanding."
            }
            PromptStyle::ZeroShotInstruction => {
                "Your task is to read the provided C/C++ code and produce a natural language \
                 description. The description should be purposeful, concise, and show an \
                 informed understanding of the code's behavior and intent."
            }
            PromptStyle::FewShotTask => {
                "For each C or C++ code snippet, generate a short explanation or recommendation \
                 in natural language. Your output should abstract away from syntax and emphasize \
                 what the code does and why it matters."
            }
            PromptStyle::SystemMessageChat => {
                "You are a natural language description generator. Given a C or C++ function, \
                 produce a clear and insightful description or recommendation that captures the \
                 intent and behavior of the code."
            }
            PromptStyle::DeveloperToolInstruction => {
                "Act as a smart code interpreter. When given a piece of C or C++ code, provide a \
                 clear, concise natural language summary that reflects what the code does and \
                 why it's written that way."
            }
            PromptStyle::ConciseOneLine => {
                "You are a Natural Language Descriptor (NLD) specialized in analyzing C and C++ \
                 source code. Your task is to generate a concise, one-line natural language \
                 description explaining what the code does."
            }
        }
    }

    pub fn notes(self) -> &'static str {
        match self {
            PromptStyle::SystemRoleBased => {
                "Best for setting context in system prompts (e.g., OpenAI API system role)."
            }
            PromptStyle::ZeroShotInstruction => {
                "Direct and effective for one-off prompt completions."
            }
            PromptStyle::FewShotTask => "Ideal for few-shot prompting setups with examples.",
            PromptStyle::SystemMessageChat => {
                "Good for defining the LLM's role in conversational agents."
            }
            PromptStyle::DeveloperToolInstruction => {
                "Useful for integration into IDE plugins or automated code documentation systems."
            }
            PromptStyle::ConciseOneLine => {
                "Useful for brief summaries and quick code understanding."
            }
        }
    }

    pub fn requires_one_line(self) -> bool {
        self == PromptStyle::ConciseOneLine
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// All six styles, in declaration order.
pub fn list_styles() -> Vec<PromptStyle> {
    PromptStyle::ALL.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceCategory {
    TaskClarity,
    PromptQuality,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GuidancePoint {
    pub key: String,
    pub text: String,
    pub category: GuidanceCategory,
}

impl GuidancePoint {
    /// The `N` in a "no more than N words" instruction, if present.
    pub fn word_limit(&self) -> Option<usize> {
        let lower = self.text.to_ascii_lowercase();
        let rest = &lower[lower.find("no more than ")? + "no more than ".len()..];
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        if !rest[digits.len()..].trim_start().starts_with("words") {
            return None;
        }
        digits.parse().ok()
    }
}

const BUILTIN_GUIDANCE: [(&str, &str, GuidanceCategory); 8] = [
    (
        "main-purpose",
        "Focus on the main purpose or effect of the code. Use no more than 50 words.",
        GuidanceCategory::TaskClarity,
    ),
    (
        "diverse-types",
        "Use diverse prompt types. Test different aspects of source code comprehension.",
        GuidanceCategory::TaskClarity,
    ),
    (
        "standard-format",
        "Standardize prompt formats. Create uniformity to improve evaluation consistency.",
        GuidanceCategory::TaskClarity,
    ),
    (
        "real-world",
        "Reflect real-world scenarios in prompts. Make prompts relevant to practical coding tasks.",
        GuidanceCategory::TaskClarity,
    ),
    (
        "unambiguous",
        "Avoid ambiguous wording. Ensure prompts are precise to reduce misunderstandings.",
        GuidanceCategory::PromptQuality,
    ),
    (
        "consistent-length",
        "Keep prompt length consistent. Maintain fairness and comparability across prompts.",
        GuidanceCategory::PromptQuality,
    ),
    (
        "output-style",
        "Specify expected output style. Guide the model on how to format its response.",
        GuidanceCategory::PromptQuality,
    ),
    (
        "neutral-phrasing",
        "Use neutral phrasing to prevent bias. Avoid leading language that influences answers.",
        GuidanceCategory::PromptQuality,
    ),
];

/// The eight built-in guidance points: task clarity first, then prompt quality.
pub fn builtin_guidance() -> Vec<GuidancePoint> {
    BUILTIN_GUIDANCE
        .iter()
        .map(|(key, text, category)| GuidancePoint {
            key: (*key).to_string(),
            text: (*text).to_string(),
            category: *category,
        })
        .collect()
}

/// Resolve guidance keys against the built-in set, keeping the given order.
pub fn select_guidance<S: AsRef<str>>(keys: &[S]) -> Result<Vec<GuidancePoint>, PromptError> {
    let all = builtin_guidance();
    keys.iter()
        .map(|k| {
            all.iter()
                .find(|g| g.key == k.as_ref())
                .cloned()
                .ok_or_else(|| PromptError::UnknownGuidance(k.as_ref().to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Generator,
    Refiner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub kind: PromptKind,
    pub style: PromptStyle,
    pub guidance: Vec<GuidancePoint>,
    pub messages: Vec<Message>,
    pub content_hash: String,
}

impl PromptBundle {
    fn new(
        kind: PromptKind,
        style: PromptStyle,
        guidance: Vec<GuidancePoint>,
        messages: Vec<Message>,
    ) -> Self {
        let content_hash = hash_messages(&messages);
        Self {
            kind,
            style,
            guidance,
            messages,
            content_hash,
        }
    }

    pub fn system_text(&self) -> Option<&str> {
        self.messages
            .first()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    pub fn user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or_default()
    }
}

fn hash_messages(messages: &[Message]) -> String {
    // Length-prefixed so that no two message lists share a byte stream.
    let mut buf = Vec::new();
    for m in messages {
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
        };
        buf.extend_from_slice(format!("{}:{}:{}\n", role, m.content.len(), m.content).as_bytes());
    }
    sha256_hex(&buf)
}

fn fenced(ex: &CodeExample) -> String {
    format!(
        "```{}\n{}\n```",
        ex.lang.fence_tag(),
        ex.code.trim_end_matches(['\n', '\r'])
    )
}

/// Few-shot exemplars shipped with the crate.
pub fn default_exemplars() -> Vec<CodeExample> {
    include_str!("../resources/fewshot_exemplars.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let raw: crate::corpus::RawExample = serde_json::from_str(l).expect("bundled exemplar");
            let mut ex = CodeExample::new(
                raw.id,
                crate::corpus::Lang::parse(&raw.lang).expect("bundled exemplar lang"),
                raw.code,
                raw.reference,
            );
            ex.tags = raw.tags;
            ex
        })
        .collect()
}

/// Load few-shot exemplars from a file in the corpus line format.
pub fn load_exemplars(path: impl AsRef<Path>) -> Result<Vec<CodeExample>, PromptError> {
    let corpus: Corpus = load_corpus(path)?;
    Ok(corpus.examples)
}

/// Renders generator prompts. Holds the exemplars used by the few-shot style.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    exemplars: Vec<CodeExample>,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        Self::new(default_exemplars())
    }
}

impl PromptBuilder {
    pub fn new(exemplars: Vec<CodeExample>) -> Self {
        Self { exemplars }
    }

    pub fn exemplars(&self) -> &[CodeExample] {
        &self.exemplars
    }

    pub fn system_text(&self, style: PromptStyle, guidance: &[GuidancePoint]) -> String {
        let mut text = style.task_text().to_string();
        if !guidance.is_empty() {
            text.push_str("\n\nGuidance:");
            for g in guidance {
                text.push_str("\n- ");
                text.push_str(&g.text);
            }
        }
        if style == PromptStyle::FewShotTask && !self.exemplars.is_empty() {
            text.push_str("\n\nExamples:");
            for ex in &self.exemplars {
                text.push_str("\n\nCode:\n");
                text.push_str(&fenced(ex));
                text.push_str("\nDescription: ");
                text.push_str(ex.reference.trim());
            }
        }
        text
    }

    pub fn generator(
        &self,
        style: PromptStyle,
        guidance: &[GuidancePoint],
        ex: &CodeExample,
    ) -> PromptBundle {
        let messages = vec![
            Message {
                role: Role::System,
                content: self.system_text(style, guidance),
            },
            Message {
                role: Role::User,
                content: fenced(ex),
            },
        ];
        PromptBundle::new(PromptKind::Generator, style, guidance.to_vec(), messages)
    }
}

/// Generator prompt using the bundled few-shot exemplars.
pub fn build_generator_prompt(
    style: PromptStyle,
    guidance: &[GuidancePoint],
    ex: &CodeExample,
) -> PromptBundle {
    PromptBuilder::default().generator(style, guidance, ex)
}

const REFINER_TASK: &str = "You refine natural language descriptions of C and C++ code. \
Rewrite the draft description so that it is clearer, more concise, and accurate with respect \
to the code. Reply with the improved description only.";

/// Refiner prompt carrying both the code and the draft verbatim.
///
/// `style` and `guidance` are those of the generator; a one-line style keeps
/// its one-line, 50-word limit, and any word limit in the guidance is kept.
pub fn build_refiner_prompt(
    ex: &CodeExample,
    draft: &str,
    style: PromptStyle,
    guidance: &[GuidancePoint],
) -> Result<PromptBundle, PromptError> {
    if draft.trim().is_empty() {
        return Err(PromptError::EmptyDraft);
    }
    let mut system = REFINER_TASK.to_string();
    let mut word_limit = guidance.iter().filter_map(GuidancePoint::word_limit).min();
    if style.requires_one_line() {
        system.push_str(" Keep the description to a single line.");
        word_limit = Some(word_limit.map_or(50, |w| w.min(50)));
    }
    if let Some(limit) = word_limit {
        system.push_str(&format!(" Use no more than {limit} words."));
    }
    let user = format!(
        "Code:\n{}\n\nDraft description:\n{}",
        fenced(ex),
        draft
    );
    let messages = vec![
        Message {
            role: Role::System,
            content: system,
        },
        Message {
            role: Role::User,
            content: user,
        },
    ];
    Ok(PromptBundle::new(
        PromptKind::Refiner,
        style,
        guidance.to_vec(),
        messages,
    ))
}

/// A mechanically checkable guidance failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuidanceViolation {
    EmptyOutput,
    WordCount { count: usize, limit: usize },
    NotOneLine,
}

impl fmt::Display for GuidanceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuidanceViolation::EmptyOutput => f.write_str("empty output"),
            GuidanceViolation::WordCount { count, limit } => {
                write!(f, "word count {count} > {limit}")
            }
            GuidanceViolation::NotOneLine => f.write_str("not one line"),
        }
    }
}

/// Whitespace-separated tokens after trimming.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Check the parts of the guidance a machine can verify: non-empty output,
/// any active word limit, and the one-line rule of the one-line style.
pub fn check_guidance_compliance(
    text: &str,
    guidance: &[GuidancePoint],
    style: PromptStyle,
) -> Vec<GuidanceViolation> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return vec![GuidanceViolation::EmptyOutput];
    }
    let mut out = Vec::new();
    if let Some(limit) = guidance.iter().filter_map(GuidancePoint::word_limit).min() {
        let count = word_count(trimmed);
        if count > limit {
            out.push(GuidanceViolation::WordCount { count, limit });
        }
    }
    if style.requires_one_line() && trimmed.lines().filter(|l| !l.trim().is_empty()).count() > 1 {
        out.push(GuidanceViolation::NotOneLine);
    }
    out
}
