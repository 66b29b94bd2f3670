//! Synthetic multi-task pools and many-shot sequence packing.

mod io;
mod pack;
mod synth;
mod vocab;

pub use io::{load_packed_corpus, load_task_pool, load_vocabulary, save_packed_corpus,
             save_task_pool, save_vocabulary};
pub use pack::{balance_corpus, kshot_histogram, pack_query, pack_sequence};
pub use synth::{generate_synthetic_tasks, inject_label_noise, TaskFamily, TaskSet};
pub use vocab::{Vocabulary, BOS, EOD, SEP_X, SEP_Y};

use serde::{Deserialize, Serialize};

/// One (x, y) demonstration pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task_id: String,
    pub input_text: String,
    pub label_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A task's instruction plus its ordered examples for one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPool {
    pub task_id: String,
    pub instruction_text: String,
    pub split: Split,
    pub examples: Vec<TaskExample>,
}

impl TaskPool {
    /// Checks the structural invariants: non-empty instruction, non-empty
    /// example texts, and at least two examples for a train pool.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.instruction_text.is_empty() {
            return Err(CorpusError::EmptyInstruction);
        }
        if self.split == Split::Train && self.examples.len() < 2 {
            return Err(CorpusError::PoolTooSmall(self.examples.len()));
        }
        for ex in &self.examples {
            if ex.input_text.is_empty() || ex.label_text.is_empty() {
                return Err(CorpusError::EmptyExampleText);
            }
        }
        Ok(())
    }

    /// Longest label in characters; the decode length cap during eval.
    pub fn max_label_chars(&self) -> usize {
        self.examples
            .iter()
            .map(|e| e.label_text.chars().count())
            .max()
            .unwrap_or(1)
    }
}

/// Half-open token index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, idx: usize) -> bool {
        idx >= self.start && idx < self.end
    }
}

/// Token ranges of one demonstration inside a packed sequence. The x and
/// y spans cover only the text tokens; the SEP_X/SEP_Y/EOD delimiters sit
/// at x.start-1, x.end, and y.end respectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoSpan {
    pub x: Span,
    pub y: Span,
}

impl DemoSpan {
    /// Full demonstration window including its three delimiters.
    pub fn window(&self) -> Span {
        Span::new(self.x.start - 1, self.y.end + 1)
    }
}

/// One many-shot training sequence: instruction tokens followed by K
/// delimited demonstrations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub task_id: String,
    pub token_ids: Vec<u32>,
    pub instruction_span: Span,
    pub demo_spans: Vec<DemoSpan>,
}

impl PackedSequence {
    /// Number of demonstrations K.
    pub fn k(&self) -> usize {
        self.demo_spans.len()
    }

    /// Checks span ordering, contiguity of demonstration windows, and
    /// non-empty labels.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.demo_spans.is_empty() {
            return Err(CorpusError::NoDemonstrations);
        }
        if self.instruction_span.start != 0 || self.instruction_span.is_empty() {
            return Err(CorpusError::BadSpans("instruction span must start at 0"));
        }
        let mut cursor = self.instruction_span.end;
        for d in &self.demo_spans {
            // layout per demo: SEP_X, x.., SEP_Y, y.., EOD
            if d.x.start != cursor + 1 || d.x.is_empty() {
                return Err(CorpusError::BadSpans("x span out of place"));
            }
            if d.y.start != d.x.end + 1 || d.y.is_empty() {
                return Err(CorpusError::BadSpans("y span out of place"));
            }
            cursor = d.y.end + 1;
        }
        if cursor != self.token_ids.len() {
            return Err(CorpusError::BadSpans("spans do not cover the sequence"));
        }
        Ok(())
    }

    /// Rebuilds the standalone sequence "instruction + demonstration k"
    /// (k is 1-based) by copying the relevant token ranges. Under the
    /// parallel-context mask this is exactly what demonstration k sees.
    pub fn standalone(&self, k: usize) -> PackedSequence {
        assert!(k >= 1 && k <= self.k(), "demo index out of range");
        let d = self.demo_spans[k - 1];
        let win = d.window();
        let mut tokens = self.token_ids[..self.instruction_span.end].to_vec();
        let offset = win.start - self.instruction_span.end;
        tokens.extend_from_slice(&self.token_ids[win.start..win.end]);
        PackedSequence {
            task_id: self.task_id.clone(),
            token_ids: tokens,
            instruction_span: self.instruction_span,
            demo_spans: vec![DemoSpan {
                x: Span::new(d.x.start - offset, d.x.end - offset),
                y: Span::new(d.y.start - offset, d.y.end - offset),
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusError {
    UnknownFamily(String),
    CountTooSmall(usize),
    UnknownChar(char),
    EmptyInstruction,
    EmptyExampleText,
    PoolTooSmall(usize),
    EmptyPool,
    NoDemonstrations,
    BadSpans(&'static str),
    BudgetTooSmall { budget: usize, needed: usize },
    ParseLine { line: usize, message: String },
    MixedTaskIds { line: usize },
    Io(String),
}

impl std::fmt::Display for CorpusError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::UnknownFamily(name) => write!(f, "unknown task family: {name}"),
            Self::CountTooSmall(n) => write!(f, "example count must be >= 2, got {n}"),
            Self::UnknownChar(c) => write!(f, "character {c:?} is not in the vocabulary"),
            Self::EmptyInstruction => write!(f, "instruction text is empty"),
            Self::EmptyExampleText => write!(f, "example has empty input or label"),
            Self::PoolTooSmall(n) => write!(f, "train pool needs >= 2 examples, got {n}"),
            Self::EmptyPool => write!(f, "empty pool"),
            Self::NoDemonstrations => write!(f, "packed sequence has no demonstrations"),
            Self::BadSpans(why) => write!(f, "invalid spans: {why}"),
            Self::BudgetTooSmall { budget, needed } => {
                write!(f, "budget {budget} too small: first demonstration needs {needed}")
            }
            Self::ParseLine { line, message } => write!(f, "line {line}: {message}"),
            Self::MixedTaskIds { line } => {
                write!(f, "line {line}: task_id differs from the first record")
            }
            Self::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for CorpusError {}

impl From<std::io::Error> for CorpusError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
