//! Pluggable document–question scorer.
//!
//! The reward signal and out-sample ranking go through the
//! [`DocQuestionScorer`] trait. The default implementation squashes a BM25
//! lexical score through a logistic, giving scores strictly inside (0, 1);
//! a constant-score mock exists for interface tests and as a CLI option.

use std::collections::HashMap;

use crate::corpus::{ContrastiveInstance, Document, TokenId, FIRST_REGULAR};

/// Score of a (document, question) pair, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankerScore {
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Logistic squash `sigma(a * bm25 + b)` mapping typical toy BM25 scores
/// into a well-spread band of (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticSquash {
    pub a: f64,
    pub b: f64,
}

impl Default for LogisticSquash {
    fn default() -> Self {
        Self { a: 0.5, b: -2.0 }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Document-frequency statistics over an evaluation document pool.
/// Special token ids never count as terms.
#[derive(Debug, Clone, Default)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub avg_len: f64,
    df: HashMap<TokenId, usize>,
}

impl CorpusStats {
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Self {
        let mut df: HashMap<TokenId, usize> = HashMap::new();
        let mut doc_count = 0usize;
        let mut total_len = 0usize;
        for doc in docs {
            doc_count += 1;
            total_len += effective_len(&doc.tokens);
            let mut seen: Vec<TokenId> = doc
                .tokens
                .iter()
                .copied()
                .filter(|t| *t >= FIRST_REGULAR)
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let avg_len = if doc_count == 0 {
            0.0
        } else {
            total_len as f64 / doc_count as f64
        };
        Self {
            doc_count,
            avg_len,
            df,
        }
    }

    pub fn idf(&self, term: TokenId) -> f64 {
        let df = self.df.get(&term).copied().unwrap_or(0) as f64;
        let d = self.doc_count as f64;
        (1.0 + (d - df + 0.5) / (df + 0.5)).ln()
    }
}

fn effective_len(tokens: &[TokenId]) -> usize {
    tokens.iter().filter(|t| **t >= FIRST_REGULAR).count()
}

pub trait DocQuestionScorer: Send + Sync {
    fn score(&self, doc: &Document, question: &[TokenId]) -> RankerScore;
}

/// BM25 of the question against the document, squashed into (0, 1).
/// Monotone increasing in the underlying BM25 score; an empty question
/// scores `sigma(b)`.
#[derive(Debug, Clone)]
pub struct Bm25Scorer {
    pub stats: CorpusStats,
    pub bm25: Bm25Params,
    pub squash: LogisticSquash,
}

impl Bm25Scorer {
    pub fn new(stats: CorpusStats) -> Self {
        Self {
            stats,
            bm25: Bm25Params::default(),
            squash: LogisticSquash::default(),
        }
    }

    pub fn bm25(&self, doc: &Document, question: &[TokenId]) -> f64 {
        let len = effective_len(&doc.tokens) as f64;
        let avg = if self.stats.avg_len > 0.0 {
            self.stats.avg_len
        } else {
            1.0
        };
        let norm = self.bm25.k1 * (1.0 - self.bm25.b + self.bm25.b * len / avg);
        let mut score = 0.0;
        for &term in question.iter().filter(|t| **t >= FIRST_REGULAR) {
            let tf = doc.tokens.iter().filter(|t| **t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            score += self.stats.idf(term) * tf * (self.bm25.k1 + 1.0) / (tf + norm);
        }
        score
    }
}

impl DocQuestionScorer for Bm25Scorer {
    fn score(&self, doc: &Document, question: &[TokenId]) -> RankerScore {
        RankerScore {
            value: sigmoid(self.squash.a * self.bm25(doc, question) + self.squash.b),
        }
    }
}

/// Scores every pair identically; downstream rankings then reduce to the
/// doc-id tie-break, which the interface tests rely on.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer {
    pub value: f64,
}

impl Default for ConstantScorer {
    fn default() -> Self {
        Self { value: 0.5 }
    }
}

impl DocQuestionScorer for ConstantScorer {
    fn score(&self, _doc: &Document, _question: &[TokenId]) -> RankerScore {
        RankerScore { value: self.value }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
    pub positive: bool,
}

pub type RankedList = Vec<RankedEntry>;

/// Scores the question against every document of the instance and sorts
/// descending; ties order by ascending document id.
pub fn rank_instance(
    question: &[TokenId],
    inst: &ContrastiveInstance,
    scorer: &dyn DocQuestionScorer,
) -> RankedList {
    let mut entries: RankedList = inst
        .positive_docs
        .iter()
        .map(|d| (d, true))
        .chain(inst.negative_docs.iter().map(|d| (d, false)))
        .map(|(doc, positive)| RankedEntry {
            doc_id: doc.id.clone(),
            score: scorer.score(doc, question).value,
            positive,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    entries
}
