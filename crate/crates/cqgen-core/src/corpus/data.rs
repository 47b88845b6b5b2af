//! Dataset types and JSONL ingestion.
//!
//! One JSON object per line:
//! `{"id": str, "positive_docs": [{"id": str, "text": str}, ...],
//!   "negative_docs": [...], "oracle_pos_question": str|null,
//!   "oracle_neg_question": str|null}`

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{split_words, TokenId, Vocabulary};
use crate::error::{Error, Result};

/// A single document. `tokens` is filled by [`ContrastiveInstance::attach_tokens`]
/// once a vocabulary exists; it is not part of the wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(skip)]
    pub tokens: Vec<TokenId>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            tokens: Vec::new(),
        }
    }
}

/// One training/evaluation unit: a positive document set, a negative set,
/// and optional oracle questions for each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveInstance {
    pub id: String,
    pub positive_docs: Vec<Document>,
    pub negative_docs: Vec<Document>,
    pub oracle_pos_question: Option<String>,
    pub oracle_neg_question: Option<String>,
}

impl ContrastiveInstance {
    /// Tokenizes every document in place with the given vocabulary.
    pub fn attach_tokens(&mut self, vocab: &Vocabulary) -> Result<()> {
        for doc in self
            .positive_docs
            .iter_mut()
            .chain(self.negative_docs.iter_mut())
        {
            doc.tokens = vocab.tokenize(&doc.text);
            if doc.tokens.is_empty() {
                return Err(Error::EmptyDocument(doc.id.clone()));
            }
        }
        Ok(())
    }

    pub fn docs(&self) -> impl Iterator<Item = &Document> {
        self.positive_docs.iter().chain(self.negative_docs.iter())
    }

    fn validate(&self) -> Result<()> {
        if self.positive_docs.is_empty() {
            return Err(Error::EmptyPositiveSet(self.id.clone()));
        }
        let pos_ids: HashSet<&str> =
            self.positive_docs.iter().map(|d| d.id.as_str()).collect();
        for doc in &self.negative_docs {
            if pos_ids.contains(doc.id.as_str()) {
                return Err(Error::OverlappingDocument {
                    instance: self.id.clone(),
                    doc: doc.id.clone(),
                });
            }
        }
        for doc in self.docs() {
            if split_words(&doc.text).is_empty() {
                return Err(Error::EmptyDocument(doc.id.clone()));
            }
        }
        Ok(())
    }
}

/// Reads a JSONL dataset, validating every instance invariant: positive set
/// nonempty, no document id shared between sets, unique instance and
/// document ids, nonempty document text.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<ContrastiveInstance>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);

    let mut instances = Vec::new();
    let mut instance_ids = HashSet::new();
    let mut doc_ids = HashSet::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let instance: ContrastiveInstance =
            serde_json::from_str(&line).map_err(|e| Error::Dataset {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        instance.validate()?;
        if !instance_ids.insert(instance.id.clone()) {
            return Err(Error::DuplicateInstanceId(instance.id));
        }
        for doc in instance.docs() {
            if !doc_ids.insert(doc.id.clone()) {
                return Err(Error::DuplicateDocumentId(doc.id.clone()));
            }
        }
        instances.push(instance);
    }
    Ok(instances)
}

/// Writes instances as JSONL; `load_dataset(write_dataset(x)) == x`.
pub fn write_dataset(
    path: impl AsRef<Path>,
    instances: &[ContrastiveInstance],
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for instance in instances {
        serde_json::to_writer(&mut file, instance)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}
