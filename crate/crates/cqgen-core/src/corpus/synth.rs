//! Synthetic contrastive datasets.
//!
//! Every topic pair draws its keywords from one finite corpus-wide lexicon,
//! so any word a held-out pair uses has been seen in training under other
//! topics: models generalize over familiar words combined in new ways
//! rather than memorizing pair-private vocabulary.
//!
//! A pair consists of a positive topic, a sibling negative topic, and a
//! *shared aspect*: the slice of both keyword pools controlled by the
//! overlap fraction. Documents interleave, in random order, an anchor
//! sentence about their own topic (containing every oracle-question token),
//! a same-shaped sentence about the shared aspect, and filler sentences.
//! Roughly three documents in ten are "fringe": they cover only the shared
//! aspect (plus the question's trailing keyword), the way real retrieved
//! sets contain documents about the query's periphery.
//!
//! This construction makes single-document question prediction inherently
//! ambiguous: a document alone cannot tell its own topic from the shared
//! aspect, and the fringe documents tilt a uniform multi-source average
//! toward the shared aspect — which the negative set also exhibits. Telling
//! the two apart requires exactly the contrast the coordinator provides.

use std::collections::HashSet;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;

use crate::corpus::data::{ContrastiveInstance, Document};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Number of topic pairs; each pair yields one instance.
    pub pairs: usize,
    /// Documents per set (positive and negative alike).
    pub docs_per_set: usize,
    pub sentences_per_doc: usize,
    /// Keyword-pool size per topic.
    pub keywords_per_topic: usize,
    /// Fraction of each pair's pools that is shared, in [0, 1].
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            pairs: 40,
            docs_per_set: 10,
            sentences_per_doc: 3,
            keywords_per_topic: 8,
            overlap: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::InvalidSyntheticSpec(format!(
                "overlap fraction {} outside [0, 1]",
                self.overlap
            )));
        }
        if self.pairs == 0 || self.docs_per_set == 0 || self.sentences_per_doc == 0 {
            return Err(Error::InvalidSyntheticSpec(
                "pairs, docs_per_set, and sentences_per_doc must be at least 1".into(),
            ));
        }
        if self.keywords_per_topic < 4 {
            return Err(Error::InvalidSyntheticSpec(
                "keywords_per_topic must be at least 4".into(),
            ));
        }
        Ok(())
    }
}

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Corpus-wide lexicon size; topics are combinations of these words.
const LEXICON_SIZE: usize = 200;

/// Non-topical vocabulary: grammatical glue plus corpus-wide background
/// nouns that appear in every topic's filler sentences. None of these carry
/// topical signal, so sets may share them even at zero overlap.
pub const TEMPLATE_WORDS: [&str; 18] = [
    "the", "a", "of", "is", "with", "about", "general", "common", "entry", "resource",
    "overview", "detail", "summary", "record", "item", "note", "report", "list",
];

const GENERIC_WORDS: [&str; 12] = [
    "general", "common", "entry", "resource", "overview", "detail", "summary", "record",
    "item", "note", "report", "list",
];

/// Chance that a filler keyword slot is filled from the background
/// vocabulary instead of the topic pool.
const GENERIC_SLOT_PROB: f64 = 0.3;

fn build_lexicon(rng: &mut impl Rng) -> Vec<String> {
    let mut used = HashSet::new();
    let mut words = Vec::with_capacity(LEXICON_SIZE);
    while words.len() < LEXICON_SIZE {
        let mut word = String::new();
        for _ in 0..3 {
            word.push_str(ONSETS.choose(rng).unwrap());
            word.push_str(VOWELS.choose(rng).unwrap());
        }
        if used.insert(word.clone()) {
            words.push(word);
        }
    }
    words
}

/// A filler keyword: usually from the topic pool, sometimes from the
/// corpus-wide background vocabulary.
fn keyword_slot(pool: &[String], rng: &mut impl Rng) -> String {
    if rng.random::<f64>() < GENERIC_SLOT_PROB {
        GENERIC_WORDS.choose(rng).unwrap().to_string()
    } else {
        pool.choose(rng).unwrap().clone()
    }
}

/// One sentence shape shared by topic anchors and shared-aspect mentions,
/// so nothing but document-set membership distinguishes them.
fn anchor_sentence(
    w1: &str,
    w2: &str,
    w3: &str,
    filler: &str,
    rng: &mut impl Rng,
) -> String {
    match rng.random_range(0..4u8) {
        0 => format!("the {w1} of the {w2} with {w3} is {filler}"),
        1 => format!("a {w2} with {w3} is about the {w1} of {filler}"),
        2 => format!("the {w3} with the {w1} of {filler} is a {w2}"),
        _ => format!("the {filler} {w1} is of the {w2} with {w3}"),
    }
}

struct Topic {
    pool: Vec<String>,
    shared: Vec<String>,
    /// Fringe documents draw from here: the shared aspect when the pair
    /// overlaps, otherwise the topic's own pool.
    fringe_pool: Vec<String>,
    anchor_a: String,
    anchor_b: String,
    tail: String,
    question: String,
}

impl Topic {
    fn new(exclusive: Vec<String>, shared: Vec<String>, rng: &mut impl Rng) -> Self {
        let mut pool = exclusive.clone();
        pool.extend(shared.iter().cloned());
        let (anchor_a, anchor_b) = if exclusive.len() >= 2 {
            (exclusive[0].clone(), exclusive[1].clone())
        } else {
            (pool[0].clone(), pool[1].clone())
        };
        // The trailing slot is any pool keyword, so a question ends with a
        // shared keyword roughly `overlap` of the time.
        let tail = pool.choose(rng).unwrap().clone();
        let question = format!("{anchor_a} of the {anchor_b} with {tail}");
        let fringe_pool = if shared.is_empty() {
            pool.clone()
        } else {
            shared.clone()
        };
        Self {
            pool,
            shared,
            fringe_pool,
            anchor_a,
            anchor_b,
            tail,
            question,
        }
    }

    fn filler_sentence(&self, pool: &[String], rng: &mut impl Rng) -> String {
        let a = keyword_slot(pool, rng);
        let b = keyword_slot(pool, rng);
        let c = keyword_slot(pool, rng);
        match rng.random_range(0..3u8) {
            0 => format!("the {a} is {b} of the {c}"),
            1 => format!("a {a} with the {b} is {c}"),
            _ => format!("the {a} {b} is about the {c}"),
        }
    }

    /// A sentence about the shared aspect, indistinguishable in shape from
    /// a topic anchor. Without overlap it covers a document-private side
    /// pairing from the topic's own pool instead.
    fn aspect_sentence(&self, rng: &mut impl Rng) -> String {
        let filler = keyword_slot(&self.pool, rng);
        if self.shared.len() >= 2 {
            let third = keyword_slot(&self.pool, rng);
            anchor_sentence(&self.shared[0], &self.shared[1], &third, &filler, rng)
        } else {
            let w1 = self.pool.choose(rng).unwrap().clone();
            let w2 = self.pool.choose(rng).unwrap().clone();
            let w3 = self.pool.choose(rng).unwrap().clone();
            anchor_sentence(&w1, &w2, &w3, &filler, rng)
        }
    }

    /// A core document: its own anchor sentence, a shared-aspect sentence,
    /// and fillers, in random order.
    fn core_document(&self, id: String, sentences: usize, rng: &mut impl Rng) -> Document {
        let filler = keyword_slot(&self.pool, rng);
        let anchor = anchor_sentence(
            &self.anchor_a,
            &self.anchor_b,
            &self.tail,
            &filler,
            rng,
        );
        let mut parts = vec![anchor];
        if sentences >= 2 {
            parts.push(self.aspect_sentence(rng));
        }
        for _ in 2..sentences {
            parts.push(self.filler_sentence(&self.pool, rng));
        }
        parts.shuffle(rng);
        Document::new(id, parts.join(". "))
    }

    /// A peripheral document: mentions the question's trailing keyword and
    /// the shared aspect, but never the topic anchors.
    fn fringe_document(&self, id: String, sentences: usize, rng: &mut impl Rng) -> Document {
        let mut parts = vec![format!(
            "the {} is {} with {}",
            self.tail,
            keyword_slot(&self.fringe_pool, rng),
            keyword_slot(&self.fringe_pool, rng)
        )];
        if sentences >= 2 {
            parts.push(self.aspect_sentence(rng));
        }
        for _ in 2..sentences {
            parts.push(self.filler_sentence(&self.fringe_pool, rng));
        }
        parts.shuffle(rng);
        Document::new(id, parts.join(". "))
    }

    fn document(
        &self,
        id: String,
        index: usize,
        core_count: usize,
        sentences: usize,
        rng: &mut impl Rng,
    ) -> Document {
        if index < core_count {
            self.core_document(id, sentences, rng)
        } else {
            self.fringe_document(id, sentences, rng)
        }
    }
}

/// Documents per set carrying the anchor sentence; the remainder (roughly
/// three in ten) are fringe documents.
fn core_count(docs_per_set: usize) -> usize {
    docs_per_set - docs_per_set * 3 / 10
}

/// Generates a contrastive dataset. Deterministic given the spec's seed:
/// the same spec yields a byte-identical dataset.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<ContrastiveInstance>> {
    spec.validate()?;
    let mut rng = substream(spec.seed, "data");
    let lexicon = build_lexicon(&mut rng);
    let mut instances = Vec::with_capacity(spec.pairs);

    let shared_count =
        ((spec.overlap * spec.keywords_per_topic as f64).round() as usize)
            .min(spec.keywords_per_topic);
    let exclusive_count = spec.keywords_per_topic - shared_count;

    for pair in 0..spec.pairs {
        // Distinct words within the pair; reused freely across pairs.
        let draw = index::sample(&mut rng, LEXICON_SIZE, shared_count + 2 * exclusive_count);
        let words: Vec<String> = draw.iter().map(|i| lexicon[i].clone()).collect();
        let (shared, rest) = words.split_at(shared_count);
        let (pos_only, neg_only) = rest.split_at(exclusive_count);

        let pos_topic = Topic::new(pos_only.to_vec(), shared.to_vec(), &mut rng);
        let neg_topic = Topic::new(neg_only.to_vec(), shared.to_vec(), &mut rng);

        let instance_id = format!("pair-{pair:04}");
        let cores = core_count(spec.docs_per_set);
        let positive_docs = (0..spec.docs_per_set)
            .map(|j| {
                pos_topic.document(
                    format!("{instance_id}-pos-{j:02}"),
                    j,
                    cores,
                    spec.sentences_per_doc,
                    &mut rng,
                )
            })
            .collect();
        let negative_docs = (0..spec.docs_per_set)
            .map(|j| {
                neg_topic.document(
                    format!("{instance_id}-neg-{j:02}"),
                    j,
                    cores,
                    spec.sentences_per_doc,
                    &mut rng,
                )
            })
            .collect();

        instances.push(ContrastiveInstance {
            id: instance_id,
            positive_docs,
            negative_docs,
            oracle_pos_question: Some(pos_topic.question.clone()),
            oracle_neg_question: Some(neg_topic.question.clone()),
        });
    }
    Ok(instances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::split_words;
    use std::collections::HashSet;

    #[test]
    fn zero_overlap_shares_no_topical_keywords() {
        let spec = SyntheticSpec {
            pairs: 5,
            overlap: 0.0,
            ..SyntheticSpec::default()
        };
        let function_words: HashSet<&str> = TEMPLATE_WORDS.into();
        for inst in generate_synthetic(&spec).unwrap() {
            let pos_words: HashSet<String> = inst
                .positive_docs
                .iter()
                .flat_map(|d| split_words(&d.text))
                .filter(|w| !function_words.contains(w.as_str()))
                .collect();
            let neg_words: HashSet<String> = inst
                .negative_docs
                .iter()
                .flat_map(|d| split_words(&d.text))
                .filter(|w| !function_words.contains(w.as_str()))
                .collect();
            assert!(pos_words.is_disjoint(&neg_words));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec {
            pairs: 4,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let json_a = serde_json::to_string(&a).unwrap();
        let json_b = serde_json::to_string(&b).unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn counts_and_unique_ids() {
        let spec = SyntheticSpec {
            pairs: 40,
            docs_per_set: 10,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.len(), 40);
        let mut doc_ids = HashSet::new();
        let mut total = 0usize;
        for inst in &data {
            for doc in inst.docs() {
                assert!(doc_ids.insert(doc.id.clone()));
                total += 1;
            }
        }
        assert_eq!(total, 800);
    }

    #[test]
    fn oracle_question_is_answerable_from_positive_docs() {
        let spec = SyntheticSpec {
            pairs: 6,
            ..SyntheticSpec::default()
        };
        for inst in generate_synthetic(&spec).unwrap() {
            let question = inst.oracle_pos_question.as_ref().unwrap();
            let pos_words: HashSet<String> = inst
                .positive_docs
                .iter()
                .flat_map(|d| split_words(&d.text))
                .collect();
            for word in split_words(question) {
                assert!(pos_words.contains(&word), "missing '{word}'");
            }
        }
    }

    #[test]
    fn shared_aspect_appears_in_both_sets() {
        let spec = SyntheticSpec {
            pairs: 3,
            overlap: 0.3,
            ..SyntheticSpec::default()
        };
        for inst in generate_synthetic(&spec).unwrap() {
            let pos_words: HashSet<String> = inst
                .positive_docs
                .iter()
                .flat_map(|d| split_words(&d.text))
                .collect();
            let neg_words: HashSet<String> = inst
                .negative_docs
                .iter()
                .flat_map(|d| split_words(&d.text))
                .collect();
            let function_words: HashSet<&str> = TEMPLATE_WORDS.into();
            let overlap: Vec<&String> = pos_words
                .intersection(&neg_words)
                .filter(|w| !function_words.contains(w.as_str()))
                .collect();
            assert!(!overlap.is_empty(), "expected a shared aspect");
        }
    }

    #[test]
    fn overlap_out_of_range_is_an_error() {
        let spec = SyntheticSpec {
            overlap: 1.5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            generate_synthetic(&spec),
            Err(Error::InvalidSyntheticSpec(_))
        ));
    }
}
