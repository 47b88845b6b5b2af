//! Inverted index with BM25, the ranking-metric suite, the two evaluation
//! protocols (out-sample and search-engine-augmented), and the retrieval /
//! generation baselines.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coordinator::{decode_with_policy, DecodeOptions, DecodeTrace};
use crate::corpus::{ContrastiveInstance, TokenId, Vocabulary, FIRST_REGULAR};
use crate::error::{Error, Result};
use crate::generator::GeneratorParams;
use crate::ranker::{rank_instance, Bm25Params, DocQuestionScorer};
use crate::rng::substream;
use crate::scalar::Real;

// ---------------------------------------------------------------------------
// Inverted index + BM25 search
// ---------------------------------------------------------------------------

/// Term -> postings index. Documents are canonicalized by sorting on id at
/// build time, so scores and orderings are invariant to insertion order.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_lengths: Vec<usize>,
    postings: HashMap<TokenId, Vec<(u32, u32)>>,
    avg_len: f64,
}

impl InvertedIndex {
    pub fn build(docs: &[(String, Vec<TokenId>)]) -> Result<Self> {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.sort_by(|&a, &b| docs[a].0.cmp(&docs[b].0));
        for pair in order.windows(2) {
            if docs[pair[0]].0 == docs[pair[1]].0 {
                return Err(Error::DuplicateDocumentId(docs[pair[0]].0.clone()));
            }
        }

        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut doc_lengths = Vec::with_capacity(docs.len());
        let mut postings: HashMap<TokenId, Vec<(u32, u32)>> = HashMap::new();
        for (idx, &orig) in order.iter().enumerate() {
            let (id, tokens) = &docs[orig];
            doc_ids.push(id.clone());
            let mut counts: HashMap<TokenId, u32> = HashMap::new();
            let mut len = 0usize;
            for &t in tokens.iter().filter(|t| **t >= FIRST_REGULAR) {
                *counts.entry(t).or_insert(0) += 1;
                len += 1;
            }
            doc_lengths.push(len);
            for (t, tf) in counts {
                postings.entry(t).or_default().push((idx as u32, tf));
            }
        }
        for plist in postings.values_mut() {
            plist.sort_unstable_by_key(|(idx, _)| *idx);
        }
        let avg_len = if doc_ids.is_empty() {
            0.0
        } else {
            doc_lengths.iter().sum::<usize>() as f64 / doc_ids.len() as f64
        };
        Ok(Self {
            doc_ids,
            doc_lengths,
            postings,
            avg_len,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn document_frequency(&self, term: TokenId) -> usize {
        self.postings.get(&term).map_or(0, |p| p.len())
    }
}

/// Top-k documents by BM25 with `idf = ln(1 + (D - df + 0.5)/(df + 0.5))`.
/// Only documents with positive score are returned; ties break by ascending
/// document id.
pub fn bm25_search(
    index: &InvertedIndex,
    query: &[TokenId],
    k: usize,
    params: &Bm25Params,
) -> Result<Vec<(String, f64)>> {
    if index.doc_count() == 0 {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("search cutoff k must be at least 1".into()));
    }
    let d = index.doc_count() as f64;
    let mut scores: HashMap<u32, f64> = HashMap::new();
    for &term in query.iter().filter(|t| **t >= FIRST_REGULAR) {
        let Some(plist) = index.postings.get(&term) else {
            continue;
        };
        let df = plist.len() as f64;
        let idf = (1.0 + (d - df + 0.5) / (df + 0.5)).ln();
        for &(doc, tf) in plist {
            let len = index.doc_lengths[doc as usize] as f64;
            let avg = if index.avg_len > 0.0 { index.avg_len } else { 1.0 };
            let tf = tf as f64;
            let norm = params.k1 * (1.0 - params.b + params.b * len / avg);
            *scores.entry(doc).or_insert(0.0) += idf * tf * (params.k1 + 1.0) / (tf + norm);
        }
    }
    let mut hits: Vec<(u32, f64)> = scores.into_iter().filter(|(_, s)| *s > 0.0).collect();
    hits.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.doc_ids[a.0 as usize].cmp(&index.doc_ids[b.0 as usize]))
    });
    hits.truncate(k);
    Ok(hits
        .into_iter()
        .map(|(doc, s)| (index.doc_ids[doc as usize].clone(), s))
        .collect())
}

// ---------------------------------------------------------------------------
// Ranking metrics
// ---------------------------------------------------------------------------

/// Binary-relevance ranking metrics, all in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub rprec: f64,
    pub mrr: f64,
    pub mrr_at_10: f64,
    pub ndcg: f64,
    pub precision_at_k: f64,
}

impl MetricReport {
    pub fn zeros() -> Self {
        Self {
            map: 0.0,
            rprec: 0.0,
            mrr: 0.0,
            mrr_at_10: 0.0,
            ndcg: 0.0,
            precision_at_k: 0.0,
        }
    }

    pub fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("map", self.map),
            ("rprec", self.rprec),
            ("mrr", self.mrr),
            ("mrr_at_10", self.mrr_at_10),
            ("ndcg", self.ndcg),
            ("precision_at_k", self.precision_at_k),
        ]
    }

    pub fn mean(reports: &[MetricReport]) -> Self {
        if reports.is_empty() {
            return Self::zeros();
        }
        let n = reports.len() as f64;
        Self {
            map: reports.iter().map(|r| r.map).sum::<f64>() / n,
            rprec: reports.iter().map(|r| r.rprec).sum::<f64>() / n,
            mrr: reports.iter().map(|r| r.mrr).sum::<f64>() / n,
            mrr_at_10: reports.iter().map(|r| r.mrr_at_10).sum::<f64>() / n,
            ndcg: reports.iter().map(|r| r.ndcg).sum::<f64>() / n,
            precision_at_k: reports.iter().map(|r| r.precision_at_k).sum::<f64>() / n,
        }
    }
}

/// Computes mAP, RPrec, MRR, MRR@10, nDCG, and P@K from an ordered relevance
/// labeling. `num_relevant` is the total number of relevant documents, which
/// may exceed the labels present when relevant documents went unretrieved;
/// those count as misses in the mAP and nDCG normalizations.
pub fn compute_retrieval_metrics(
    ranked_labels: &[bool],
    num_relevant: usize,
    precision_k: usize,
) -> Result<MetricReport> {
    if num_relevant == 0 {
        return Err(Error::NoRelevantDocuments);
    }
    let found = ranked_labels.iter().filter(|l| **l).count();
    if found > num_relevant {
        return Err(Error::TooManyRelevant {
            expected: num_relevant,
            got: found,
        });
    }

    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut first_rel: Option<usize> = None;
    let mut dcg = 0.0;
    for (rank0, &label) in ranked_labels.iter().enumerate() {
        if label {
            hits += 1;
            let rank = rank0 + 1;
            ap += hits as f64 / rank as f64;
            first_rel.get_or_insert(rank);
            dcg += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    let map = ap / num_relevant as f64;

    let top_r = ranked_labels.iter().take(num_relevant).filter(|l| **l).count();
    let rprec = top_r as f64 / num_relevant as f64;

    let mrr = first_rel.map_or(0.0, |r| 1.0 / r as f64);
    let mrr_at_10 = first_rel.filter(|r| *r <= 10).map_or(0.0, |r| 1.0 / r as f64);

    let idcg: f64 = (1..=num_relevant).map(|r| 1.0 / ((r + 1) as f64).log2()).sum();
    let ndcg = dcg / idcg;

    let in_k = ranked_labels.iter().take(precision_k).filter(|l| **l).count();
    let precision_at_k = in_k as f64 / precision_k as f64;

    Ok(MetricReport {
        map,
        rprec,
        mrr,
        mrr_at_10,
        ndcg,
        precision_at_k,
    })
}

/// Out-sample protocol: rank the instance's own P+N documents by the
/// question and score with the positives as relevant.
pub fn out_sample_eval(
    question: &[TokenId],
    inst: &ContrastiveInstance,
    scorer: &dyn DocQuestionScorer,
) -> Result<MetricReport> {
    let ranked = rank_instance(question, inst, scorer);
    let labels: Vec<bool> = ranked.iter().map(|e| e.positive).collect();
    compute_retrieval_metrics(&labels, inst.positive_docs.len(), 10)
}

/// Search-engine-augmented protocol: retrieve `k` documents from the full
/// corpus by BM25 and score with the instance's positive set as relevant.
/// Unretrieved positives count as misses.
pub fn augmented_eval(
    question: &[TokenId],
    inst: &ContrastiveInstance,
    index: &InvertedIndex,
    k: usize,
    params: &Bm25Params,
) -> Result<MetricReport> {
    let hits = bm25_search(index, question, k, params)?;
    let positive_ids: HashSet<&str> =
        inst.positive_docs.iter().map(|d| d.id.as_str()).collect();
    let labels: Vec<bool> = hits
        .iter()
        .map(|(id, _)| positive_ids.contains(id.as_str()))
        .collect();
    compute_retrieval_metrics(&labels, inst.positive_docs.len(), 10)
}

// ---------------------------------------------------------------------------
// Question corpus + retrieval baselines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionEntry {
    pub id: String,
    pub text: String,
    #[serde(skip)]
    pub tokens: Vec<TokenId>,
}

/// A collection of candidate questions with its own inverted index, so
/// documents can retrieve questions.
#[derive(Debug, Clone)]
pub struct QuestionCorpus {
    pub entries: Vec<QuestionEntry>,
    index: InvertedIndex,
    by_id: HashMap<String, usize>,
}

impl QuestionCorpus {
    pub fn from_entries(mut entries: Vec<QuestionEntry>, vocab: &Vocabulary) -> Result<Self> {
        for e in entries.iter_mut() {
            e.tokens = vocab.tokenize(&e.text);
        }
        let docs: Vec<(String, Vec<TokenId>)> = entries
            .iter()
            .map(|e| (e.id.clone(), e.tokens.clone()))
            .collect();
        let index = InvertedIndex::build(&docs)?;
        let by_id = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        Ok(Self {
            entries,
            index,
            by_id,
        })
    }

    /// Loads a JSONL file of `{"id", "text"}` lines.
    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: QuestionEntry =
                serde_json::from_str(&line).map_err(|e| Error::Dataset {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: e.to_string(),
                })?;
            entries.push(entry);
        }
        Self::from_entries(entries, vocab)
    }

    pub fn text_of(&self, id: &str) -> Option<&str> {
        self.by_id.get(id).map(|&i| self.entries[i].text.as_str())
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    fn tokens_of(&self, id: &str) -> &[TokenId] {
        &self.entries[self.by_id[id]].tokens
    }
}

/// Top-k retrieved question sets, one per positive document.
fn retrieve_per_doc(
    inst: &ContrastiveInstance,
    corpus: &QuestionCorpus,
    k: usize,
    params: &Bm25Params,
) -> Result<Vec<Vec<String>>> {
    let mut sets = Vec::with_capacity(inst.positive_docs.len());
    for doc in &inst.positive_docs {
        let hits = bm25_search(&corpus.index, &doc.tokens, k, params)?;
        sets.push(hits.into_iter().map(|(id, _)| id).collect::<Vec<_>>());
    }
    if sets.iter().all(|s: &Vec<String>| s.is_empty()) {
        return Err(Error::NoRetrievedQuestions);
    }
    Ok(sets)
}

fn tfidf_weights(texts: &[&[TokenId]]) -> HashMap<TokenId, f64> {
    let mut df: HashMap<TokenId, usize> = HashMap::new();
    for tokens in texts {
        let mut seen: Vec<TokenId> = tokens
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
    let n = texts.len() as f64;
    df.into_iter()
        .map(|(t, df)| (t, ((1.0 + n) / (1.0 + df as f64)).ln() + 1.0))
        .collect()
}

fn tfidf_vector(tokens: &[TokenId], idf: &HashMap<TokenId, f64>) -> HashMap<TokenId, f64> {
    let mut tf: HashMap<TokenId, f64> = HashMap::new();
    for &t in tokens.iter().filter(|t| **t >= FIRST_REGULAR) {
        *tf.entry(t).or_insert(0.0) += 1.0;
    }
    tf.into_iter()
        .map(|(t, c)| (t, c * idf.get(&t).copied().unwrap_or(0.0)))
        .collect()
}

fn sparse_cosine(a: &HashMap<TokenId, f64>, b: &HashMap<TokenId, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(t, x)| b.get(t).map(|y| x * y))
        .sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Retrieval baseline: union the per-document top-k question sets, then pick
/// the question with the greatest summed TF-IDF cosine to the positive
/// documents. The TF-IDF transform is fit over the retrieved questions plus
/// the instance's documents. Ties break to the lowest question id.
pub fn top_tfidf_at_k(
    inst: &ContrastiveInstance,
    corpus: &QuestionCorpus,
    k: usize,
    params: &Bm25Params,
) -> Result<(String, String)> {
    let sets = retrieve_per_doc(inst, corpus, k, params)?;
    let mut candidates: Vec<String> = sets.into_iter().flatten().collect();
    candidates.sort_unstable();
    candidates.dedup();

    let mut fit_texts: Vec<&[TokenId]> =
        candidates.iter().map(|id| corpus.tokens_of(id)).collect();
    for doc in inst.docs() {
        fit_texts.push(&doc.tokens);
    }
    let idf = tfidf_weights(&fit_texts);

    let doc_vecs: Vec<HashMap<TokenId, f64>> = inst
        .positive_docs
        .iter()
        .map(|d| tfidf_vector(&d.tokens, &idf))
        .collect();

    let mut best: Option<(&String, f64)> = None;
    for qid in &candidates {
        let qvec = tfidf_vector(corpus.tokens_of(qid), &idf);
        let score: f64 = doc_vecs.iter().map(|d| sparse_cosine(&qvec, d)).sum();
        // Candidates are sorted ascending, so strict improvement keeps the
        // lowest id among ties.
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((qid, score));
        }
    }
    let (qid, _) = best.ok_or(Error::NoRetrievedQuestions)?;
    Ok((qid.clone(), corpus.text_of(qid).unwrap_or_default().to_string()))
}

/// Retrieval baseline: the question occurring in the most per-document
/// top-k sets. Ties break to the lowest question id.
pub fn top_frequent_at_k(
    inst: &ContrastiveInstance,
    corpus: &QuestionCorpus,
    k: usize,
    params: &Bm25Params,
) -> Result<(String, String)> {
    let sets = retrieve_per_doc(inst, corpus, k, params)?;
    let mut counts: HashMap<&String, usize> = HashMap::new();
    for set in &sets {
        let mut unique: Vec<&String> = set.iter().collect();
        unique.sort_unstable();
        unique.dedup();
        for qid in unique {
            *counts.entry(qid).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let (qid, _) = ranked.first().ok_or(Error::NoRetrievedQuestions)?;
    Ok((
        (*qid).clone(),
        corpus.text_of(qid).unwrap_or_default().to_string(),
    ))
}

/// Generation baseline: greedy decoding from the uniform average of the
/// positive set's per-document distributions, ignoring the negative set.
/// Shares the aggregation path with the coordinator decode, so forcing the
/// coordinator to uniform weights and zero eta reproduces it exactly.
pub fn uniform_avg_decode<S: Real>(
    gen: &GeneratorParams<S>,
    inst: &ContrastiveInstance,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<DecodeTrace<S>> {
    let opts = DecodeOptions {
        max_len,
        ..DecodeOptions::default()
    };
    let mut rng: ChaCha8Rng = substream(0, "uniform-decode");
    decode_with_policy(gen, None, inst, vocab, &opts, &mut rng)
}
