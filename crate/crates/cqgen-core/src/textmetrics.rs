//! Generation-similarity metrics against oracle questions: BLEU-n and
//! ROUGE-L over normalized word sequences. Single reference, no smoothing;
//! any zero n-gram precision yields a zero BLEU.

use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq)]
pub struct TextScore {
    pub metric: String,
    pub value: f64,
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for gram in words.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Geometric mean of the modified n-gram precisions for n = 1..=max_n,
/// times the brevity penalty `exp(1 - |ref|/|hyp|)` when the hypothesis is
/// shorter than the reference.
pub fn bleu(hypothesis: &[String], reference: &[String], max_n: usize) -> TextScore {
    assert!(!reference.is_empty(), "reference must be nonempty");
    assert!((1..=4).contains(&max_n), "max_n must be in 1..=4");
    let metric = format!("BL-{max_n}");
    if hypothesis.is_empty() {
        return TextScore { metric, value: 0.0 };
    }

    let mut log_prec_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_n {
        let hyp_grams = ngram_counts(hypothesis, n);
        let ref_grams = ngram_counts(reference, n);
        let total: usize = hyp_grams.values().sum();
        if total == 0 {
            // The hypothesis is shorter than n: no n-gram slots to score.
            continue;
        }
        let clipped: usize = hyp_grams
            .iter()
            .map(|(gram, count)| (*count).min(ref_grams.get(gram).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return TextScore { metric, value: 0.0 };
        }
        log_prec_sum += (clipped as f64 / total as f64).ln();
        orders += 1;
    }
    let brevity = if hypothesis.len() < reference.len() {
        (1.0 - reference.len() as f64 / hypothesis.len() as f64).exp()
    } else {
        1.0
    };
    TextScore {
        metric,
        value: brevity * (log_prec_sum / orders as f64).exp(),
    }
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// F1 of longest-common-subsequence precision and recall.
pub fn rouge_l(hypothesis: &[String], reference: &[String]) -> TextScore {
    assert!(!reference.is_empty(), "reference must be nonempty");
    let metric = "ROUGE_L".to_string();
    if hypothesis.is_empty() {
        return TextScore { metric, value: 0.0 };
    }
    let lcs = lcs_length(hypothesis, reference) as f64;
    if lcs == 0.0 {
        return TextScore { metric, value: 0.0 };
    }
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    TextScore {
        metric,
        value: 2.0 * p * r / (p + r),
    }
}
