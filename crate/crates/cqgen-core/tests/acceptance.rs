//! Acceptance suite: property-based checks with independent oracles plus
//! hand-derived fixtures, one criterion per test, each printing a pass line.
//! The directional end-to-end experiment lives in `acceptance_e2e.rs`.

mod common;

use std::time::Instant;

use cqgen_core::coordinator::{
    aggregate, decode_common, eta, CoordinatorConfig, CoordinatorParams,
    CoordinatorStepOutput, DecodeOptions,
};
use cqgen_core::corpus::{generate_synthetic, SyntheticSpec, Vocabulary};
use cqgen_core::generator::{GeneratorConfig, GeneratorParams};
use cqgen_core::objectives::{entropy_loss, scr_loss, ScrStepRecord, TraceObjective};
use cqgen_core::ranker::Bm25Params;
use cqgen_core::retrieval::{
    compute_retrieval_metrics, top_frequent_at_k, top_tfidf_at_k, uniform_avg_decode,
    QuestionCorpus, QuestionEntry,
};
use cqgen_core::rng::substream;
use rand::seq::SliceRandom;
use rand::Rng;

use common::{fd_relative_errors, random_dist, synthetic_trace};

// ---------------------------------------------------------------------------
// Criterion 1: metric oracle equivalence
// ---------------------------------------------------------------------------

mod brute_force {
    //! Straight-from-definition ranking metrics, structured independently
    //! from the library implementation.

    pub fn average_precision(labels: &[bool], num_relevant: usize) -> f64 {
        let mut ap = 0.0;
        let mut seen = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if l {
                seen += 1.0;
                ap += seen / (i as f64 + 1.0);
            }
        }
        ap / num_relevant as f64
    }

    pub fn r_precision(labels: &[bool], num_relevant: usize) -> f64 {
        let hits = labels.iter().take(num_relevant).filter(|l| **l).count();
        hits as f64 / num_relevant as f64
    }

    pub fn reciprocal_rank(labels: &[bool], cutoff: Option<usize>) -> f64 {
        for (i, &l) in labels.iter().enumerate() {
            if l {
                let rank = i + 1;
                if let Some(c) = cutoff {
                    if rank > c {
                        return 0.0;
                    }
                }
                return 1.0 / rank as f64;
            }
        }
        0.0
    }

    pub fn ndcg(labels: &[bool], num_relevant: usize) -> f64 {
        let dcg: f64 = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l)
            .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
            .sum();
        let idcg: f64 = (0..num_relevant).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
        dcg / idcg
    }

    pub fn precision_at(labels: &[bool], k: usize) -> f64 {
        labels.iter().take(k).filter(|l| **l).count() as f64 / k as f64
    }
}

#[test]
fn criterion_01_metric_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = substream(2024, "metric-fuzz");
    let mut labels: Vec<bool> = (0..20).map(|i| i < 10).collect();
    for _ in 0..1000 {
        labels.shuffle(&mut rng);
        let m = compute_retrieval_metrics(&labels, 10, 10).unwrap();
        let pairs = [
            (m.map, brute_force::average_precision(&labels, 10)),
            (m.rprec, brute_force::r_precision(&labels, 10)),
            (m.mrr, brute_force::reciprocal_rank(&labels, None)),
            (m.mrr_at_10, brute_force::reciprocal_rank(&labels, Some(10))),
            (m.ndcg, brute_force::ndcg(&labels, 10)),
            (m.precision_at_k, brute_force::precision_at(&labels, 10)),
        ];
        for (got, want) in pairs {
            assert!((got - want).abs() <= 1e-9, "{got} vs oracle {want}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "metric fuzz took {secs:.2}s");
    println!("acceptance 1: metric oracle equivalence (1000 rankings, {secs:.2}s): PASS");
}

#[test]
fn criterion_02_hand_derived_metric_fixtures() {
    let worst: Vec<bool> = (0..20).map(|i| i >= 10).collect();
    let m = compute_retrieval_metrics(&worst, 10, 10).unwrap();
    assert!((m.map - 0.3312).abs() < 5e-5, "worst-case mAP {}", m.map);
    assert!((m.mrr - 1.0 / 11.0).abs() < 1e-12);
    assert!((m.mrr - 0.0909).abs() < 5e-5);

    let alternating: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
    let m = compute_retrieval_metrics(&alternating, 10, 10).unwrap();
    assert!((m.map - 0.6067).abs() < 5e-5, "alternating mAP {}", m.map);

    println!("acceptance 2: hand-derived metric fixtures (0.3312 / 0.6067 / 1-11): PASS");
}

#[test]
fn criterion_03_eta_properties() {
    assert_eq!(eta(0.0f64), -0.25);

    let mut rng = substream(99, "eta-fuzz");
    let mut zs: Vec<f64> = Vec::with_capacity(1_000_000);
    for i in 0..1_000_000u32 {
        // Mix of moderate values and heavy tails so the saturated regions
        // are exercised as well.
        let z = match i % 4 {
            0 => rng.random_range(-5.0..5.0),
            1 => rng.random_range(-40.0..40.0),
            2 => cqgen_core::rng::normal::<f64>(&mut rng, 3.0),
            _ => {
                let t: f64 = rng.random_range(-1.55..1.55);
                t.tan() * 50.0
            }
        };
        zs.push(z);
    }
    for &z in &zs {
        let e = eta(z);
        assert!(e > -1.0 && e < 0.5, "eta({z}) = {e} escapes (-1, 0.5)");
    }
    zs.sort_by(f64::total_cmp);
    for pair in zs.windows(2) {
        assert!(
            eta(pair[0]) >= eta(pair[1]),
            "eta not decreasing at z = {} vs {}",
            pair[0],
            pair[1]
        );
    }
    println!("acceptance 3: eta range, monotonicity, eta(0) = -0.25 over 1e6 samples: PASS");
}

#[test]
fn criterion_04_aggregation_validity() {
    // Hand-worked fixture.
    let pos = vec![vec![0.6, 0.3, 0.1]];
    let neg = vec![vec![0.1, 0.3, 0.6]];
    let step = CoordinatorStepOutput {
        w: vec![1.0],
        v: vec![1.0],
        z: 0.0,
        eta: 0.5,
    };
    let agg = aggregate(&step, &pos, &neg).unwrap();
    assert!((agg.probs[0] - 0.7857f64).abs() < 5e-5);
    assert!((agg.probs[1] - 0.2143f64).abs() < 5e-5);
    assert_eq!(agg.probs[2], 0.0);

    // Fuzz: output is a valid distribution or explicitly flagged fallback.
    let mut rng = substream(7, "agg-fuzz");
    for _ in 0..100_000 {
        let v = rng.random_range(2..8);
        let p = rng.random_range(1..4);
        let n = rng.random_range(0..4);
        let w = random_dist(&mut rng, p);
        let vv = if n > 0 { random_dist(&mut rng, n) } else { vec![] };
        let eta_val = eta(rng.random_range(-6.0..6.0));
        let pos: Vec<Vec<f64>> = (0..p).map(|_| random_dist(&mut rng, v)).collect();
        let neg: Vec<Vec<f64>> = (0..n).map(|_| random_dist(&mut rng, v)).collect();
        let step = CoordinatorStepOutput {
            w,
            v: vv,
            z: 0.0,
            eta: eta_val,
        };
        let agg = aggregate(&step, &pos, &neg).unwrap();
        if !agg.fallback_used {
            let sum: f64 = agg.probs.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "sum {sum}");
            assert!(agg.probs.iter().all(|&p| p >= 0.0));
        }
    }
    println!("acceptance 4: aggregation validity fuzz (1e5) + hand-worked fixture: PASS");
}

#[test]
fn criterion_05_degenerate_equivalence() {
    let spec = SyntheticSpec {
        pairs: 50,
        docs_per_set: 4,
        sentences_per_doc: 2,
        keywords_per_topic: 6,
        overlap: 0.4,
        seed: 17,
    };
    let mut instances = generate_synthetic(&spec).unwrap();
    let texts: Vec<String> = instances
        .iter()
        .flat_map(|i| i.docs().map(|d| d.text.clone()).collect::<Vec<_>>())
        .collect();
    let vocab = Vocabulary::build(&texts, 2000).unwrap();
    for inst in instances.iter_mut() {
        inst.attach_tokens(&vocab).unwrap();
    }

    let gen_cfg = GeneratorConfig {
        hidden_dim: 32,
        layers: 1,
        heads: 2,
        max_context: 64,
        ..GeneratorConfig::default()
    };
    let generator =
        GeneratorParams::<f64>::init(vocab.size(), &gen_cfg, &mut substream(5, "gen")).unwrap();
    let coord_cfg = CoordinatorConfig {
        hidden_dim: 32,
        heads: 2,
        blocks: 1,
        max_gen_len: 8,
        ..CoordinatorConfig::default()
    };
    let coord =
        CoordinatorParams::<f64>::init(&coord_cfg, &mut substream(6, "coord")).unwrap();

    for inst in &instances {
        let opts = DecodeOptions {
            max_len: 8,
            force_uniform_w: true,
            force_eta_zero: true,
            ..DecodeOptions::default()
        };
        let mut rng = substream(0, "decode");
        let forced = decode_common(&generator, &coord, inst, &vocab, &opts, &mut rng).unwrap();
        let uniform = uniform_avg_decode(&generator, inst, &vocab, 8).unwrap();
        assert_eq!(
            forced.tokens, uniform.tokens,
            "instance {} diverged",
            inst.id
        );
    }
    println!("acceptance 5: forced-uniform coordinator equals uniform baseline on 50 instances: PASS");
}

#[test]
fn criterion_06_gradient_checks() {
    let cfg = CoordinatorConfig {
        hidden_dim: 8,
        blocks: 1,
        heads: 2,
        ..CoordinatorConfig::default()
    };
    let mut coord =
        CoordinatorParams::<f64>::init(&cfg, &mut substream(23, "grad-coord")).unwrap();
    // V=17, P=N=2, T=3, lambda defaults, nonzero advantage.
    let trace = synthetic_trace(&coord, 17, 2, 2, 3, 29);
    let (_, records) = scr_loss(&trace).unwrap();
    let objective = TraceObjective::new(&trace, &records, 0.37, (1.0, 100.0, 0.1));
    objective.grad(&mut coord).unwrap();

    let errors = fd_relative_errors(
        &mut coord,
        |c| c.params_mut(),
        |c| objective.value(c).unwrap().total,
        1e-4,
    );
    let max_err = errors.iter().cloned().fold(0.0f64, f64::max);
    for (i, err) in errors.iter().enumerate() {
        assert!(err <= &1e-4, "tensor {i}: relative error {err}");
    }
    println!(
        "acceptance 6: combined-loss gradient check, max tensor rel. err {max_err:.2e} <= 1e-4: PASS"
    );
}

#[test]
fn criterion_07_scr_fixtures() {
    // L_pos = 0 when the merged distribution matches every positive one.
    let d = vec![0.25, 0.25, 0.5];
    let trace = common_trace_with(d.clone(), vec![d.clone(), d.clone()], vec![]);
    let (_, records) = scr_loss(&trace).unwrap();
    assert!(records[0].l_pos.abs() < 1e-12);

    // nu = 1 for identical means, 0 for disjoint supports (gate off).
    let trace = common_trace_with(d.clone(), vec![d.clone()], vec![d.clone()]);
    let (_, records) = scr_loss(&trace).unwrap();
    assert!((records[0].nu - 1.0).abs() < 1e-9);

    let trace = common_trace_with(
        vec![1.0, 0.0, 0.0],
        vec![vec![1.0, 0.0, 0.0]],
        vec![vec![0.0, 0.5, 0.5]],
    );
    let (loss, records) = scr_loss(&trace).unwrap();
    assert_eq!(records[0].nu, 0.0);
    assert!(!records[0].gate_active);
    assert!(records[0].l_neg > 0.0);
    assert!((loss - records[0].l_pos).abs() < 1e-12, "gated term leaked into the value");

    // Gate off implies zero contribution of the negative term to the
    // gradient as well: FD against the gate-off objective.
    let cfg = CoordinatorConfig {
        hidden_dim: 8,
        blocks: 1,
        heads: 2,
        ..CoordinatorConfig::default()
    };
    let mut coord =
        CoordinatorParams::<f64>::init(&cfg, &mut substream(41, "scr-grad")).unwrap();
    let trace = synthetic_trace(&coord, 11, 2, 2, 2, 43);
    let (_, records) = scr_loss(&trace).unwrap();
    let gates_off: Vec<ScrStepRecord<f64>> = records
        .iter()
        .map(|r| ScrStepRecord {
            l_pos: r.l_pos,
            l_neg: r.l_neg,
            nu: 0.0,
            gate_active: false,
        })
        .collect();
    let objective = TraceObjective::new(&trace, &gates_off, 0.0, (0.0, 1.0, 0.0));
    objective.grad(&mut coord).unwrap();
    let errors = fd_relative_errors(
        &mut coord,
        |c| c.params_mut(),
        |c| objective.value(c).unwrap().total,
        1e-4,
    );
    for err in &errors {
        assert!(err <= &1e-4, "gate-off gradient err {err}");
    }
    println!("acceptance 7: SCR fixtures (L_pos = 0, nu in {{0, 1}}, gate-off value+gradient): PASS");
}

fn common_trace_with(
    probs: Vec<f64>,
    pos: Vec<Vec<f64>>,
    neg: Vec<Vec<f64>>,
) -> cqgen_core::coordinator::DecodeTrace<f64> {
    use cqgen_core::coordinator::{AggregatedDistribution, StepRecord};
    let p = pos.len();
    let n = neg.len();
    let mask = probs.iter().map(|x| *x > 0.0).collect();
    let step = StepRecord {
        pos_hidden: vec![],
        neg_hidden: vec![],
        pos_dists: pos,
        neg_dists: neg,
        coord: CoordinatorStepOutput {
            w: vec![1.0 / p as f64; p],
            v: if n > 0 { vec![1.0 / n as f64; n] } else { vec![] },
            z: 0.0,
            eta: 0.0,
        },
        agg: AggregatedDistribution {
            probs: probs.clone(),
            normalizer: 1.0,
            mask,
            fallback_used: false,
        },
        chosen: 0,
        log_prob: probs[0].max(1e-12).ln(),
    };
    cqgen_core::coordinator::DecodeTrace {
        steps: vec![step],
        tokens: vec![0],
        question: vec![0],
    }
}

#[test]
fn criterion_08_entropy_fixtures() {
    let d = vec![1.0];
    let uniform = vec![0.1; 10];
    let trace = {
        let mut t = common_trace_with(d.clone(), vec![d.clone()], vec![]);
        t.steps[0].coord.w = uniform.clone();
        t.steps[0].coord.v = uniform.clone();
        t
    };
    let loss = entropy_loss(&trace).unwrap();
    assert!((loss - (-4.6052)).abs() < 1e-3, "uniform entropy {loss}");

    let mut one_hot = vec![0.0; 10];
    one_hot[4] = 1.0;
    let trace = {
        let mut t = common_trace_with(d.clone(), vec![d], vec![]);
        t.steps[0].coord.w = one_hot.clone();
        t.steps[0].coord.v = one_hot;
        t
    };
    assert_eq!(entropy_loss(&trace).unwrap(), 0.0);
    println!("acceptance 8: entropy fixtures (-4.6052 uniform, 0 one-hot): PASS");
}

#[test]
fn criterion_09_baseline_oracles() {
    let spec = SyntheticSpec {
        pairs: 20,
        docs_per_set: 4,
        sentences_per_doc: 2,
        keywords_per_topic: 6,
        overlap: 0.3,
        seed: 31,
    };
    let mut instances = generate_synthetic(&spec).unwrap();
    let mut texts: Vec<String> = instances
        .iter()
        .flat_map(|i| {
            i.docs()
                .map(|d| d.text.clone())
                .chain(i.oracle_pos_question.clone())
                .collect::<Vec<_>>()
        })
        .collect();

    // 200-question corpus: the 40 oracle questions plus filler questions
    // over the same vocabulary.
    let mut questions: Vec<String> = instances
        .iter()
        .flat_map(|i| {
            i.oracle_pos_question
                .clone()
                .into_iter()
                .chain(i.oracle_neg_question.clone())
        })
        .collect();
    let mut rng = substream(33, "filler-questions");
    let vocab_words: Vec<String> = {
        let vocab = Vocabulary::build(&texts, 4000).unwrap();
        (4..vocab.size() as u32).map(|id| vocab.token(id).to_string()).collect()
    };
    while questions.len() < 200 {
        let a = &vocab_words[rng.random_range(0..vocab_words.len())];
        let b = &vocab_words[rng.random_range(0..vocab_words.len())];
        let c = &vocab_words[rng.random_range(0..vocab_words.len())];
        questions.push(format!("{a} of the {b} with {c}"));
    }
    texts.extend(questions.iter().cloned());
    let vocab = Vocabulary::build(&texts, 4000).unwrap();
    for inst in instances.iter_mut() {
        inst.attach_tokens(&vocab).unwrap();
    }
    let entries: Vec<QuestionEntry> = questions
        .iter()
        .enumerate()
        .map(|(i, text)| QuestionEntry {
            id: format!("q-{i:03}"),
            text: text.clone(),
            tokens: vec![],
        })
        .collect();
    let corpus = QuestionCorpus::from_entries(entries.clone(), &vocab).unwrap();
    let params = Bm25Params::default();
    let k = 25;

    for inst in &instances {
        // Shared per-document retrieval; the brute force below re-derives
        // the selection stage (union, TF-IDF scoring, counting, tie rule)
        // from the definitions.
        let per_doc: Vec<Vec<String>> = inst
            .positive_docs
            .iter()
            .map(|d| {
                cqgen_core::retrieval::bm25_search(corpus_index(&corpus), &d.tokens, k, &params)
                    .unwrap()
                    .into_iter()
                    .map(|(id, _)| id)
                    .collect()
            })
            .collect();

        let (tfidf_id, _) = top_tfidf_at_k(inst, &corpus, k, &params).unwrap();
        let bf_tfidf = brute_force_tfidf(inst, &entries, &per_doc, &vocab);
        assert_eq!(tfidf_id, bf_tfidf, "top-tfidf diverged on {}", inst.id);

        let (freq_id, _) = top_frequent_at_k(inst, &corpus, k, &params).unwrap();
        let bf_freq = brute_force_frequent(&per_doc);
        assert_eq!(freq_id, bf_freq, "top-frequent diverged on {}", inst.id);
    }
    println!("acceptance 9: baseline selection matches brute force on 20 instances: PASS");
}

fn corpus_index(corpus: &QuestionCorpus) -> &cqgen_core::retrieval::InvertedIndex {
    corpus.index()
}

/// Brute-force Top-TFIDF: naive df/idf over the fit corpus, dense cosine,
/// exhaustive argmax with lowest-id ties.
fn brute_force_tfidf(
    inst: &cqgen_core::corpus::ContrastiveInstance,
    entries: &[QuestionEntry],
    per_doc: &[Vec<String>],
    vocab: &Vocabulary,
) -> String {
    use std::collections::{BTreeMap, BTreeSet};
    let mut candidates: BTreeSet<&String> = BTreeSet::new();
    for set in per_doc {
        candidates.extend(set.iter());
    }
    let text_of = |id: &String| -> Vec<u32> {
        let e = entries.iter().find(|e| &e.id == id).unwrap();
        vocab.tokenize(&e.text)
    };

    // Fit corpus: candidate questions plus all instance documents.
    let mut fit: Vec<Vec<u32>> = candidates.iter().map(|id| text_of(id)).collect();
    for doc in inst.docs() {
        fit.push(doc.tokens.clone());
    }
    let n = fit.len() as f64;
    let mut df: BTreeMap<u32, f64> = BTreeMap::new();
    for text in &fit {
        let set: BTreeSet<u32> = text.iter().copied().filter(|t| *t >= 4).collect();
        for t in set {
            *df.entry(t).or_insert(0.0) += 1.0;
        }
    }
    let idf = |t: u32| ((1.0 + n) / (1.0 + df.get(&t).copied().unwrap_or(0.0))).ln() + 1.0;
    let vectorize = |tokens: &[u32]| -> BTreeMap<u32, f64> {
        let mut tf: BTreeMap<u32, f64> = BTreeMap::new();
        for &t in tokens.iter().filter(|t| **t >= 4) {
            *tf.entry(t).or_insert(0.0) += 1.0;
        }
        tf.into_iter().map(|(t, c)| (t, c * idf(t))).collect()
    };
    let cosine = |a: &BTreeMap<u32, f64>, b: &BTreeMap<u32, f64>| -> f64 {
        let dot: f64 = a
            .iter()
            .filter_map(|(t, x)| b.get(t).map(|y| x * y))
            .sum();
        let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };

    let doc_vecs: Vec<BTreeMap<u32, f64>> = inst
        .positive_docs
        .iter()
        .map(|d| vectorize(&d.tokens))
        .collect();
    let mut best: Option<(&String, f64)> = None;
    for id in &candidates {
        let qv = vectorize(&text_of(id));
        let score: f64 = doc_vecs.iter().map(|dv| cosine(&qv, dv)).sum();
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((id, score));
        }
    }
    best.unwrap().0.clone()
}

/// Brute-force Top-Frequent: count (question, set) membership pairs.
fn brute_force_frequent(per_doc: &[Vec<String>]) -> String {
    use std::collections::{BTreeMap, BTreeSet};
    let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
    for set in per_doc {
        let unique: BTreeSet<&String> = set.iter().collect();
        for id in unique {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    // BTreeMap iterates in ascending id order; strict improvement keeps the
    // lowest id among ties.
    let mut best: Option<(&String, usize)> = None;
    for (id, c) in counts {
        if best.map_or(true, |(_, bc)| c > bc) {
            best = Some((id, c));
        }
    }
    best.unwrap().0.clone()
}
