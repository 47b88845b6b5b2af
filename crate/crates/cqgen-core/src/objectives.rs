//! Reward computation, policy-gradient loss, set-induced contrastive
//! regularization (SCR), entropy loss, the combined objective, and the
//! coordinator training step.
//!
//! Gradients flow only into the coordinator: rewards are terminal constants,
//! the per-document generator distributions are frozen inputs, and the two
//! piecewise-constant choices (the aggregation truncation mask and the SCR
//! gate) are held at their forward values.

use rand_chacha::ChaCha8Rng;

use crate::coordinator::{
    aggregate_backward, aggregate_frozen, decode_common, eta_prime, CoordinatorParams,
    DecodeMode, DecodeOptions, DecodeTrace,
};
use crate::corpus::{ContrastiveInstance, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::generator::GeneratorParams;
use crate::nn::AdamW;
use crate::ranker::{rank_instance, DocQuestionScorer};
use crate::scalar::Real;

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardStat {
    PrecisionAtK { k: usize },
    MeanAveragePrecision,
}

impl Default for RewardStat {
    fn default() -> Self {
        RewardStat::PrecisionAtK { k: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Critic {
    /// Baseline is the reward of the instance's oracle positive question.
    #[default]
    Oracle,
    /// Baseline is the reward of the greedy rollout.
    SelfCritic,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardSpec {
    pub stat: RewardStat,
    pub critic: Critic,
}

/// Reward and baseline for one training step, plus the per-document scores
/// behind the sampled rollout's ranking.
#[derive(Debug, Clone)]
pub struct RewardRecord {
    pub reward: f64,
    pub baseline: f64,
    pub scores: Vec<(String, f64)>,
}

/// Retrieval statistic of an ordered relevance labeling, in [0, 1].
pub fn compute_reward(ranked_labels: &[bool], stat: &RewardStat) -> Result<f64> {
    match *stat {
        RewardStat::PrecisionAtK { k } => {
            if k > ranked_labels.len() {
                return Err(Error::PrecisionCutoffTooLarge {
                    k,
                    len: ranked_labels.len(),
                });
            }
            let hits = ranked_labels[..k].iter().filter(|l| **l).count();
            Ok(hits as f64 / k as f64)
        }
        RewardStat::MeanAveragePrecision => {
            let relevant = ranked_labels.iter().filter(|l| **l).count();
            if relevant == 0 {
                return Err(Error::NoRelevantDocuments);
            }
            let mut hits = 0usize;
            let mut ap = 0.0;
            for (rank0, &label) in ranked_labels.iter().enumerate() {
                if label {
                    hits += 1;
                    ap += hits as f64 / (rank0 + 1) as f64;
                }
            }
            Ok(ap / relevant as f64)
        }
    }
}

// ---------------------------------------------------------------------------
// Loss values
// ---------------------------------------------------------------------------

/// Flooring applied to both arguments of every KL term; toy distributions
/// contain exact zeros and KL is undefined there.
const KL_FLOOR: f64 = 1e-8;

fn floor_renorm<S: Real>(p: &[S]) -> Vec<S> {
    let eps = S::from_f64(KL_FLOOR);
    let mut f: Vec<S> = p.iter().map(|x| x.max(eps)).collect();
    let z = f.iter().fold(S::zero(), |a, x| a + *x);
    f.iter_mut().for_each(|x| *x = *x / z);
    f
}

fn kl<S: Real>(p: &[S], q: &[S]) -> S {
    p.iter()
        .zip(q)
        .fold(S::zero(), |a, (pi, qi)| a + *pi * (*pi / *qi).ln())
}

fn symmetric_kl_sum<S: Real>(p_theta: &[S], dists: &[Vec<S>]) -> S {
    dists.iter().fold(S::zero(), |acc, d| {
        let df = floor_renorm(d);
        acc + kl(p_theta, &df) + kl(&df, p_theta)
    })
}

fn cosine<S: Real>(a: &[S], b: &[S]) -> S {
    let dot = a.iter().zip(b).fold(S::zero(), |s, (x, y)| s + *x * *y);
    let na = a.iter().fold(S::zero(), |s, x| s + *x * *x).sqrt();
    let nb = b.iter().fold(S::zero(), |s, x| s + *x * *x).sqrt();
    if na == S::zero() || nb == S::zero() {
        return S::zero();
    }
    dot / (na * nb)
}

fn mean_dist<S: Real>(dists: &[Vec<S>]) -> Vec<S> {
    let v = dists[0].len();
    let inv = S::one() / S::from_usize(dists.len());
    let mut out = vec![S::zero(); v];
    for d in dists {
        for (o, x) in out.iter_mut().zip(d) {
            *o = *o + *x * inv;
        }
    }
    out
}

/// Per-step SCR bookkeeping: the attraction and repulsion KL sums, the
/// set-similarity `nu`, and whether the capped repulsion gate fired.
#[derive(Debug, Clone)]
pub struct ScrStepRecord<S> {
    pub l_pos: S,
    pub l_neg: S,
    pub nu: S,
    pub gate_active: bool,
}

/// `-(R - R_baseline) * sum_t log p_t(o_t)`; the reward difference is a
/// constant, so the gradient flows through the log-probabilities only.
pub fn pg_loss<S: Real>(trace: &DecodeTrace<S>, reward: &RewardRecord) -> Result<S> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut log_sum = S::zero();
    for step in &trace.steps {
        if !step.log_prob.is_finite() {
            return Err(Error::ZeroMassToken { token: step.chosen });
        }
        log_sum = log_sum + step.log_prob;
    }
    Ok(-S::from_f64(reward.reward - reward.baseline) * log_sum)
}

/// Set-induced contrastive regularization over the whole trace:
/// attraction to every positive distribution via symmetric KL, repulsion
/// from the negative ones gated by `nu_t * L_neg > L_pos`, averaged over T.
pub fn scr_loss<S: Real>(trace: &DecodeTrace<S>) -> Result<(S, Vec<ScrStepRecord<S>>)> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut records = Vec::with_capacity(trace.len());
    let mut total = S::zero();
    for step in &trace.steps {
        let p_theta = floor_renorm(&step.agg.probs);
        let l_pos = symmetric_kl_sum(&p_theta, &step.pos_dists);
        let (l_neg, nu) = if step.neg_dists.is_empty() {
            (S::zero(), S::zero())
        } else {
            (
                symmetric_kl_sum(&p_theta, &step.neg_dists),
                cosine(&mean_dist(&step.pos_dists), &mean_dist(&step.neg_dists)),
            )
        };
        let gate_active = nu * l_neg > l_pos;
        total = total + l_pos - if gate_active { l_neg } else { S::zero() };
        records.push(ScrStepRecord {
            l_pos,
            l_neg,
            nu,
            gate_active,
        });
    }
    Ok((total / S::from_usize(trace.len()), records))
}

/// Negative entropy of the attention weights, averaged over T, with
/// `0 log 0 = 0`. Minimized exactly at uniform weights.
pub fn entropy_loss<S: Real>(trace: &DecodeTrace<S>) -> Result<S> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut total = S::zero();
    for step in &trace.steps {
        for x in step.coord.w.iter().chain(step.coord.v.iter()) {
            if *x > S::zero() {
                total = total + *x * x.ln();
            }
        }
    }
    Ok(total / S::from_usize(trace.len()))
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<S> {
    pub pg: S,
    pub scr: S,
    pub entropy: S,
    pub total: S,
    pub lambdas: (f64, f64, f64),
}

/// `total = l1 * pg + l2 * scr + l3 * entropy`, exactly.
pub fn total_loss<S: Real>(pg: S, scr: S, entropy: S, lambdas: (f64, f64, f64)) -> LossBreakdown<S> {
    let (l1, l2, l3) = lambdas;
    LossBreakdown {
        pg,
        scr,
        entropy,
        total: S::from_f64(l1) * pg + S::from_f64(l2) * scr + S::from_f64(l3) * entropy,
        lambdas,
    }
}

// ---------------------------------------------------------------------------
// Combined objective with gradients
// ---------------------------------------------------------------------------

/// Piecewise-constant choices recorded at the forward pass and held fixed
/// for gradients and for finite-difference re-evaluation.
#[derive(Debug, Clone)]
pub struct FrozenStep {
    pub mask: Vec<bool>,
    pub fallback: bool,
    pub gate: bool,
}

/// The combined objective over one recorded rollout, with the trace's
/// generator outputs as constants. `value` re-runs the coordinator under the
/// frozen choices (for finite differences); `grad` also accumulates
/// parameter gradients.
pub struct TraceObjective<'a, S> {
    pub trace: &'a DecodeTrace<S>,
    pub frozen: Vec<FrozenStep>,
    pub advantage: f64,
    pub lambdas: (f64, f64, f64),
}

impl<'a, S: Real> TraceObjective<'a, S> {
    /// Freezes the trace's own masks plus the gates from `records`.
    pub fn new(
        trace: &'a DecodeTrace<S>,
        records: &[ScrStepRecord<S>],
        advantage: f64,
        lambdas: (f64, f64, f64),
    ) -> Self {
        let frozen = trace
            .steps
            .iter()
            .zip(records)
            .map(|(step, rec)| FrozenStep {
                mask: step.agg.mask.clone(),
                fallback: step.agg.fallback_used,
                gate: rec.gate_active,
            })
            .collect();
        Self {
            trace,
            frozen,
            advantage,
            lambdas,
        }
    }

    /// Loss value only; used for finite-difference evaluations where the
    /// caller perturbs the parameters between calls.
    pub fn value(&self, coord: &mut CoordinatorParams<S>) -> Result<LossBreakdown<S>> {
        self.run(coord, false)
    }

    /// Loss value plus parameter gradients (gradients are zeroed first).
    pub fn grad(&self, coord: &mut CoordinatorParams<S>) -> Result<LossBreakdown<S>> {
        coord.zero_grad();
        self.run(coord, true)
    }

    fn run(
        &self,
        coord: &mut CoordinatorParams<S>,
        with_grad: bool,
    ) -> Result<LossBreakdown<S>> {
        let t_len = self.trace.len();
        if t_len == 0 {
            return Err(Error::EmptyTrace);
        }
        let (l1, l2, l3) = self.lambdas;
        let inv_t = 1.0 / t_len as f64;
        let adv = S::from_f64(self.advantage);

        let mut pg_sum = S::zero();
        let mut scr_sum = S::zero();
        let mut ent_sum = S::zero();

        for (step, frozen) in self.trace.steps.iter().zip(&self.frozen) {
            let (out, cache) = coord.forward(&step.pos_hidden, &step.neg_hidden)?;
            let agg = aggregate_frozen(
                &out,
                &step.pos_dists,
                &step.neg_dists,
                &frozen.mask,
                frozen.fallback,
            )?;

            let chosen = step.chosen as usize;
            let p_chosen = agg.probs[chosen];
            if p_chosen <= S::zero() {
                return Err(Error::ZeroMassToken { token: step.chosen });
            }
            pg_sum = pg_sum + p_chosen.ln();

            let p_theta = floor_renorm(&agg.probs);
            let l_pos = symmetric_kl_sum(&p_theta, &step.pos_dists);
            let l_neg = if step.neg_dists.is_empty() {
                S::zero()
            } else {
                symmetric_kl_sum(&p_theta, &step.neg_dists)
            };
            scr_sum = scr_sum + l_pos - if frozen.gate { l_neg } else { S::zero() };

            let mut ent = S::zero();
            for x in out.w.iter().chain(out.v.iter()) {
                if *x > S::zero() {
                    ent = ent + *x * x.ln();
                }
            }
            ent_sum = ent_sum + ent;

            if with_grad {
                let mut dprobs = vec![S::zero(); agg.probs.len()];

                // Policy gradient: d(-adv * ln p_o)/dp_o = -adv / p_o.
                if l1 != 0.0 {
                    dprobs[chosen] =
                        dprobs[chosen] - S::from_f64(l1) * adv / p_chosen;
                }

                // SCR through the floor+renorm of the aggregated distribution.
                if l2 != 0.0 {
                    let scale = S::from_f64(l2 * inv_t);
                    let mut df = vec![S::zero(); p_theta.len()];
                    accumulate_sym_kl_grad(&p_theta, &step.pos_dists, S::one(), &mut df);
                    if frozen.gate && !step.neg_dists.is_empty() {
                        accumulate_sym_kl_grad(
                            &p_theta,
                            &step.neg_dists,
                            -S::one(),
                            &mut df,
                        );
                    }
                    add_floor_renorm_grad(&agg.probs, &p_theta, &df, scale, &mut dprobs);
                }

                let (mut dw, mut dv, deta) = aggregate_backward(
                    &out,
                    &step.pos_dists,
                    &step.neg_dists,
                    &agg,
                    &dprobs,
                );

                // Entropy: d(x ln x)/dx = ln x + 1.
                if l3 != 0.0 {
                    let scale = S::from_f64(l3 * inv_t);
                    for (g, x) in dw.iter_mut().zip(&out.w) {
                        if *x > S::zero() {
                            *g = *g + scale * (x.ln() + S::one());
                        }
                    }
                    for (g, x) in dv.iter_mut().zip(&out.v) {
                        if *x > S::zero() {
                            *g = *g + scale * (x.ln() + S::one());
                        }
                    }
                }

                let dz = deta * eta_prime(out.z);
                coord.backward(&cache, &dw, &dv, dz);
            }
        }

        let pg = -adv * pg_sum;
        let scr = scr_sum / S::from_usize(t_len);
        let ent = ent_sum / S::from_usize(t_len);
        Ok(total_loss(pg, scr, ent, self.lambdas))
    }
}

/// d(sum_i KL(f||q_i) + KL(q_i||f))/df accumulated into `df`, scaled by
/// `sign` (+1 attraction, -1 gated repulsion).
fn accumulate_sym_kl_grad<S: Real>(
    f: &[S],
    dists: &[Vec<S>],
    sign: S,
    df: &mut [S],
) {
    for d in dists {
        let q = floor_renorm(d);
        for j in 0..f.len() {
            // KL(f||q): ln(f/q) + 1 ; KL(q||f): -q/f.
            let g = (f[j] / q[j]).ln() + S::one() - q[j] / f[j];
            df[j] = df[j] + sign * g;
        }
    }
}

/// Chains a gradient w.r.t. the floored-renormalized distribution back to
/// the raw probabilities: `f_j = max(p_j, eps) / z`.
fn add_floor_renorm_grad<S: Real>(
    p: &[S],
    f: &[S],
    df: &[S],
    scale: S,
    dp: &mut [S],
) {
    let eps = S::from_f64(KL_FLOOR);
    let z = p.iter().fold(S::zero(), |a, x| a + x.max(eps));
    let weighted: S = df.iter().zip(f).fold(S::zero(), |a, (g, fj)| a + *g * *fj);
    for j in 0..p.len() {
        if p[j] > eps {
            dp[j] = dp[j] + scale * (df[j] - weighted) / z;
        }
    }
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

/// Ablation switches; each maps one loss term on or off, plus the null-neg
/// variant that drops negative attention during generation.
#[derive(Debug, Clone, Copy)]
pub struct AblationFlags {
    pub enable_pg: bool,
    pub enable_scr: bool,
    pub enable_entropy: bool,
    pub null_neg: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            enable_pg: true,
            enable_scr: true,
            enable_entropy: true,
            null_neg: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepSettings {
    pub reward: RewardSpec,
    pub lambdas: (f64, f64, f64),
    pub flags: AblationFlags,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for StepSettings {
    fn default() -> Self {
        Self {
            reward: RewardSpec::default(),
            lambdas: (1.0, 100.0, 0.1),
            flags: AblationFlags::default(),
            temperature: 1.0,
            max_len: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainStepOutput<S> {
    pub losses: LossBreakdown<S>,
    pub reward: RewardRecord,
    pub gate_rate: f64,
    pub fallback_rate: f64,
    pub sampled_question: Vec<TokenId>,
    pub scr_records: Vec<ScrStepRecord<S>>,
}

fn question_reward(
    question: &[TokenId],
    inst: &ContrastiveInstance,
    scorer: &dyn DocQuestionScorer,
    stat: &RewardStat,
) -> Result<(f64, Vec<(String, f64)>)> {
    let ranked = rank_instance(question, inst, scorer);
    let labels: Vec<bool> = ranked.iter().map(|e| e.positive).collect();
    let reward = compute_reward(&labels, stat)?;
    let scores = ranked.into_iter().map(|e| (e.doc_id, e.score)).collect();
    Ok((reward, scores))
}

/// One REINFORCE step on the coordinator: sample a rollout, score it with
/// the ranker, compute the critic baseline, backpropagate the combined loss
/// through the coordinator only, and apply one optimizer update. The
/// generator is untouched by construction (shared immutably).
pub fn train_coordinator_step<S: Real>(
    inst: &ContrastiveInstance,
    gen: &GeneratorParams<S>,
    coord: &mut CoordinatorParams<S>,
    scorer: &dyn DocQuestionScorer,
    settings: &StepSettings,
    opt: &mut AdamW<S>,
    rng: &mut ChaCha8Rng,
    vocab: &Vocabulary,
) -> Result<TrainStepOutput<S>> {
    let sample_opts = DecodeOptions {
        mode: DecodeMode::Sample {
            temperature: settings.temperature,
        },
        max_len: settings.max_len,
        null_neg: settings.flags.null_neg,
        ..DecodeOptions::default()
    };
    let trace = decode_common(gen, coord, inst, vocab, &sample_opts, rng)?;

    let (reward, scores) =
        question_reward(&trace.question, inst, scorer, &settings.reward.stat)?;
    let baseline = match settings.reward.critic {
        Critic::Oracle => {
            let oracle = inst
                .oracle_pos_question
                .as_ref()
                .ok_or_else(|| Error::MissingOracleQuestion(inst.id.clone()))?;
            question_reward(&vocab.tokenize(oracle), inst, scorer, &settings.reward.stat)?.0
        }
        Critic::SelfCritic => {
            let greedy_opts = DecodeOptions {
                mode: DecodeMode::Greedy,
                max_len: settings.max_len,
                null_neg: settings.flags.null_neg,
                ..DecodeOptions::default()
            };
            let greedy = decode_common(gen, coord, inst, vocab, &greedy_opts, rng)?;
            question_reward(&greedy.question, inst, scorer, &settings.reward.stat)?.0
        }
    };
    let record = RewardRecord {
        reward,
        baseline,
        scores,
    };

    let (_, scr_records) = scr_loss(&trace)?;
    let lambdas = (
        if settings.flags.enable_pg {
            settings.lambdas.0
        } else {
            0.0
        },
        if settings.flags.enable_scr {
            settings.lambdas.1
        } else {
            0.0
        },
        if settings.flags.enable_entropy {
            settings.lambdas.2
        } else {
            0.0
        },
    );
    let objective = TraceObjective::new(
        &trace,
        &scr_records,
        record.reward - record.baseline,
        lambdas,
    );
    let losses = objective.grad(coord)?;
    opt.step(&mut coord.params_mut());

    let gate_rate = scr_records.iter().filter(|r| r.gate_active).count() as f64
        / scr_records.len() as f64;
    let fallback_rate = trace
        .steps
        .iter()
        .filter(|s| s.agg.fallback_used)
        .count() as f64
        / trace.len() as f64;

    Ok(TrainStepOutput {
        losses,
        reward: record,
        gate_rate,
        fallback_rate,
        sampled_question: trace.question,
        scr_records,
    })
}
