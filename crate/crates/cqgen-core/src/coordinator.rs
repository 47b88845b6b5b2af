//! Inter-document coordinator.
//!
//! Transformer blocks without a causal mask run over the P+N per-document
//! hidden states (plus a learned cluster embedding marking set membership).
//! Three heads produce attention weights `w` over the positive set, `v` over
//! the negative set, and a scalar `z` whose damped transform `eta` controls
//! how much negative-set mass is subtracted from (or occasionally added to)
//! the merged next-token distribution:
//!
//! ```text
//! p = [ sum_i w_i pos_i  -  eta(z) * sum_i v_i neg_i ]+   / C
//! ```
//!
//! Documents are a set: no positional embeddings are added, so the forward
//! pass is permutation-equivariant within each set.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ContrastiveInstance, TokenId, Vocabulary, EOS, SEP};
use crate::error::{Error, Result};
use crate::generator::{
    argmax_token, generator_step, truncate_context, GeneratorParams, GeneratorStepOutput,
};
use crate::nn::{
    softmax_backward, softmax_in_place, AttnCache, FeedForward, FfCache, LayerNorm, Linear,
    LnCache, MultiHeadAttention, Param,
};
use crate::rng::categorical;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorConfig {
    pub blocks: usize,
    pub heads: usize,
    /// Must match the generator's hidden dimension.
    pub hidden_dim: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    pub max_gen_len: usize,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            heads: 4,
            hidden_dim: 64,
            ln_eps: 1e-5,
            init_std: 0.02,
            max_gen_len: 20,
        }
    }
}

impl CoordinatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || self.hidden_dim == 0 || self.max_gen_len == 0 {
            return Err(Error::InvalidConfig(
                "coordinator blocks, heads, hidden dim, and max length must be at least 1".into(),
            ));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Damped penalization coefficient, `-(e^{2z} - 0.5) / (e^{2z} + 1)`.
///
/// Strictly decreasing with image `(-1, 0.5)`. Computed as
/// `-1 + 1.5 * sigmoid(-2z)` so large `|z|` cannot overflow; results are
/// nudged inside the open interval where the true value rounds onto a bound.
pub fn eta<S: Real>(z: S) -> S {
    let s = stable_sigmoid(-(z + z));
    let raw = S::from_f64(-1.0) + S::from_f64(1.5) * s;
    let lo = -(S::one() - S::epsilon());
    let hi = (S::one() - S::epsilon()) * S::from_f64(0.5);
    raw.max(lo).min(hi)
}

/// d(eta)/dz = -3 * sigmoid(-2z) * (1 - sigmoid(-2z)).
pub fn eta_prime<S: Real>(z: S) -> S {
    let s = stable_sigmoid(-(z + z));
    S::from_f64(-3.0) * s * (S::one() - s)
}

fn stable_sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

// ---------------------------------------------------------------------------
// Coordinator parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct CoordBlock<S> {
    attn: MultiHeadAttention<S>,
    ln1: LayerNorm<S>,
    ffn: FeedForward<S>,
    ln2: LayerNorm<S>,
}

struct CoordBlockCache<S> {
    x_in: Vec<S>,
    attn: AttnCache<S>,
    ln1: Vec<LnCache<S>>,
    u: Vec<S>,
    ffn: Vec<FfCache<S>>,
    ln2: Vec<LnCache<S>>,
}

impl<S: Real> CoordBlock<S> {
    fn new(dim: usize, heads: usize, ln_eps: f64, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(dim, heads, std, rng),
            ln1: LayerNorm::new(dim, ln_eps),
            ffn: FeedForward::new(dim, 4 * dim, std, rng),
            ln2: LayerNorm::new(dim, ln_eps),
        }
    }

    /// Post-norm block: `u = LN(x + attn(x))`, `y = LN(u + ffn(u))`,
    /// attention without a causal mask.
    fn forward(&self, x: &[S], t: usize) -> (Vec<S>, CoordBlockCache<S>) {
        let h = self.ln1.dim;
        let (a, attn_cache) = self.attn.forward(x, t, false);
        let mut u = vec![S::zero(); t * h];
        let mut ln1_caches = Vec::with_capacity(t);
        for i in 0..t {
            let pre: Vec<S> = (0..h).map(|d| x[i * h + d] + a[i * h + d]).collect();
            let (y, c) = self.ln1.forward(&pre);
            u[i * h..(i + 1) * h].copy_from_slice(&y);
            ln1_caches.push(c);
        }
        let mut y = vec![S::zero(); t * h];
        let mut ffn_caches = Vec::with_capacity(t);
        let mut ln2_caches = Vec::with_capacity(t);
        for i in 0..t {
            let ui = &u[i * h..(i + 1) * h];
            let (f, fc) = self.ffn.forward(ui);
            let pre: Vec<S> = (0..h).map(|d| ui[d] + f[d]).collect();
            let (yi, c) = self.ln2.forward(&pre);
            y[i * h..(i + 1) * h].copy_from_slice(&yi);
            ffn_caches.push(fc);
            ln2_caches.push(c);
        }
        (
            y,
            CoordBlockCache {
                x_in: x.to_vec(),
                attn: attn_cache,
                ln1: ln1_caches,
                u,
                ffn: ffn_caches,
                ln2: ln2_caches,
            },
        )
    }

    fn backward(&mut self, cache: &CoordBlockCache<S>, dy: &[S], t: usize) -> Vec<S> {
        let h = self.ln1.dim;
        let mut du = vec![S::zero(); t * h];
        for i in 0..t {
            let mut d_pre = vec![S::zero(); h];
            self.ln2
                .backward(&cache.ln2[i], &dy[i * h..(i + 1) * h], &mut d_pre);
            // pre = u + ffn(u): residual plus the ffn path.
            let ui = &cache.u[i * h..(i + 1) * h];
            let dui = &mut du[i * h..(i + 1) * h];
            for d in 0..h {
                dui[d] = dui[d] + d_pre[d];
            }
            self.ffn.backward(ui, &cache.ffn[i], &d_pre, dui);
        }
        let mut d_pre1 = vec![S::zero(); t * h];
        for i in 0..t {
            self.ln1.backward(
                &cache.ln1[i],
                &du[i * h..(i + 1) * h],
                &mut d_pre1[i * h..(i + 1) * h],
            );
        }
        let mut dx = d_pre1.clone();
        self.attn.backward(&cache.x_in, &cache.attn, &d_pre1, &mut dx);
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut ps = self.attn.params_mut();
        ps.extend(self.ln1.params_mut());
        ps.extend(self.ffn.params_mut());
        ps.extend(self.ln2.params_mut());
        ps
    }
}

/// Trainable coordinator weights: two cluster embeddings, the transformer
/// blocks, and the three heads.
#[derive(Debug, Clone)]
pub struct CoordinatorParams<S> {
    pub hidden_dim: usize,
    pub blocks_n: usize,
    pub heads: usize,
    pub max_gen_len: usize,
    pub ln_eps: f64,
    c_pos: Param<S>,
    c_neg: Param<S>,
    blocks: Vec<CoordBlock<S>>,
    ff_w: Linear<S>,
    ff_v: Linear<S>,
    ff_z: Linear<S>,
}

/// Per-step coordinator outputs: simplex weights over each set, the raw
/// scalar `z`, and `eta(z)`.
#[derive(Debug, Clone)]
pub struct CoordinatorStepOutput<S> {
    pub w: Vec<S>,
    pub v: Vec<S>,
    pub z: S,
    pub eta: S,
}

/// Forward activations needed by [`CoordinatorParams::backward`].
pub struct CoordCache<S> {
    p: usize,
    n: usize,
    blocks: Vec<CoordBlockCache<S>>,
    xn: Vec<S>,
    pooled: Vec<S>,
    w: Vec<S>,
    v: Vec<S>,
}

impl<S: Real> CoordinatorParams<S> {
    pub fn init(cfg: &CoordinatorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let std = cfg.init_std;
        let mut c_pos = Param::randn(h, 1, std, rng);
        let mut c_neg = Param::randn(h, 1, std, rng);
        // Cluster embeddings behave like embeddings, not weight matrices.
        c_pos.decay = false;
        c_neg.decay = false;
        Ok(Self {
            hidden_dim: h,
            blocks_n: cfg.blocks,
            heads: cfg.heads,
            max_gen_len: cfg.max_gen_len,
            ln_eps: cfg.ln_eps,
            c_pos,
            c_neg,
            blocks: (0..cfg.blocks)
                .map(|_| CoordBlock::new(h, cfg.heads, cfg.ln_eps, std, rng))
                .collect(),
            ff_w: Linear::new(h, 1, std, rng),
            ff_v: Linear::new(h, 1, std, rng),
            ff_z: Linear::new(h, 1, std, rng),
        })
    }

    pub fn zeroed(cfg: &CoordinatorConfig) -> Result<Self> {
        let mut rng = crate::rng::substream(0, "zeroed");
        let mut params = Self::init(cfg, &mut rng)?;
        for p in params.params_mut() {
            p.w.iter_mut().for_each(|w| *w = S::zero());
        }
        Ok(params)
    }

    pub fn config(&self) -> CoordinatorConfig {
        CoordinatorConfig {
            blocks: self.blocks_n,
            heads: self.heads,
            hidden_dim: self.hidden_dim,
            ln_eps: self.ln_eps,
            init_std: 0.0,
            max_gen_len: self.max_gen_len,
        }
    }

    /// Checkpoint/optimizer order: cluster embeddings, per block
    /// (attention q/k/v/o, ln1, ffn, ln2), then the w/v/z heads.
    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut ps = vec![&mut self.c_pos, &mut self.c_neg];
        for block in &mut self.blocks {
            ps.extend(block.params_mut());
        }
        ps.extend(self.ff_w.params_mut());
        ps.extend(self.ff_v.params_mut());
        ps.extend(self.ff_z.params_mut());
        ps
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// One coordinator pass over the P+N hidden states.
    pub fn forward(
        &self,
        pos_hidden: &[Vec<S>],
        neg_hidden: &[Vec<S>],
    ) -> Result<(CoordinatorStepOutput<S>, CoordCache<S>)> {
        let h = self.hidden_dim;
        let p = pos_hidden.len();
        let n = neg_hidden.len();
        if p == 0 {
            return Err(Error::EmptyPositiveSet("coordinator input".into()));
        }
        for hv in pos_hidden.iter().chain(neg_hidden.iter()) {
            if hv.len() != h {
                return Err(Error::DimensionMismatch {
                    expected: h,
                    got: hv.len(),
                });
            }
        }

        let t = p + n;
        let mut x = vec![S::zero(); t * h];
        for (i, hv) in pos_hidden.iter().enumerate() {
            for d in 0..h {
                x[i * h + d] = hv[d] + self.c_pos.w[d];
            }
        }
        for (i, hv) in neg_hidden.iter().enumerate() {
            for d in 0..h {
                x[(p + i) * h + d] = hv[d] + self.c_neg.w[d];
            }
        }

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, t);
            x = next;
            block_caches.push(cache);
        }
        let xn = x;

        let mut w: Vec<S> = (0..p)
            .map(|i| self.ff_w.forward(&xn[i * h..(i + 1) * h])[0])
            .collect();
        softmax_in_place(&mut w);
        let mut v: Vec<S> = (0..n)
            .map(|i| self.ff_v.forward(&xn[(p + i) * h..(p + i + 1) * h])[0])
            .collect();
        if n > 0 {
            softmax_in_place(&mut v);
        }

        let inv_t = S::one() / S::from_usize(t);
        let mut pooled = vec![S::zero(); h];
        for i in 0..t {
            for d in 0..h {
                pooled[d] = pooled[d] + xn[i * h + d] * inv_t;
            }
        }
        let z = self.ff_z.forward(&pooled)[0];

        Ok((
            CoordinatorStepOutput {
                w: w.clone(),
                v: v.clone(),
                z,
                eta: eta(z),
            },
            CoordCache {
                p,
                n,
                blocks: block_caches,
                xn,
                pooled,
                w,
                v,
            },
        ))
    }

    /// Accumulates gradients for one step given `dL/dw`, `dL/dv` (both with
    /// respect to the post-softmax weights), and `dL/dz`.
    pub fn backward(&mut self, cache: &CoordCache<S>, d_w: &[S], d_v: &[S], d_z: S) {
        let h = self.hidden_dim;
        let (p, n) = (cache.p, cache.n);
        let t = p + n;

        let mut d_xn = vec![S::zero(); t * h];

        let mut d_w_logits = vec![S::zero(); p];
        softmax_backward(&cache.w, d_w, &mut d_w_logits);
        for i in 0..p {
            self.ff_w.backward(
                &cache.xn[i * h..(i + 1) * h],
                &[d_w_logits[i]],
                &mut d_xn[i * h..(i + 1) * h],
            );
        }
        if n > 0 {
            let mut d_v_logits = vec![S::zero(); n];
            softmax_backward(&cache.v, d_v, &mut d_v_logits);
            for i in 0..n {
                self.ff_v.backward(
                    &cache.xn[(p + i) * h..(p + i + 1) * h],
                    &[d_v_logits[i]],
                    &mut d_xn[(p + i) * h..(p + i + 1) * h],
                );
            }
        }

        let mut d_pooled = vec![S::zero(); h];
        self.ff_z.backward(&cache.pooled, &[d_z], &mut d_pooled);
        let inv_t = S::one() / S::from_usize(t);
        for i in 0..t {
            for d in 0..h {
                d_xn[i * h + d] = d_xn[i * h + d] + d_pooled[d] * inv_t;
            }
        }

        let mut dx = d_xn;
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = block.backward(bc, &dx, t);
        }

        for i in 0..p {
            for d in 0..h {
                self.c_pos.g[d] = self.c_pos.g[d] + dx[i * h + d];
            }
        }
        for i in 0..n {
            for d in 0..h {
                self.c_neg.g[d] = self.c_neg.g[d] + dx[(p + i) * h + d];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Contrastive aggregation
// ---------------------------------------------------------------------------

/// Merged next-token distribution plus the bookkeeping the losses need:
/// the normalizer `C`, the survival mask of the `[.]+` truncation, and
/// whether the positive-only fallback fired.
#[derive(Debug, Clone)]
pub struct AggregatedDistribution<S> {
    pub probs: Vec<S>,
    pub normalizer: S,
    pub mask: Vec<bool>,
    pub fallback_used: bool,
}

const FALLBACK_THRESHOLD: f64 = 1e-12;

fn weighted_sum<S: Real>(weights: &[S], dists: &[Vec<S>], out: &mut [S]) {
    for (wi, dist) in weights.iter().zip(dists) {
        for (o, p) in out.iter_mut().zip(dist) {
            *o = *o + *wi * *p;
        }
    }
}

fn check_same_vocab<S>(pos: &[Vec<S>], neg: &[Vec<S>]) -> Result<usize> {
    let mut dims = pos.iter().chain(neg.iter()).map(|d| d.len());
    let v = dims.next().ok_or(Error::EmptyPositiveSet("aggregate".into()))?;
    for d in dims {
        if d != v {
            return Err(Error::VocabMismatch {
                expected: v,
                got: d,
            });
        }
    }
    Ok(v)
}

/// `p = [ sum_i w_i pos_i - eta * sum_i v_i neg_i ]+ / C`. Tokens driven
/// negative are zeroed and `C` renormalizes the survivors; if essentially no
/// mass survives the positive-only weighted average is returned instead with
/// `fallback_used` set.
pub fn aggregate<S: Real>(
    step: &CoordinatorStepOutput<S>,
    pos_dists: &[Vec<S>],
    neg_dists: &[Vec<S>],
) -> Result<AggregatedDistribution<S>> {
    let v = check_same_vocab(pos_dists, neg_dists)?;
    let mut raw = vec![S::zero(); v];
    weighted_sum(&step.w, pos_dists, &mut raw);
    if !neg_dists.is_empty() {
        let mut neg_sum = vec![S::zero(); v];
        weighted_sum(&step.v, neg_dists, &mut neg_sum);
        for (r, ns) in raw.iter_mut().zip(&neg_sum) {
            *r = *r - step.eta * *ns;
        }
    }
    let mask: Vec<bool> = raw.iter().map(|r| *r > S::zero()).collect();
    finish_aggregate(step, pos_dists, raw, mask)
}

/// Re-evaluates the aggregation with a fixed truncation mask and fallback
/// choice; used when checking gradients against finite differences, where
/// the piecewise-constant mask must not flip between evaluations.
pub fn aggregate_frozen<S: Real>(
    step: &CoordinatorStepOutput<S>,
    pos_dists: &[Vec<S>],
    neg_dists: &[Vec<S>],
    mask: &[bool],
    fallback_used: bool,
) -> Result<AggregatedDistribution<S>> {
    let v = check_same_vocab(pos_dists, neg_dists)?;
    if fallback_used {
        let mut probs = vec![S::zero(); v];
        weighted_sum(&step.w, pos_dists, &mut probs);
        return Ok(AggregatedDistribution {
            probs,
            normalizer: S::zero(),
            mask: vec![true; v],
            fallback_used: true,
        });
    }
    let mut raw = vec![S::zero(); v];
    weighted_sum(&step.w, pos_dists, &mut raw);
    if !neg_dists.is_empty() {
        let mut neg_sum = vec![S::zero(); v];
        weighted_sum(&step.v, neg_dists, &mut neg_sum);
        for (r, ns) in raw.iter_mut().zip(&neg_sum) {
            *r = *r - step.eta * *ns;
        }
    }
    let c = raw
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold(S::zero(), |a, (r, _)| a + *r);
    let probs = raw
        .iter()
        .zip(mask)
        .map(|(r, m)| if *m { *r / c } else { S::zero() })
        .collect();
    Ok(AggregatedDistribution {
        probs,
        normalizer: c,
        mask: mask.to_vec(),
        fallback_used: false,
    })
}

fn finish_aggregate<S: Real>(
    step: &CoordinatorStepOutput<S>,
    pos_dists: &[Vec<S>],
    raw: Vec<S>,
    mask: Vec<bool>,
) -> Result<AggregatedDistribution<S>> {
    let c = raw
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .fold(S::zero(), |a, (r, _)| a + *r);
    if c <= S::from_f64(FALLBACK_THRESHOLD) {
        let mut probs = vec![S::zero(); raw.len()];
        weighted_sum(&step.w, pos_dists, &mut probs);
        return Ok(AggregatedDistribution {
            probs,
            normalizer: c,
            mask: vec![true; raw.len()],
            fallback_used: true,
        });
    }
    let probs = raw
        .iter()
        .zip(&mask)
        .map(|(r, m)| if *m { *r / c } else { S::zero() })
        .collect();
    Ok(AggregatedDistribution {
        probs,
        normalizer: c,
        mask,
        fallback_used: false,
    })
}

/// Backpropagates `dL/dprobs` through the aggregation, treating the
/// truncation mask as constant. Returns `(dL/dw, dL/dv, dL/deta)`.
pub fn aggregate_backward<S: Real>(
    step: &CoordinatorStepOutput<S>,
    pos_dists: &[Vec<S>],
    neg_dists: &[Vec<S>],
    agg: &AggregatedDistribution<S>,
    dprobs: &[S],
) -> (Vec<S>, Vec<S>, S) {
    let v = agg.probs.len();
    if agg.fallback_used {
        let dw = pos_dists
            .iter()
            .map(|dist| {
                dprobs
                    .iter()
                    .zip(dist)
                    .fold(S::zero(), |a, (g, p)| a + *g * *p)
            })
            .collect();
        return (dw, vec![S::zero(); neg_dists.len()], S::zero());
    }

    let dot = dprobs
        .iter()
        .zip(&agg.probs)
        .fold(S::zero(), |a, (g, p)| a + *g * *p);
    let inv_c = S::one() / agg.normalizer;
    let mut draw = vec![S::zero(); v];
    for j in 0..v {
        if agg.mask[j] {
            draw[j] = (dprobs[j] - dot) * inv_c;
        }
    }

    let dw = pos_dists
        .iter()
        .map(|dist| {
            draw.iter()
                .zip(dist)
                .fold(S::zero(), |a, (d, p)| a + *d * *p)
        })
        .collect();

    let mut deta = S::zero();
    let dv = if neg_dists.is_empty() {
        Vec::new()
    } else {
        let mut neg_sum = vec![S::zero(); v];
        weighted_sum(&step.v, neg_dists, &mut neg_sum);
        deta = -draw
            .iter()
            .zip(&neg_sum)
            .fold(S::zero(), |a, (d, ns)| a + *d * *ns);
        neg_dists
            .iter()
            .map(|dist| {
                -step.eta
                    * draw
                        .iter()
                        .zip(dist)
                        .fold(S::zero(), |a, (d, p)| a + *d * *p)
            })
            .collect()
    };
    (dw, dv, deta)
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub max_len: usize,
    /// Replace `w` with the uniform distribution over the positive set.
    pub force_uniform_w: bool,
    /// Replace `eta` with zero, silencing the negative set.
    pub force_eta_zero: bool,
    /// Drop the negative set entirely (the null-neg ablation).
    pub null_neg: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_len: 20,
            force_uniform_w: false,
            force_eta_zero: false,
            null_neg: false,
        }
    }
}

/// Everything recorded at one decode step; the substrate for all losses.
#[derive(Debug, Clone)]
pub struct StepRecord<S> {
    pub pos_hidden: Vec<Vec<S>>,
    pub neg_hidden: Vec<Vec<S>>,
    pub pos_dists: Vec<Vec<S>>,
    pub neg_dists: Vec<Vec<S>>,
    pub coord: CoordinatorStepOutput<S>,
    pub agg: AggregatedDistribution<S>,
    pub chosen: TokenId,
    pub log_prob: S,
}

#[derive(Debug, Clone)]
pub struct DecodeTrace<S> {
    pub steps: Vec<StepRecord<S>>,
    /// All chosen tokens, including a trailing `<eos>` when one was decoded.
    pub tokens: Vec<TokenId>,
    /// The question: chosen tokens with the trailing `<eos>` stripped.
    pub question: Vec<TokenId>,
}

impl<S> DecodeTrace<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Decodes a common question for the instance with the coordinator merging
/// the per-document distributions at every step.
pub fn decode_common<S: Real>(
    gen: &GeneratorParams<S>,
    coord: &CoordinatorParams<S>,
    inst: &ContrastiveInstance,
    vocab: &Vocabulary,
    opts: &DecodeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<DecodeTrace<S>> {
    decode_with_policy(gen, Some(coord), inst, vocab, opts, rng)
}

/// Shared decode loop. With `coord = None` the merge is the uniform average
/// of the positive-set distributions (the training-free multi-source
/// baseline); both paths run the same aggregation code so the forced-uniform
/// coordinator and the baseline agree bit for bit.
pub(crate) fn decode_with_policy<S: Real>(
    gen: &GeneratorParams<S>,
    coord: Option<&CoordinatorParams<S>>,
    inst: &ContrastiveInstance,
    vocab: &Vocabulary,
    opts: &DecodeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<DecodeTrace<S>> {
    let p = inst.positive_docs.len();
    if p == 0 {
        return Err(Error::EmptyPositiveSet(inst.id.clone()));
    }
    if let Some(c) = coord {
        if c.hidden_dim != gen.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: gen.hidden_dim,
                got: c.hidden_dim,
            });
        }
    }
    let use_neg = coord.is_some() && !opts.null_neg;
    let neg_docs: &[crate::corpus::Document] = if use_neg {
        &inst.negative_docs
    } else {
        &[]
    };

    let mut contexts: Vec<Vec<TokenId>> = Vec::with_capacity(p + neg_docs.len());
    for doc in inst.positive_docs.iter().chain(neg_docs.iter()) {
        let tokens = if doc.tokens.is_empty() {
            vocab.tokenize(&doc.text)
        } else {
            doc.tokens.clone()
        };
        if tokens.is_empty() {
            return Err(Error::EmptyDocument(doc.id.clone()));
        }
        let mut ctx = truncate_context(&tokens, gen.max_context, opts.max_len)?;
        ctx.push(SEP);
        contexts.push(ctx);
    }

    let uniform_w = vec![S::one() / S::from_usize(p); p];
    let mut steps = Vec::new();
    let mut tokens = Vec::new();
    for _ in 0..opts.max_len {
        let outputs = fan_out_steps(gen, &contexts)?;
        let (pos_out, neg_out) = outputs.split_at(p);
        let pos_hidden: Vec<Vec<S>> = pos_out.iter().map(|o| o.hidden.clone()).collect();
        let neg_hidden: Vec<Vec<S>> = neg_out.iter().map(|o| o.hidden.clone()).collect();
        let pos_dists: Vec<Vec<S>> = pos_out.iter().map(|o| o.dist.clone()).collect();
        let neg_dists: Vec<Vec<S>> = neg_out.iter().map(|o| o.dist.clone()).collect();

        let mut step_out = match coord {
            Some(c) => c.forward(&pos_hidden, &neg_hidden)?.0,
            None => CoordinatorStepOutput {
                w: uniform_w.clone(),
                v: Vec::new(),
                z: S::zero(),
                eta: S::zero(),
            },
        };
        if opts.force_uniform_w {
            step_out.w = uniform_w.clone();
        }
        if opts.force_eta_zero {
            step_out.eta = S::zero();
        }

        let agg = aggregate(&step_out, &pos_dists, &neg_dists)?;
        let chosen = match opts.mode {
            DecodeMode::Greedy => argmax_token(&agg.probs),
            DecodeMode::Sample { temperature } => {
                sample_token(&agg.probs, temperature, rng)
            }
        };
        let prob = agg.probs[chosen as usize];
        if prob <= S::zero() {
            return Err(Error::ZeroMassToken { token: chosen });
        }
        let log_prob = prob.ln();

        steps.push(StepRecord {
            pos_hidden,
            neg_hidden,
            pos_dists,
            neg_dists,
            coord: step_out,
            agg,
            chosen,
            log_prob,
        });
        tokens.push(chosen);
        if chosen == EOS {
            break;
        }
        for ctx in contexts.iter_mut() {
            ctx.push(chosen);
        }
    }

    let question = match tokens.last() {
        Some(&t) if t == EOS => tokens[..tokens.len() - 1].to_vec(),
        _ => tokens.clone(),
    };
    Ok(DecodeTrace {
        steps,
        tokens,
        question,
    })
}

fn sample_token<S: Real>(probs: &[S], temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    if (temperature - 1.0).abs() < 1e-12 {
        return categorical(rng, probs) as TokenId;
    }
    // Rescale by the max before exponentiating so low temperatures cannot
    // underflow every weight to zero.
    let max = probs.iter().fold(S::zero(), |a, p| a.max(*p));
    let inv_t = S::from_f64(1.0 / temperature);
    let weights: Vec<S> = probs
        .iter()
        .map(|p| {
            if *p > S::zero() {
                (*p / max).powf(inv_t)
            } else {
                S::zero()
            }
        })
        .collect();
    categorical(rng, &weights) as TokenId
}

/// Runs `generator_step` over many contexts, splitting across two threads
/// when the fan-out is wide enough. Outputs are collected in input order, so
/// results are identical to the sequential path.
fn fan_out_steps<S: Real>(
    gen: &GeneratorParams<S>,
    contexts: &[Vec<TokenId>],
) -> Result<Vec<GeneratorStepOutput<S>>> {
    if contexts.len() < 6 {
        return contexts.iter().map(|c| generator_step(gen, c)).collect();
    }
    let mid = contexts.len() / 2;
    let (front, back) = contexts.split_at(mid);
    std::thread::scope(|scope| {
        let handle = scope.spawn(move || {
            back.iter()
                .map(|c| generator_step(gen, c))
                .collect::<Result<Vec<_>>>()
        });
        let mut out = front
            .iter()
            .map(|c| generator_step(gen, c))
            .collect::<Result<Vec<_>>>()?;
        out.extend(handle.join().expect("generator thread panicked")?);
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::generator::GeneratorConfig;
    use crate::rng::substream;

    fn random_hidden(n: usize, h: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = substream(seed, "hidden");
        (0..n)
            .map(|_| (0..h).map(|_| crate::rng::normal(&mut rng, 1.0)).collect())
            .collect()
    }

    fn random_dists(n: usize, v: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = substream(seed, "dists");
        (0..n)
            .map(|_| {
                let mut logits: Vec<f64> =
                    (0..v).map(|_| crate::rng::normal(&mut rng, 1.0)).collect();
                softmax_in_place(&mut logits);
                logits
            })
            .collect()
    }

    #[test]
    fn eta_fixed_points_and_asymptotes() {
        assert_eq!(eta(0.0f64), -0.25);
        assert!(eta(500.0f64) > -1.0);
        assert!(eta(500.0f64) < -0.999);
        assert!(eta(-500.0f64) < 0.5);
        assert!(eta(-500.0f64) > 0.499);
    }

    #[test]
    fn eta_is_monotone_decreasing() {
        let mut rng = substream(1, "eta");
        let mut zs: Vec<f64> = (0..10_000)
            .map(|_| crate::rng::normal::<f64>(&mut rng, 8.0))
            .collect();
        zs.sort_by(f64::total_cmp);
        for pair in zs.windows(2) {
            assert!(eta(pair[0]) >= eta(pair[1]));
        }
    }

    #[test]
    fn eta_prime_matches_finite_differences() {
        for &z in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (eta(z + h) - eta(z - h)) / (2.0 * h);
            assert!((fd - eta_prime(z)).abs() < 1e-6, "z={z}");
        }
    }

    #[test]
    fn forward_outputs_are_simplices() {
        let cfg = CoordinatorConfig {
            hidden_dim: 16,
            heads: 2,
            blocks: 2,
            ..CoordinatorConfig::default()
        };
        let coord =
            CoordinatorParams::<f64>::init(&cfg, &mut substream(2, "init")).unwrap();
        let pos = random_hidden(3, 16, 3);
        let neg = random_hidden(4, 16, 4);
        let (out, _) = coord.forward(&pos, &neg).unwrap();
        assert!((out.w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((out.v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(out.w.iter().chain(out.v.iter()).all(|&x| x >= 0.0));
        assert_eq!(out.eta, eta(out.z));
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let cfg = CoordinatorConfig {
            hidden_dim: 8,
            heads: 2,
            blocks: 1,
            ..CoordinatorConfig::default()
        };
        let coord =
            CoordinatorParams::<f64>::init(&cfg, &mut substream(5, "init")).unwrap();
        let mut pos = random_hidden(4, 8, 6);
        let neg = random_hidden(2, 8, 7);
        let (before, _) = coord.forward(&pos, &neg).unwrap();
        pos.swap(1, 3);
        let (after, _) = coord.forward(&pos, &neg).unwrap();
        assert!((before.w[1] - after.w[3]).abs() < 1e-12);
        assert!((before.w[3] - after.w[1]).abs() < 1e-12);
        assert!((before.w[0] - after.w[0]).abs() < 1e-12);
        assert!((before.z - after.z).abs() < 1e-12);
        for (a, b) in before.v.iter().zip(&after.v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_pure() {
        let cfg = CoordinatorConfig {
            hidden_dim: 8,
            heads: 2,
            blocks: 1,
            ..CoordinatorConfig::default()
        };
        let coord =
            CoordinatorParams::<f64>::init(&cfg, &mut substream(8, "init")).unwrap();
        let pos = random_hidden(2, 8, 9);
        let neg = random_hidden(2, 8, 10);
        let (a, _) = coord.forward(&pos, &neg).unwrap();
        let (b, _) = coord.forward(&pos, &neg).unwrap();
        assert_eq!(a.w, b.w);
        assert_eq!(a.v, b.v);
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn forward_n_zero_gives_empty_v() {
        let cfg = CoordinatorConfig {
            hidden_dim: 8,
            heads: 2,
            blocks: 1,
            ..CoordinatorConfig::default()
        };
        let coord =
            CoordinatorParams::<f64>::init(&cfg, &mut substream(8, "init")).unwrap();
        let pos = random_hidden(3, 8, 9);
        let (out, _) = coord.forward(&pos, &[]).unwrap();
        assert!(out.v.is_empty());
        assert!(out.eta.is_finite());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cfg = CoordinatorConfig {
            hidden_dim: 8,
            heads: 2,
            blocks: 1,
            ..CoordinatorConfig::default()
        };
        let coord =
            CoordinatorParams::<f64>::init(&cfg, &mut substream(8, "init")).unwrap();
        let pos = random_hidden(2, 6, 9);
        assert!(matches!(
            coord.forward(&pos, &[]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn step_with(w: Vec<f64>, v: Vec<f64>, eta_val: f64) -> CoordinatorStepOutput<f64> {
        CoordinatorStepOutput {
            w,
            v,
            z: 0.0,
            eta: eta_val,
        }
    }

    #[test]
    fn aggregate_with_zero_eta_ignores_negatives() {
        let pos = random_dists(3, 5, 11);
        let neg = random_dists(2, 5, 12);
        let w = vec![0.5, 0.3, 0.2];
        let agg =
            aggregate(&step_with(w.clone(), vec![0.6, 0.4], 0.0), &pos, &neg).unwrap();
        let mut expected = vec![0.0; 5];
        weighted_sum(&w, &pos, &mut expected);
        let norm: f64 = expected.iter().sum();
        for (a, e) in agg.probs.iter().zip(&expected) {
            assert!((a - e / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_hand_worked_fixture() {
        let pos = vec![vec![0.6, 0.3, 0.1]];
        let neg = vec![vec![0.1, 0.3, 0.6]];
        let agg = aggregate(&step_with(vec![1.0], vec![1.0], 0.5), &pos, &neg).unwrap();
        assert!((agg.normalizer - 0.7).abs() < 1e-12);
        assert!((agg.probs[0] - 0.55 / 0.7).abs() < 1e-12);
        assert!((agg.probs[1] - 0.15 / 0.7).abs() < 1e-12);
        assert_eq!(agg.probs[2], 0.0);
        assert!(!agg.fallback_used);
        assert_eq!(agg.mask, vec![true, true, false]);
    }

    #[test]
    fn aggregate_identical_sets_at_max_eta_keeps_the_distribution() {
        let dist = vec![0.2, 0.5, 0.3];
        let agg = aggregate(
            &step_with(vec![1.0], vec![1.0], 0.5),
            &[dist.clone()],
            &[dist.clone()],
        )
        .unwrap();
        assert!(!agg.fallback_used);
        for (a, d) in agg.probs.iter().zip(&dist) {
            assert!((a - d).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_vocab_mismatch_is_an_error() {
        let pos = vec![vec![1.0, 0.0]];
        let neg = vec![vec![0.5, 0.25, 0.25]];
        assert!(matches!(
            aggregate(&step_with(vec![1.0], vec![1.0], 0.2), &pos, &neg),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn argmax_is_invariant_to_the_normalization() {
        // Dividing the surviving mass by C > 0 cannot reorder tokens, so the
        // greedy choice agrees between raw truncated weights and probs.
        let mut rng = substream(21, "argmax");
        for round in 0..200u64 {
            let pos = random_dists(3, 7, round);
            let neg = random_dists(2, 7, round + 1000);
            let mut w = random_dists(1, 3, round + 2000).remove(0);
            softmax_in_place(&mut w);
            let mut v = random_dists(1, 2, round + 3000).remove(0);
            softmax_in_place(&mut v);
            let z: f64 = rng.random_range(-1.5..1.5);
            let step = step_with(w.clone(), v.clone(), eta(z));
            let agg = aggregate(&step, &pos, &neg).unwrap();
            if agg.fallback_used {
                continue;
            }
            let mut raw = vec![0.0; 7];
            weighted_sum(&step.w, &pos, &mut raw);
            let mut neg_sum = vec![0.0; 7];
            weighted_sum(&step.v, &neg, &mut neg_sum);
            for (r, n) in raw.iter_mut().zip(&neg_sum) {
                *r -= step.eta * *n;
            }
            let truncated: Vec<f64> = raw.iter().map(|r| r.max(0.0)).collect();
            assert_eq!(
                crate::generator::argmax_token(&truncated),
                crate::generator::argmax_token(&agg.probs)
            );
        }
    }

    #[test]
    fn default_generation_length_is_twenty() {
        assert_eq!(CoordinatorConfig::default().max_gen_len, 20);
        assert_eq!(DecodeOptions::default().max_len, 20);
    }

    #[test]
    fn aggregate_fallback_on_degenerate_weights() {
        // All-zero w only occurs with malformed inputs, but the fallback
        // contract still applies: flag it and return the positive-only sum.
        let pos = vec![vec![0.5, 0.5]];
        let agg = aggregate(&step_with(vec![0.0], vec![], 0.0), &pos, &[]).unwrap();
        assert!(agg.fallback_used);
        assert_eq!(agg.probs, vec![0.0, 0.0]);
    }

    fn toy_generator() -> (GeneratorParams<f64>, Vocabulary) {
        let vocab = Vocabulary::build(
            &["the lido of the maro with kesu is here".to_string()],
            32,
        )
        .unwrap();
        let cfg = GeneratorConfig {
            hidden_dim: 16,
            layers: 1,
            heads: 2,
            max_context: 48,
            ..GeneratorConfig::default()
        };
        let params =
            GeneratorParams::init(vocab.size(), &cfg, &mut substream(42, "gen")).unwrap();
        (params, vocab)
    }

    fn toy_instance() -> ContrastiveInstance {
        ContrastiveInstance {
            id: "t0".into(),
            positive_docs: vec![
                Document::new("p0", "the lido of the maro with kesu"),
                Document::new("p1", "the maro is lido of the kesu"),
            ],
            negative_docs: vec![
                Document::new("n0", "the kesu is here with the lido"),
                Document::new("n1", "here is the maro of the kesu"),
            ],
            oracle_pos_question: Some("lido of the maro".into()),
            oracle_neg_question: Some("kesu with the lido".into()),
        }
    }

    #[test]
    fn greedy_decode_is_deterministic_and_bounded() {
        let (gen, vocab) = toy_generator();
        let coord = CoordinatorParams::<f64>::init(
            &CoordinatorConfig {
                hidden_dim: 16,
                heads: 2,
                blocks: 1,
                max_gen_len: 7,
                ..CoordinatorConfig::default()
            },
            &mut substream(1, "coord"),
        )
        .unwrap();
        let inst = toy_instance();
        let opts = DecodeOptions {
            max_len: 7,
            ..DecodeOptions::default()
        };
        let mut rng = substream(0, "rollout");
        let a = decode_common(&gen, &coord, &inst, &vocab, &opts, &mut rng).unwrap();
        let b = decode_common(&gen, &coord, &inst, &vocab, &opts, &mut rng).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(a.len() <= 7);
        let last_is_eos = *a.tokens.last().unwrap() == EOS;
        assert!(last_is_eos || a.len() == 7);
        for step in &a.steps {
            let sum: f64 = step.agg.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn null_neg_reduces_to_positive_only_average() {
        let (gen, vocab) = toy_generator();
        let coord = CoordinatorParams::<f64>::init(
            &CoordinatorConfig {
                hidden_dim: 16,
                heads: 2,
                blocks: 1,
                max_gen_len: 5,
                ..CoordinatorConfig::default()
            },
            &mut substream(2, "coord"),
        )
        .unwrap();
        let inst = toy_instance();
        let opts = DecodeOptions {
            max_len: 5,
            null_neg: true,
            ..DecodeOptions::default()
        };
        let mut rng = substream(0, "rollout");
        let trace = decode_common(&gen, &coord, &inst, &vocab, &opts, &mut rng).unwrap();
        for step in &trace.steps {
            assert!(step.neg_dists.is_empty());
            let mut expected = vec![0.0; gen.vocab_size];
            weighted_sum(&step.coord.w, &step.pos_dists, &mut expected);
            let norm: f64 = expected.iter().sum();
            for (a, e) in step.agg.probs.iter().zip(&expected) {
                assert!((a - e / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forced_uniform_matches_uniform_policy_bit_for_bit() {
        let (gen, vocab) = toy_generator();
        let coord = CoordinatorParams::<f64>::init(
            &CoordinatorConfig {
                hidden_dim: 16,
                heads: 2,
                blocks: 1,
                max_gen_len: 6,
                ..CoordinatorConfig::default()
            },
            &mut substream(3, "coord"),
        )
        .unwrap();
        let inst = toy_instance();
        let forced = DecodeOptions {
            max_len: 6,
            force_uniform_w: true,
            force_eta_zero: true,
            ..DecodeOptions::default()
        };
        let plain = DecodeOptions {
            max_len: 6,
            ..DecodeOptions::default()
        };
        let mut rng = substream(0, "rollout");
        let a = decode_common(&gen, &coord, &inst, &vocab, &forced, &mut rng).unwrap();
        let b =
            decode_with_policy(&gen, None, &inst, &vocab, &plain, &mut rng).unwrap();
        assert_eq!(a.tokens, b.tokens);
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.agg.probs, sb.agg.probs);
        }
    }
}
