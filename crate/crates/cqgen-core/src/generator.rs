//! Document-specific generator: a small causal self-attention language model
//! trained on `[document, <sep>, question, <eos>]` sequences and frozen while
//! the coordinator is trained.
//!
//! The per-step contract is [`generator_step`]: given a context it returns
//! the final-layer hidden state at the last position and the next-token
//! distribution. Training masks the loss to the tokens after the separator,
//! so the model is optimized purely as a conditional question generator.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Document, TokenId, Vocabulary, EOS, SEP};
use crate::error::{Error, Result};
use crate::nn::{
    softmax_in_place, AdamW, AttnCache, FeedForward, FfCache, LayerNorm, LnCache,
    MultiHeadAttention, Param,
};
use crate::rng::substream;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_context: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            max_context: 96,
            learning_rate: 1e-3,
            epochs: 30,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.layers == 0 || self.heads == 0 || self.max_context == 0 {
            return Err(Error::InvalidConfig(
                "generator dims, layers, heads, and max context must be at least 1".into(),
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

const INIT_STD: f64 = 0.02;
const WEIGHT_DECAY: f64 = 0.01;

#[derive(Debug, Clone)]
struct GenBlock<S> {
    ln1: LayerNorm<S>,
    attn: MultiHeadAttention<S>,
    ln2: LayerNorm<S>,
    ffn: FeedForward<S>,
}

struct BlockCache<S> {
    ln1: Vec<LnCache<S>>,
    a_in: Vec<S>,
    attn: AttnCache<S>,
    ln2: Vec<LnCache<S>>,
    f_in: Vec<S>,
    ffn: Vec<FfCache<S>>,
}

impl<S: Real> GenBlock<S> {
    fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim, 1e-5),
            attn: MultiHeadAttention::new(dim, heads, INIT_STD, rng),
            ln2: LayerNorm::new(dim, 1e-5),
            ffn: FeedForward::new(dim, 4 * dim, INIT_STD, rng),
        }
    }

    /// Pre-norm residual block: `x + attn(ln1(x))`, then `x + ffn(ln2(x))`.
    fn forward(&self, x: &[S], t: usize) -> (Vec<S>, BlockCache<S>) {
        let h = self.ln1.dim;
        let mut ln1_caches = Vec::with_capacity(t);
        let mut a_in = vec![S::zero(); t * h];
        for i in 0..t {
            let (y, c) = self.ln1.forward(&x[i * h..(i + 1) * h]);
            a_in[i * h..(i + 1) * h].copy_from_slice(&y);
            ln1_caches.push(c);
        }
        let (a_out, attn_cache) = self.attn.forward(&a_in, t, true);
        let x_mid: Vec<S> = x.iter().zip(&a_out).map(|(a, b)| *a + *b).collect();

        let mut ln2_caches = Vec::with_capacity(t);
        let mut f_in = vec![S::zero(); t * h];
        let mut ffn_caches = Vec::with_capacity(t);
        let mut x_out = x_mid.clone();
        for i in 0..t {
            let (y, c) = self.ln2.forward(&x_mid[i * h..(i + 1) * h]);
            f_in[i * h..(i + 1) * h].copy_from_slice(&y);
            ln2_caches.push(c);
            let (f, fc) = self.ffn.forward(&y);
            for d in 0..h {
                x_out[i * h + d] = x_out[i * h + d] + f[d];
            }
            ffn_caches.push(fc);
        }
        (
            x_out,
            BlockCache {
                ln1: ln1_caches,
                a_in,
                attn: attn_cache,
                ln2: ln2_caches,
                f_in,
                ffn: ffn_caches,
            },
        )
    }

    fn backward(&mut self, cache: &BlockCache<S>, dy: &[S], t: usize) -> Vec<S> {
        let h = self.ln1.dim;
        // Residual: dy reaches both x_mid directly and the ffn branch.
        let mut d_mid = dy.to_vec();
        for i in 0..t {
            let mut d_f_in = vec![S::zero(); h];
            self.ffn.backward(
                &cache.f_in[i * h..(i + 1) * h],
                &cache.ffn[i],
                &dy[i * h..(i + 1) * h],
                &mut d_f_in,
            );
            self.ln2
                .backward(&cache.ln2[i], &d_f_in, &mut d_mid[i * h..(i + 1) * h]);
        }
        let mut dx = d_mid.clone();
        let mut d_a_in = vec![S::zero(); t * h];
        self.attn
            .backward(&cache.a_in, &cache.attn, &d_mid, &mut d_a_in);
        for i in 0..t {
            self.ln1.backward(
                &cache.ln1[i],
                &d_a_in[i * h..(i + 1) * h],
                &mut dx[i * h..(i + 1) * h],
            );
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut ps = self.ln1.params_mut();
        ps.extend(self.attn.params_mut());
        ps.extend(self.ln2.params_mut());
        ps.extend(self.ffn.params_mut());
        ps
    }
}

/// Generator weights. Frozen (shared immutably) during coordinator training.
#[derive(Debug, Clone)]
pub struct GeneratorParams<S> {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_context: usize,
    tok_emb: Param<S>,
    pos_emb: Param<S>,
    blocks: Vec<GenBlock<S>>,
    final_ln: LayerNorm<S>,
    head: Param<S>,
}

/// Hidden state and next-token distribution for one decoding step.
#[derive(Debug, Clone)]
pub struct GeneratorStepOutput<S> {
    pub hidden: Vec<S>,
    pub dist: Vec<S>,
}

struct SeqCache<S> {
    blocks: Vec<BlockCache<S>>,
    final_ln: Vec<LnCache<S>>,
    hidden: Vec<S>,
    t: usize,
}

impl<S: Real> GeneratorParams<S> {
    pub fn init(vocab_size: usize, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        Ok(Self {
            vocab_size,
            hidden_dim: h,
            layers: cfg.layers,
            heads: cfg.heads,
            max_context: cfg.max_context,
            tok_emb: Param::randn(vocab_size, h, INIT_STD, rng),
            pos_emb: Param::randn(cfg.max_context, h, INIT_STD, rng),
            blocks: (0..cfg.layers)
                .map(|_| GenBlock::new(h, cfg.heads, rng))
                .collect(),
            final_ln: LayerNorm::new(h, 1e-5),
            head: Param::randn(vocab_size, h, INIT_STD, rng),
        })
    }

    /// Builds a generator with the layout of `cfg` and all-zero weights;
    /// used by the checkpoint loader.
    pub fn zeroed(vocab_size: usize, cfg: &GeneratorConfig) -> Result<Self> {
        let mut rng = substream(0, "zeroed");
        let mut params = Self::init(vocab_size, cfg, &mut rng)?;
        for p in params.params_mut() {
            p.w.iter_mut().for_each(|w| *w = S::zero());
        }
        Ok(params)
    }

    /// Checkpoint/optimizer parameter order: token embeddings, positional
    /// embeddings, per block (ln1, attention q/k/v/o, ln2, ffn), final
    /// layer norm, output head.
    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut ps = vec![&mut self.tok_emb, &mut self.pos_emb];
        for block in &mut self.blocks {
            ps.extend(block.params_mut());
        }
        ps.extend(self.final_ln.params_mut());
        ps.push(&mut self.head);
        ps
    }

    fn forward_hidden(&self, tokens: &[TokenId]) -> SeqCache<S> {
        let t = tokens.len();
        let h = self.hidden_dim;
        let mut x = vec![S::zero(); t * h];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = &self.tok_emb.w[tok as usize * h..(tok as usize + 1) * h];
            let pe = &self.pos_emb.w[i * h..(i + 1) * h];
            for d in 0..h {
                x[i * h + d] = te[d] + pe[d];
            }
        }
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, t);
            x = next;
            block_caches.push(cache);
        }
        let mut hidden = vec![S::zero(); t * h];
        let mut ln_caches = Vec::with_capacity(t);
        for i in 0..t {
            let (y, c) = self.final_ln.forward(&x[i * h..(i + 1) * h]);
            hidden[i * h..(i + 1) * h].copy_from_slice(&y);
            ln_caches.push(c);
        }
        SeqCache {
            blocks: block_caches,
            final_ln: ln_caches,
            hidden,
            t,
        }
    }

    fn logits_at(&self, hidden: &[S], pos: usize) -> Vec<S> {
        let h = self.hidden_dim;
        let hp = &hidden[pos * h..(pos + 1) * h];
        (0..self.vocab_size)
            .map(|j| {
                self.head.w[j * h..(j + 1) * h]
                    .iter()
                    .zip(hp)
                    .fold(S::zero(), |a, (w, x)| a + *w * *x)
            })
            .collect()
    }

    /// Mean cross-entropy of the tokens after position `sep_index` in the
    /// full sequence `tokens`, without touching gradients.
    pub fn masked_loss(&self, tokens: &[TokenId], sep_index: usize) -> f64 {
        let cache = self.forward_hidden(&tokens[..tokens.len() - 1]);
        let mut total = 0.0;
        let mut count = 0usize;
        for p in sep_index..cache.t {
            let mut logits = self.logits_at(&cache.hidden, p);
            softmax_in_place(&mut logits);
            let target = tokens[p + 1] as usize;
            total -= logits[target].as_f64().max(1e-300).ln();
            count += 1;
        }
        total / count as f64
    }

    /// Forward + backward + gradient accumulation for one sequence.
    /// Returns the mean masked cross-entropy.
    pub fn masked_loss_grad(&mut self, tokens: &[TokenId], sep_index: usize) -> f64 {
        let inputs = &tokens[..tokens.len() - 1];
        let cache = self.forward_hidden(inputs);
        let t = cache.t;
        let h = self.hidden_dim;
        let masked = (t - sep_index) as f64;
        let inv_m = S::from_f64(1.0 / masked);

        let mut loss = 0.0;
        let mut d_hidden = vec![S::zero(); t * h];
        for p in sep_index..t {
            let mut probs = self.logits_at(&cache.hidden, p);
            softmax_in_place(&mut probs);
            let target = tokens[p + 1] as usize;
            loss -= probs[target].as_f64().max(1e-300).ln();
            let hp = cache.hidden[p * h..(p + 1) * h].to_vec();
            for j in 0..self.vocab_size {
                let mut dlogit = probs[j] * inv_m;
                if j == target {
                    dlogit = dlogit - inv_m;
                }
                if dlogit == S::zero() {
                    continue;
                }
                let wrow = &self.head.w[j * h..(j + 1) * h];
                let grow = &mut self.head.g[j * h..(j + 1) * h];
                for d in 0..h {
                    grow[d] = grow[d] + dlogit * hp[d];
                    d_hidden[p * h + d] = d_hidden[p * h + d] + dlogit * wrow[d];
                }
            }
        }

        let mut dx = vec![S::zero(); t * h];
        for p in 0..t {
            self.final_ln.backward(
                &cache.final_ln[p],
                &d_hidden[p * h..(p + 1) * h],
                &mut dx[p * h..(p + 1) * h],
            );
        }
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = block.backward(bc, &dx, t);
        }
        for (i, &tok) in inputs.iter().enumerate() {
            let te = &mut self.tok_emb.g[tok as usize * h..(tok as usize + 1) * h];
            let pe = &mut self.pos_emb.g[i * h..(i + 1) * h];
            for d in 0..h {
                te[d] = te[d] + dx[i * h + d];
                pe[d] = pe[d] + dx[i * h + d];
            }
        }
        loss / masked
    }
}

/// Runs the generator over a context and returns the last position's hidden
/// state and next-token distribution. Pure: never mutates the params.
pub fn generator_step<S: Real>(
    params: &GeneratorParams<S>,
    context: &[TokenId],
) -> Result<GeneratorStepOutput<S>> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    if context.len() > params.max_context {
        return Err(Error::ContextTooLong {
            len: context.len(),
            max: params.max_context,
        });
    }
    let cache = params.forward_hidden(context);
    let last = cache.t - 1;
    let h = params.hidden_dim;
    let hidden = cache.hidden[last * h..(last + 1) * h].to_vec();
    let mut dist = params.logits_at(&cache.hidden, last);
    softmax_in_place(&mut dist);
    Ok(GeneratorStepOutput { hidden, dist })
}

/// Greedy argmax with ties broken toward the lowest token id.
pub fn argmax_token<S: Real>(dist: &[S]) -> TokenId {
    let mut best = 0usize;
    for (i, p) in dist.iter().enumerate().skip(1) {
        if *p > dist[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy single-document question generation from `[doc, <sep>]`.
pub fn generate_single<S: Real>(
    params: &GeneratorParams<S>,
    doc: &Document,
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<String> {
    let doc_tokens = vocab.tokenize(&doc.text);
    let mut context = truncate_context(&doc_tokens, params.max_context, max_len)?;
    context.push(SEP);
    let mut question = Vec::new();
    for _ in 0..max_len {
        let step = generator_step(params, &context)?;
        let token = argmax_token(&step.dist);
        if token == EOS {
            break;
        }
        question.push(token);
        context.push(token);
    }
    Ok(vocab.detokenize(&question))
}

/// Keeps the document tail so the tokens nearest the separator survive,
/// reserving room for the separator and `reserve` generated tokens.
pub fn truncate_context(
    doc_tokens: &[TokenId],
    max_context: usize,
    reserve: usize,
) -> Result<Vec<TokenId>> {
    let budget = max_context
        .checked_sub(1 + reserve)
        .filter(|b| *b > 0)
        .ok_or(Error::SequenceTooLong {
            question: reserve,
            max: max_context,
        })?;
    let start = doc_tokens.len().saturating_sub(budget);
    Ok(doc_tokens[start..].to_vec())
}

struct TrainSequence {
    tokens: Vec<TokenId>,
    sep_index: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training-set cross-entropy measured after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Sequences whose document head was cut to fit the context window.
    pub truncated_sequences: usize,
}

/// Fine-tunes a fresh generator on `(document, question)` pairs with
/// next-token cross-entropy masked to the tokens after the separator.
/// Deterministic given `cfg.seed`.
pub fn train_generator<S: Real>(
    pairs: &[(Document, String)],
    cfg: &GeneratorConfig,
    vocab: &Vocabulary,
) -> Result<(GeneratorParams<S>, TrainReport)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }

    let mut truncated = 0usize;
    let mut sequences = Vec::with_capacity(pairs.len());
    for (doc, question) in pairs {
        let doc_tokens = vocab.tokenize(&doc.text);
        if doc_tokens.is_empty() {
            return Err(Error::EmptyDocument(doc.id.clone()));
        }
        let q_tokens = vocab.tokenize(question);
        if q_tokens.is_empty() {
            return Err(Error::EmptyQuestion(question.clone()));
        }
        // Inputs exclude the final position, so the full sequence may have
        // max_context + 1 tokens.
        let full = doc_tokens.len() + q_tokens.len() + 2;
        let doc_tokens = if full > cfg.max_context + 1 {
            truncated += 1;
            truncate_context(&doc_tokens, cfg.max_context + 1, q_tokens.len() + 1)?
        } else {
            doc_tokens
        };
        let sep_index = doc_tokens.len();
        let mut tokens = doc_tokens;
        tokens.push(SEP);
        tokens.extend_from_slice(&q_tokens);
        tokens.push(EOS);
        sequences.push(TrainSequence { tokens, sep_index });
    }

    let mut init_rng = substream(cfg.seed, "generator-init");
    let mut params = GeneratorParams::<S>::init(vocab.size(), cfg, &mut init_rng)?;
    let mut order_rng = substream(cfg.seed, "generator-train");
    let mut opt: AdamW<S> = AdamW::new(cfg.learning_rate, WEIGHT_DECAY);

    let eval = |params: &GeneratorParams<S>| -> f64 {
        sequences
            .iter()
            .map(|s| params.masked_loss(&s.tokens, s.sep_index))
            .sum::<f64>()
            / sequences.len() as f64
    };

    let initial_loss = eval(&params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for &i in &order {
            for p in params.params_mut() {
                p.zero_grad();
            }
            params.masked_loss_grad(&sequences[i].tokens, sequences[i].sep_index);
            opt.step(&mut params.params_mut());
        }
        epoch_losses.push(eval(&params));
    }
    let final_loss = epoch_losses.last().copied().unwrap_or(initial_loss);

    Ok((
        params,
        TrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
            truncated_sequences: truncated,
        },
    ))
}
