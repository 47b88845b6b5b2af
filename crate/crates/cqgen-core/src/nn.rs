//! Neural-net building blocks with hand-written backward passes.
//!
//! Everything operates on flat row-major `Vec<S>` buffers. Each layer's
//! `forward` returns the activations plus whatever cache its `backward`
//! needs; `backward` accumulates into the parameter gradients and into the
//! caller-provided input gradient.

use rand::Rng;

use crate::rng::trunc_normal;
use crate::scalar::Real;

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub w: Vec<S>,
    pub g: Vec<S>,
    pub rows: usize,
    pub cols: usize,
    /// Whether decoupled weight decay applies (off for biases and norms).
    pub decay: bool,
}

impl<S: Real> Param<S> {
    pub fn zeros(rows: usize, cols: usize, decay: bool) -> Self {
        Self {
            w: vec![S::zero(); rows * cols],
            g: vec![S::zero(); rows * cols],
            rows,
            cols,
            decay,
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            w: vec![S::one(); rows * cols],
            g: vec![S::zero(); rows * cols],
            rows,
            cols,
            decay: false,
        }
    }

    /// Truncated-normal init (resampled beyond two standard deviations).
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            w: (0..rows * cols).map(|_| trunc_normal(rng, std)).collect(),
            g: vec![S::zero(); rows * cols],
            rows,
            cols,
            decay: true,
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.g.iter_mut().for_each(|g| *g = S::zero());
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map `y = W x + b`, weight stored row-major `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl<S: Real> Linear<S> {
    pub fn new(in_dim: usize, out_dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::randn(out_dim, in_dim, std, rng),
            bias: Param::zeros(out_dim, 1, false),
            out_dim,
            in_dim,
        }
    }

    pub fn forward(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weight.w[o * self.in_dim..(o + 1) * self.in_dim];
            let dot = row
                .iter()
                .zip(x)
                .fold(S::zero(), |acc, (w, xi)| acc + *w * *xi);
            y.push(dot + self.bias.w[o]);
        }
        y
    }

    /// Accumulates parameter grads and adds the input gradient into `dx`.
    pub fn backward(&mut self, x: &[S], dy: &[S], dx: &mut [S]) {
        for o in 0..self.out_dim {
            let d = dy[o];
            self.bias.g[o] = self.bias.g[o] + d;
            let wrow = &self.weight.w[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut self.weight.g[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] = grow[i] + d * x[i];
                dx[i] = dx[i] + d * wrow[i];
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm<S> {
    pub gain: Param<S>,
    pub bias: Param<S>,
    pub eps: S,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LnCache<S> {
    xhat: Vec<S>,
    inv_std: S,
}

impl<S: Real> LayerNorm<S> {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            gain: Param::ones(dim, 1),
            bias: Param::zeros(dim, 1, false),
            eps: S::from_f64(eps),
            dim,
        }
    }

    pub fn forward(&self, x: &[S]) -> (Vec<S>, LnCache<S>) {
        let n = S::from_usize(self.dim);
        let mean = x.iter().fold(S::zero(), |a, v| a + *v) / n;
        let var = x
            .iter()
            .fold(S::zero(), |a, v| a + (*v - mean) * (*v - mean))
            / n;
        let inv_std = S::one() / (var + self.eps).sqrt();
        let xhat: Vec<S> = x.iter().map(|v| (*v - mean) * inv_std).collect();
        let y = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| self.gain.w[i] * *h + self.bias.w[i])
            .collect();
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LnCache<S>, dy: &[S], dx: &mut [S]) {
        let n = S::from_usize(self.dim);
        let mut dxhat = Vec::with_capacity(self.dim);
        let mut m1 = S::zero();
        let mut m2 = S::zero();
        for i in 0..self.dim {
            let d = dy[i] * self.gain.w[i];
            self.gain.g[i] = self.gain.g[i] + dy[i] * cache.xhat[i];
            self.bias.g[i] = self.bias.g[i] + dy[i];
            m1 = m1 + d;
            m2 = m2 + d * cache.xhat[i];
            dxhat.push(d);
        }
        m1 = m1 / n;
        m2 = m2 / n;
        for i in 0..self.dim {
            dx[i] = dx[i] + cache.inv_std * (dxhat[i] - m1 - cache.xhat[i] * m2);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.gain, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// Softmax and GELU
// ---------------------------------------------------------------------------

/// Numerically stable softmax in place.
pub fn softmax_in_place<S: Real>(x: &mut [S]) {
    let max = x.iter().fold(S::neg_infinity(), |a, v| a.max(*v));
    let mut sum = S::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// Given `y = softmax(s)` and `dL/dy`, accumulates `dL/ds` into `ds`.
pub fn softmax_backward<S: Real>(y: &[S], dy: &[S], ds: &mut [S]) {
    let dot = y
        .iter()
        .zip(dy)
        .fold(S::zero(), |a, (yi, di)| a + *yi * *di);
    for i in 0..y.len() {
        ds[i] = ds[i] + y[i] * (dy[i] - dot);
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    S::from_f64(0.5) * x * (S::one() + t)
}

pub fn gelu_prime<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let three = S::from_f64(3.0);
    let half = S::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<S> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<S> {
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    /// Attention weights, flat `[head][query][key]`.
    att: Vec<S>,
    ctx: Vec<S>,
    t: usize,
    causal: bool,
}

impl<S: Real> MultiHeadAttention<S> {
    pub fn new(dim: usize, heads: usize, std: f64, rng: &mut impl Rng) -> Self {
        assert_eq!(dim % heads, 0, "hidden dim must be divisible by heads");
        Self {
            wq: Linear::new(dim, dim, std, rng),
            wk: Linear::new(dim, dim, std, rng),
            wv: Linear::new(dim, dim, std, rng),
            wo: Linear::new(dim, dim, std, rng),
            heads,
            dim,
        }
    }

    /// Self-attention over a `t × dim` sequence, optionally causal.
    pub fn forward(&self, x: &[S], t: usize, causal: bool) -> (Vec<S>, AttnCache<S>) {
        let h = self.dim;
        let dh = h / self.heads;
        let scale = S::one() / S::from_usize(dh).sqrt();

        let mut q = vec![S::zero(); t * h];
        let mut k = vec![S::zero(); t * h];
        let mut v = vec![S::zero(); t * h];
        for i in 0..t {
            let xi = &x[i * h..(i + 1) * h];
            q[i * h..(i + 1) * h].copy_from_slice(&self.wq.forward(xi));
            k[i * h..(i + 1) * h].copy_from_slice(&self.wk.forward(xi));
            v[i * h..(i + 1) * h].copy_from_slice(&self.wv.forward(xi));
        }

        let mut att = vec![S::zero(); self.heads * t * t];
        let mut ctx = vec![S::zero(); t * h];
        for head in 0..self.heads {
            let off = head * dh;
            for i in 0..t {
                let limit = if causal { i + 1 } else { t };
                let row = &mut att[head * t * t + i * t..head * t * t + i * t + limit];
                for (j, slot) in row.iter_mut().enumerate() {
                    let qi = &q[i * h + off..i * h + off + dh];
                    let kj = &k[j * h + off..j * h + off + dh];
                    let dot = qi
                        .iter()
                        .zip(kj)
                        .fold(S::zero(), |a, (x, y)| a + *x * *y);
                    *slot = dot * scale;
                }
                softmax_in_place(row);
                for j in 0..limit {
                    let a = att[head * t * t + i * t + j];
                    for d in 0..dh {
                        ctx[i * h + off + d] =
                            ctx[i * h + off + d] + a * v[j * h + off + d];
                    }
                }
            }
        }

        let mut y = vec![S::zero(); t * h];
        for i in 0..t {
            let yi = self.wo.forward(&ctx[i * h..(i + 1) * h]);
            y[i * h..(i + 1) * h].copy_from_slice(&yi);
        }
        (
            y,
            AttnCache {
                q,
                k,
                v,
                att,
                ctx,
                t,
                causal,
            },
        )
    }

    pub fn backward(&mut self, x: &[S], cache: &AttnCache<S>, dy: &[S], dx: &mut [S]) {
        let h = self.dim;
        let dh = h / self.heads;
        let t = cache.t;
        let scale = S::one() / S::from_usize(dh).sqrt();

        let mut dctx = vec![S::zero(); t * h];
        for i in 0..t {
            self.wo.backward(
                &cache.ctx[i * h..(i + 1) * h],
                &dy[i * h..(i + 1) * h],
                &mut dctx[i * h..(i + 1) * h],
            );
        }

        let mut dq = vec![S::zero(); t * h];
        let mut dk = vec![S::zero(); t * h];
        let mut dv = vec![S::zero(); t * h];
        for head in 0..self.heads {
            let off = head * dh;
            for i in 0..t {
                let limit = if cache.causal { i + 1 } else { t };
                let arow = &cache.att[head * t * t + i * t..head * t * t + i * t + limit];
                // da_ij = dctx_i · v_j ; dv_j += a_ij dctx_i
                let mut da = vec![S::zero(); limit];
                for j in 0..limit {
                    let mut dot = S::zero();
                    for d in 0..dh {
                        dot = dot + dctx[i * h + off + d] * cache.v[j * h + off + d];
                        dv[j * h + off + d] =
                            dv[j * h + off + d] + arow[j] * dctx[i * h + off + d];
                    }
                    da[j] = dot;
                }
                let mut ds = vec![S::zero(); limit];
                softmax_backward(arow, &da, &mut ds);
                for j in 0..limit {
                    let d = ds[j] * scale;
                    for dd in 0..dh {
                        dq[i * h + off + dd] =
                            dq[i * h + off + dd] + d * cache.k[j * h + off + dd];
                        dk[j * h + off + dd] =
                            dk[j * h + off + dd] + d * cache.q[i * h + off + dd];
                    }
                }
            }
        }

        for i in 0..t {
            let xi = &x[i * h..(i + 1) * h];
            let dxi = &mut dx[i * h..(i + 1) * h];
            self.wq.backward(xi, &dq[i * h..(i + 1) * h], dxi);
            self.wk.backward(xi, &dk[i * h..(i + 1) * h], dxi);
            self.wv.backward(xi, &dv[i * h..(i + 1) * h], dxi);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut ps = self.wq.params_mut();
        ps.extend(self.wk.params_mut());
        ps.extend(self.wv.params_mut());
        ps.extend(self.wo.params_mut());
        ps
    }
}

// ---------------------------------------------------------------------------
// Position-wise feed-forward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FeedForward<S> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

#[derive(Debug, Clone)]
pub struct FfCache<S> {
    pre: Vec<S>,
    act: Vec<S>,
}

impl<S: Real> FeedForward<S> {
    pub fn new(dim: usize, inner: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(dim, inner, std, rng),
            fc2: Linear::new(inner, dim, std, rng),
        }
    }

    pub fn forward(&self, x: &[S]) -> (Vec<S>, FfCache<S>) {
        let pre = self.fc1.forward(x);
        let act: Vec<S> = pre.iter().map(|p| gelu(*p)).collect();
        let y = self.fc2.forward(&act);
        (y, FfCache { pre, act })
    }

    pub fn backward(&mut self, x: &[S], cache: &FfCache<S>, dy: &[S], dx: &mut [S]) {
        let mut dact = vec![S::zero(); cache.act.len()];
        self.fc2.backward(&cache.act, dy, &mut dact);
        let dpre: Vec<S> = dact
            .iter()
            .zip(&cache.pre)
            .map(|(d, p)| *d * gelu_prime(*p))
            .collect();
        self.fc1.backward(x, &dpre, dx);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut ps = self.fc1.params_mut();
        ps.extend(self.fc2.params_mut());
        ps
    }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay. Decay only touches params flagged
/// `decay` (matrices and embeddings, not biases or norm gains).
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
    step: u32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Real> AdamW<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr: S::from_f64(lr),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            weight_decay: S::from_f64(weight_decay),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over the full ordered parameter list. The list must be
    /// identical (same order, same shapes) on every call.
    pub fn step(&mut self, params: &mut [&mut Param<S>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.v = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed shape");
        self.step += 1;
        let bc1 = S::one() - self.beta1.powi(self.step as i32);
        let bc2 = S::one() - self.beta2.powi(self.step as i32);
        let one = S::one();

        for (pi, param) in params.iter_mut().enumerate() {
            assert_eq!(self.m[pi].len(), param.len());
            if param.decay {
                let factor = one - self.lr * self.weight_decay;
                param.w.iter_mut().for_each(|w| *w = *w * factor);
            }
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..param.len() {
                let g = param.g[i];
                m[i] = self.beta1 * m[i] + (one - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (one - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.w[i] = param.w[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
