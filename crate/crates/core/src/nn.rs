//! Layers and optimizer shared by every model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradBuffer, Graph, Mat, ParamId, ParamStore, Var};

fn xavier<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Mat {
    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
    Mat::from_shape_simple_fn((d_in, d_out), || rng.gen_range(-limit..limit))
}

/// Affine map `x·W + b` applied to each row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, d_in, d_out));
        let bias = Some(store.add(format!("{name}.bias"), Mat::zeros((1, d_out))));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn no_bias<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, d_in, d_out));
        Self {
            weight,
            bias: None,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer boundary, input first: `[3, 64, 128]` is a
    /// two-layer MLP.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, ps, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map(|l| l.d_out).unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Mat::ones((1, d))),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, d))),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention.
///
/// An optional `p_q×p_k` bias is added to every head's raw scores before the
/// `1/√d_head` scaling: `softmax((QKᵀ + B)/√d_head)·V`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d % heads == 0, "d = {d} not divisible by {heads} heads");
        Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        queries: Var,
        keys: Var,
        bias: Option<Var>,
        key_mask: Option<&std::sync::Arc<Vec<bool>>>,
    ) -> Var {
        let q = self.q.forward(g, ps, queries);
        let k = self.k.forward(g, ps, keys);
        let v = self.v.forward(g, ps, keys);
        let d = g.shape(q).1;
        let dh = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let mut scores = g.matmul_bt(qh, kh);
            if let Some(b) = bias {
                scores = g.add(scores, b);
            }
            let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            if let Some(m) = key_mask {
                scores = g.mask_cols(scores, m.clone());
            }
            let attn = g.softmax(scores);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, ps, cat)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[d, ff, d], rng),
        }
    }

    /// Self-attention over the rows of `x`, with an optional score bias.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, bias: Option<Var>) -> Var {
        let h = self.norm1.forward(g, ps, x);
        let a = self.attn.forward(g, ps, h, h, bias, None);
        let x = g.add(x, a);
        self.feed_forward(g, ps, x)
    }

    /// Cross-attention from the rows of `x` to the rows of `context`.
    pub fn forward_cross(&self, g: &mut Graph, ps: &ParamStore, x: Var, context: Var) -> Var {
        let h = self.norm1.forward(g, ps, x);
        let a = self.attn.forward(g, ps, h, context, None, None);
        let x = g.add(x, a);
        self.feed_forward(g, ps, x)
    }

    fn feed_forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = self.norm2.forward(g, ps, x);
        let f = self.ffn.forward(g, ps, h);
        g.add(x, f)
    }
}

/// Multi-step learning-rate schedule: the rate is multiplied by `factor`
/// after every `every` completed epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            factor: 1.0,
            every: usize::MAX,
        }
    }

    /// Rate used during the zero-based epoch `epoch`.
    pub fn rate(&self, epoch: usize) -> f64 {
        let steps = if self.every == 0 { 0 } else { epoch / self.every };
        self.base * self.factor.powi(steps as i32)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.ids().map(|id| Mat::zeros(store.get(id).dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.step_filtered(store, grads, lr, |_| true)
    }

    /// Updates only the parameters for which `train` returns true.
    pub fn step_filtered(
        &mut self,
        store: &mut ParamStore,
        grads: &GradBuffer,
        lr: f64,
        train: impl Fn(ParamId) -> bool,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !train(id) {
                continue;
            }
            let g = grads.get(id);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn step_decay_matches_multistep_schedule() {
        let s = StepDecay {
            base: 5e-4,
            factor: 0.4,
            every: 7,
        };
        assert_eq!(s.rate(0), 5e-4);
        assert_eq!(s.rate(6), 5e-4);
        assert!((s.rate(7) - 2e-4).abs() < 1e-18);
        assert!((s.rate(14) - 8e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::no_bias(&mut store, "w", 3, 1, &mut rng);
        let mut opt = Adam::new(&store);
        let x = Mat::from_shape_vec((4, 3), vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 1., 1.]).unwrap();
        let y = Mat::from_shape_vec((4, 1), vec![1., -2., 0.5, -0.5]).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let p = lin.forward(&mut g, &store, xv);
            let d = g.sub(p, yv);
            let sq = g.mul(d, d);
            let loss = g.sum(sq);
            last = g.scalar(loss);
            let mut buf = GradBuffer::zeros_like(&store);
            buf.accumulate(&g.backward(loss));
            opt.step(&mut store, &buf, 0.05);
        }
        assert!(last < 1e-6, "loss {last}");
    }
}
