//! Cauchy-mixture window transformer with spatial consolidation.
//!
//! Each window runs scaled dot-product self-attention over a submap's
//! ordered object features, multiplying the raw scores element-wise by a
//! fixed positional weight matrix before the softmax:
//!
//! ```text
//! X_attn = softmax(W ⊙ (X·Wq)(X·Wk)ᵀ / √d_k) · X·Wv
//! W(i, j) = 1 / (πγ (1 + ((j − i)/γ)²))
//! ```
//!
//! `N` windows with different scales `γ` run in parallel. A learnable query
//! `φ` summarizes every window output by attention, and a linear head turns
//! each (object, window) pair into a logit; a softmax across windows gives
//! per-object mixing weights that sum to one. The submap descriptor is the
//! column-wise max over the mixed object features.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, ParamId, ParamStore, Var};
use crate::encoders::{Frame, ObjectEncoder};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::scene::{SceneObject, SemanticLabel};

/// Cauchy density at `offset` with scale `gamma`.
pub fn cauchy_density(offset: f64, gamma: f64) -> f64 {
    1.0 / (PI * gamma * (1.0 + (offset / gamma).powi(2)))
}

/// Gaussian density at `offset` with standard deviation `sigma`.
pub fn gaussian_density(offset: f64, sigma: f64) -> f64 {
    (-0.5 * (offset / sigma).powi(2)).exp() / (sigma * (2.0 * PI).sqrt())
}

fn check_scale(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositive { name, value })
    }
}

fn toeplitz(p: usize, f: impl Fn(f64) -> f64) -> Mat {
    Mat::from_shape_fn((p, p), |(i, j)| f(j as f64 - i as f64))
}

/// `p×p` Cauchy weights over index offsets.
pub fn cauchy_matrix(p: usize, gamma: f64) -> Result<Mat> {
    check_scale("gamma", gamma)?;
    if p == 0 {
        return Err(Error::Empty("cauchy matrix size"));
    }
    Ok(toeplitz(p, |o| cauchy_density(o, gamma)))
}

/// `p×p` Gaussian weights over index offsets.
pub fn gaussian_matrix(p: usize, sigma: f64) -> Result<Mat> {
    check_scale("sigma", sigma)?;
    if p == 0 {
        return Err(Error::Empty("gaussian matrix size"));
    }
    Ok(toeplitz(p, |o| gaussian_density(o, sigma)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowFamily {
    Cauchy,
    Gaussian,
    /// All-ones weights: plain scaled dot-product attention.
    Uniform,
}

/// What the offset in the window density measures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum WeightAssignment {
    /// Index offset in the label-grouped object order.
    Semantic,
    /// Center distance in meters divided by `length_scale`.
    Distance { length_scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// One scale per window.
    pub gammas: Vec<f64>,
    pub d: usize,
    pub d_k: usize,
    pub ff: usize,
    pub family: WindowFamily,
    pub assignment: WeightAssignment,
    /// Mixing weight per (object, window, channel) instead of per
    /// (object, window).
    pub per_channel_weights: bool,
    /// Number of stacked window-plus-consolidation layers. Zero runs a single
    /// plain attention block instead.
    pub layers: usize,
}

impl WindowConfig {
    pub fn with_dim(d: usize) -> Self {
        Self {
            gammas: vec![0.5, 1.0, 2.0],
            d,
            d_k: d,
            ff: 2 * d,
            family: WindowFamily::Cauchy,
            assignment: WeightAssignment::Semantic,
            per_channel_weights: false,
            layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() {
            return Err(Error::InvalidConfig("at least one window scale is required".into()));
        }
        for &g in &self.gammas {
            check_scale("gamma", g)?;
        }
        if let WeightAssignment::Distance { length_scale } = self.assignment {
            check_scale("length_scale", length_scale)?;
        }
        if self.d == 0 || self.d_k == 0 || self.ff == 0 {
            return Err(Error::InvalidConfig("window dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Window scales actually used by a layer.
    fn effective_gammas(&self) -> Vec<f64> {
        if self.layers == 0 {
            vec![1.0]
        } else {
            self.gammas.clone()
        }
    }

    fn effective_family(&self) -> WindowFamily {
        if self.layers == 0 {
            WindowFamily::Uniform
        } else {
            self.family
        }
    }
}

/// Groups objects by label: returns a permutation of `0..objects.len()` in
/// which same-label objects are contiguous. The order of label blocks and the
/// order within each block are drawn from `seed`. Objects are first put in a
/// canonical (label, id) order, so the result depends only on the object set
/// and the seed.
pub fn order_objects(objects: &[&SceneObject], seed: u64) -> Vec<usize> {
    let mut canon: Vec<usize> = (0..objects.len()).collect();
    canon.sort_by_key(|&i| (objects[i].label, objects[i].id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<SemanticLabel> = canon.iter().map(|&i| objects[i].label).collect();
    labels.dedup();
    labels.shuffle(&mut rng);
    let mut out = Vec::with_capacity(objects.len());
    for label in labels {
        let mut block: Vec<usize> = canon.iter().copied().filter(|&i| objects[i].label == label).collect();
        block.shuffle(&mut rng);
        out.extend(block);
    }
    out
}

/// Weight matrix of one window for `p` objects in their final order.
pub fn window_weights(
    family: WindowFamily,
    assignment: WeightAssignment,
    gamma: f64,
    centers: &[[f64; 3]],
) -> Result<Mat> {
    let p = centers.len();
    if p == 0 {
        return Err(Error::Empty("window weights"));
    }
    check_scale("gamma", gamma)?;
    let density: fn(f64, f64) -> f64 = match family {
        WindowFamily::Cauchy => cauchy_density,
        WindowFamily::Gaussian => gaussian_density,
        WindowFamily::Uniform => return Ok(Mat::ones((p, p))),
    };
    Ok(match assignment {
        WeightAssignment::Semantic => toeplitz(p, |o| density(o, gamma)),
        WeightAssignment::Distance { length_scale } => Mat::from_shape_fn((p, p), |(i, j)| {
            let d = (0..3)
                .map(|k| (centers[i][k] - centers[j][k]).powi(2))
                .sum::<f64>()
                .sqrt();
            density(d / length_scale, gamma)
        }),
    })
}

/// One positional-weighted attention window followed by a feed-forward
/// network, both pre-normalized and residual.
#[derive(Clone, Debug)]
pub struct Window {
    pub norm1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub d_k: usize,
}

impl Window {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &WindowConfig, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d),
            wq: Linear::no_bias(store, &format!("{name}.wq"), cfg.d, cfg.d_k, rng),
            wk: Linear::no_bias(store, &format!("{name}.wk"), cfg.d, cfg.d_k, rng),
            wv: Linear::no_bias(store, &format!("{name}.wv"), cfg.d, cfg.d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[cfg.d, cfg.ff, cfg.d], rng),
            d_k: cfg.d_k,
        }
    }

    /// Attention weights `softmax(W ⊙ QKᵀ/√d_k)` with masked keys at zero.
    pub fn attention(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        h: Var,
        weights: &Arc<Mat>,
        mask: Option<&Arc<Vec<bool>>>,
    ) -> Var {
        let q = self.wq.forward(g, ps, h);
        let k = self.wk.forward(g, ps, h);
        let raw = g.matmul_bt(q, k);
        let scaled = g.scale(raw, 1.0 / (self.d_k as f64).sqrt());
        let mut scores = g.mul_const(scaled, Arc::clone(weights));
        if let Some(m) = mask {
            // after the product, so the weights cannot revive a masked key
            scores = g.mask_cols(scores, Arc::clone(m));
        }
        g.softmax(scores)
    }

    /// `x` is `p×d`; `weights` is `p×p`; `mask[j]` marks padded rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Var,
        weights: &Arc<Mat>,
        mask: Option<&Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let (p, _) = g.shape(x);
        if weights.dim() != (p, p) {
            return Err(Error::InvalidConfig(format!(
                "weight matrix {:?} does not match {p} objects",
                weights.dim()
            )));
        }
        if let Some(m) = mask {
            if m.len() != p || m.iter().all(|&b| b) {
                return Err(Error::InvalidConfig("mask must cover every row and keep one".into()));
            }
        }
        if g.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("window input"));
        }
        let h = self.norm1.forward(g, ps, x);
        let attn = self.attention(g, ps, h, weights, mask);
        let v = self.wv.forward(g, ps, h);
        let mixed = g.matmul(attn, v);
        let x1 = g.add(x, mixed);
        let h2 = self.norm2.forward(g, ps, x1);
        let f = self.ffn.forward(g, ps, h2);
        Ok(g.add(x1, f))
    }
}

/// Learnable-query aggregation of `N` window outputs.
#[derive(Clone, Debug)]
pub struct Consolidation {
    pub phi: ParamId,
    pub head: Linear,
    pub d_k: usize,
    pub per_channel: bool,
}

impl Consolidation {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &WindowConfig, rng: &mut R) -> Self {
        let phi = Mat::from_shape_simple_fn((1, cfg.d), || rng.gen_range(-0.1..0.1));
        let out = if cfg.per_channel_weights { cfg.d } else { 1 };
        Self {
            phi: store.add(format!("{name}.phi"), phi),
            head: Linear::new(store, &format!("{name}.head"), cfg.d, out, rng),
            d_k: cfg.d_k,
            per_channel: cfg.per_channel_weights,
        }
    }

    /// Mixing logits of one window, `p×1` (or `p×d` per channel): the head
    /// applied to each object row plus the window's φ-attended summary.
    fn logits(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let phi = g.param(ps, self.phi);
        let scores = g.matmul_bt(phi, x);
        let scores = g.scale(scores, 1.0 / (self.d_k as f64).sqrt());
        let attn = g.softmax(scores);
        let summary = g.matmul(attn, x);
        let rows = g.add_row(x, summary);
        self.head.forward(g, ps, rows)
    }

    /// Per-object mixing weights of every window; entries sum to one across
    /// windows.
    pub fn weights(&self, g: &mut Graph, ps: &ParamStore, outputs: &[Var]) -> Result<Vec<Var>> {
        if outputs.is_empty() {
            return Err(Error::Empty("window outputs"));
        }
        let shape = g.shape(outputs[0]);
        if outputs.iter().any(|&o| g.shape(o) != shape) {
            return Err(Error::InvalidConfig("window outputs differ in shape".into()));
        }
        let logits: Vec<Var> = outputs.iter().map(|&x| self.logits(g, ps, x)).collect();
        let n = logits.len();
        let w = if self.per_channel {
            let cols = g.shape(logits[0]).1;
            // softmax across windows per (object, channel)
            let mut per_channel = Vec::with_capacity(cols);
            for c in 0..cols {
                let parts: Vec<Var> = logits.iter().map(|&l| g.slice_cols(l, c, 1)).collect();
                let cat = g.concat_cols(&parts);
                per_channel.push(g.softmax(cat));
            }
            (0..n)
                .map(|k| {
                    let cols: Vec<Var> = per_channel.iter().map(|&s| g.slice_cols(s, k, 1)).collect();
                    g.concat_cols(&cols)
                })
                .collect()
        } else {
            let cat = g.concat_cols(&logits);
            let soft = g.softmax(cat);
            (0..n).map(|k| g.slice_cols(soft, k, 1)).collect()
        };
        Ok(w)
    }

    /// `Σ_n w_n ⊙ X_n`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, outputs: &[Var]) -> Result<Var> {
        let w = self.weights(g, ps, outputs)?;
        let mut acc: Option<Var> = None;
        for (x, wn) in outputs.iter().zip(w) {
            let term = if self.per_channel { g.mul(*x, wn) } else { g.mul_col(*x, wn) };
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        Ok(acc.expect("non-empty"))
    }
}

/// `N` parallel windows plus consolidation.
#[derive(Clone, Debug)]
pub struct CmmtLayer {
    pub windows: Vec<Window>,
    pub consolidation: Consolidation,
}

impl CmmtLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &WindowConfig, rng: &mut R) -> Self {
        let n = cfg.effective_gammas().len();
        Self {
            windows: (0..n)
                .map(|i| Window::new(store, &format!("{name}.window{i}"), cfg, rng))
                .collect(),
            consolidation: Consolidation::new(store, &format!("{name}.consolidate"), cfg, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Var,
        weights: &[Arc<Mat>],
        mask: Option<&Arc<Vec<bool>>>,
    ) -> Result<Var> {
        assert_eq!(weights.len(), self.windows.len(), "one weight matrix per window");
        let outs = self
            .windows
            .iter()
            .zip(weights)
            .map(|(w, m)| w.forward(g, ps, x, m, mask))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            // a single window needs no mixing
            return Ok(outs[0]);
        }
        self.consolidation.forward(g, ps, &outs)
    }
}

/// Object encoder plus window layers plus max pooling: the submap branch of
/// the coarse stage.
#[derive(Clone, Debug)]
pub struct SubmapEncoder {
    pub cfg: WindowConfig,
    pub objects: ObjectEncoder,
    pub layers: Vec<CmmtLayer>,
}

impl SubmapEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        objects: ObjectEncoder,
        cfg: WindowConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if objects.cfg.d != cfg.d {
            return Err(Error::InvalidConfig(format!(
                "object dim {} differs from window dim {}",
                objects.cfg.d, cfg.d
            )));
        }
        let count = cfg.layers.max(1);
        let layers = (0..count)
            .map(|l| CmmtLayer::new(store, &format!("{name}.layer{l}"), &cfg, rng))
            .collect();
        Ok(Self { cfg, objects, layers })
    }

    /// Window weight matrices for objects already in their final order.
    pub fn weights_for(&self, ordered: &[&SceneObject]) -> Result<Vec<Arc<Mat>>> {
        let centers: Vec<[f64; 3]> = ordered.iter().map(|o| o.center).collect();
        self.cfg
            .effective_gammas()
            .iter()
            .map(|&gamma| {
                window_weights(self.cfg.effective_family(), self.cfg.assignment, gamma, &centers).map(Arc::new)
            })
            .collect()
    }

    /// Object features after the window layers, in `order_objects` order,
    /// `p×d`.
    pub fn object_features(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        objects: &[&SceneObject],
        frame: Frame,
        order_seed: u64,
    ) -> Result<Var> {
        if objects.is_empty() {
            return Err(Error::Empty("submap objects"));
        }
        let order = order_objects(objects, order_seed);
        let ordered: Vec<&SceneObject> = order.iter().map(|&i| objects[i]).collect();
        let feats = self.objects.encode(g, ps, &ordered, frame)?;
        let weights = self.weights_for(&ordered)?;
        let mut x = feats.joined;
        for layer in &self.layers {
            x = layer.forward(g, ps, x, &weights, None)?;
        }
        Ok(x)
    }

    /// Submap descriptor `F^M`, `1×d`.
    pub fn descriptor(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        objects: &[&SceneObject],
        frame: Frame,
        order_seed: u64,
    ) -> Result<Var> {
        let x = self.object_features(g, ps, objects, frame, order_seed)?;
        Ok(g.max_rows(x))
    }
}
