//! Fine stage: position regression inside a retrieved submap.
//!
//! Object features attend to each other with a relative-position bias
//!
//! ```text
//! P = P_direct + α·P_dist
//! A = softmax((Q·Kᵀ + P) / √d_f) · V
//! ```
//!
//! where `P_dist` holds pairwise center distances (divided by the submap
//! edge) and `P_direct(i, j)` is a learned scalar for the cardinal direction
//! from object `i` to object `j`, read off the text encoder's embedding of
//! that direction word. After every bias-attention step the objects attend to
//! the hint features. Each hint then attends over the objects, the results
//! are averaged and joined with the mean hint feature, and an MLP regresses
//! the offset from the submap center, bounded by a scaled `tanh`. With
//! [`FineConfig::anchor`] set, a second hint-to-object attention averages the
//! object offsets and the regressed offset is added to that anchor.
//!
//! Before the regression is trained, a pre-alignment pass pulls the object
//! encoder's color and semantic features toward the text embeddings of the
//! color and label words that describe the same object.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradBuffer, Graph, Mat, ParamStore, Var};
use crate::coarse::{append_record, rank_all, submap_frame, CoarseModel, SubmapIndex};
use crate::encoders::{ObjectEncoder, ObjectEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, LayerNorm, Linear, Mlp, MultiHeadAttention, StepDecay};
use crate::scene::{cardinal_direction, DatasetSplit, Direction, LocalizedQuery, SceneObject, Submap};

/// Euclidean distances between `centers`, `p×p`.
pub fn pairwise_distance_matrix(centers: &[[f64; 2]]) -> Mat {
    let p = centers.len();
    Mat::from_shape_fn((p, p), |(i, j)| {
        if i == j {
            0.0
        } else {
            let dx = centers[i][0] - centers[j][0];
            let dy = centers[i][1] - centers[j][1];
            (dx * dx + dy * dy).sqrt()
        }
    })
}

/// Row-major direction indices: entry `i·p + j` is the [`Direction`] index
/// of `centers[j]` seen from `centers[i]`; the diagonal is
/// [`Direction::Same`].
pub fn direction_indices(centers: &[[f64; 2]]) -> Vec<usize> {
    let p = centers.len();
    let mut out = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            let d = if i == j {
                Direction::Same
            } else {
                cardinal_direction(centers[i], centers[j])
            };
            out.push(d.index());
        }
    }
    out
}

/// `P_direct`: the direction words are embedded by the text encoder and
/// reduced to one scalar each by `head`, then scattered into a `p×p` matrix.
pub fn direction_matrix(
    g: &mut Graph,
    ps: &ParamStore,
    text: &TextEncoder,
    head: &Mlp,
    centers: &[[f64; 2]],
) -> Var {
    let p = centers.len();
    let emb = text.direction_embeddings(g, ps);
    let values = head.forward(g, ps, emb);
    g.gather_scalars(values, Arc::new(direction_indices(centers)), p, p)
}

/// `P = P_direct + α·P_dist`.
pub fn relative_position_bias(g: &mut Graph, p_direct: Var, p_dist: &Mat, alpha: f64) -> Var {
    if alpha == 0.0 {
        return p_direct;
    }
    let dist = g.constant(p_dist * alpha);
    g.add(p_direct, dist)
}

/// `softmax((Q·Kᵀ + P)/√d) · V` with `d` the width of `Q`. Masked keys are
/// set to −∞ after the bias is added.
pub fn cdi_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    p: Option<Var>,
    key_mask: Option<&Arc<Vec<bool>>>,
) -> Result<Var> {
    for (x, what) in [(q, "query"), (k, "key"), (v, "value")] {
        if g.value(x).iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(what));
        }
    }
    if let Some(p) = p {
        if g.value(p).iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("position bias"));
        }
    }
    let d = g.shape(q).1;
    let mut scores = g.matmul_bt(q, k);
    if let Some(p) = p {
        scores = g.add(scores, p);
    }
    let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(m) = key_mask {
        scores = g.mask_cols(scores, Arc::clone(m));
    }
    let attn = g.softmax(scores);
    Ok(g.matmul(attn, v))
}

/// Mean over pairs of `‖color_obj − color_text‖ + ‖sem_obj − label_text‖`.
pub fn prealign_loss(g: &mut Graph, obj_color: Var, text_color: Var, obj_sem: Var, text_label: Var) -> Result<Var> {
    if g.shape(obj_color).0 == 0 {
        return Err(Error::Empty("pre-alignment batch"));
    }
    let a = g.sub(obj_color, text_color);
    let a = g.row_norm(a);
    let b = g.sub(obj_sem, text_label);
    let b = g.row_norm(b);
    let s = g.add(a, b);
    Ok(g.mean(s))
}

/// Mean Euclidean distance between rows of `gt` and `pred` (both `n×2`).
pub fn localization_loss(g: &mut Graph, gt: Var, pred: Var) -> Var {
    let diff = g.sub(gt, pred);
    let n = g.row_norm(diff);
    g.mean(n)
}

/// How the `k` candidates of a query combine into one success.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuccessPolicy {
    /// Any of the top-`k` predictions within `ε`.
    Any,
    /// Only the prediction in the highest-ranked submap counts.
    Best,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineConfig {
    pub text: TextEncoderConfig,
    pub object: ObjectEncoderConfig,
    pub blocks: usize,
    pub heads: usize,
    pub alpha: f64,
    /// Add the relative-position bias to the object self-attention.
    pub cdi: bool,
    /// Run pre-alignment before regression training.
    pub prealign: bool,
    pub direction_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub prealign_epochs: usize,
    pub policy: SuccessPolicy,
    /// Add an attention-weighted mean of the object offsets to the
    /// regressed offset.
    pub anchor: bool,
}

impl FineConfig {
    pub fn with_dim(d: usize) -> Self {
        Self {
            text: TextEncoderConfig::with_dim(d),
            object: ObjectEncoderConfig::with_dim(d),
            blocks: 2,
            heads: 4,
            alpha: 0.1,
            cdi: true,
            prealign: true,
            direction_hidden: 32,
            learning_rate: 3e-4,
            batch_size: 32,
            epochs: 45,
            prealign_epochs: 10,
            policy: SuccessPolicy::Any,
            anchor: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.object.validate()?;
        if self.text.d != self.object.d {
            return Err(Error::InvalidConfig(format!(
                "fine text dim {} differs from object dim {}",
                self.text.d, self.object.d
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("fine batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::NonPositive {
                name: "learning_rate",
                value: self.learning_rate,
            });
        }
        if !self.alpha.is_finite() {
            return Err(Error::NonFinite("alpha"));
        }
        Ok(())
    }
}

impl Default for FineConfig {
    fn default() -> Self {
        Self::with_dim(128)
    }
}

/// Object self-attention with the optional position bias, cross-attention
/// to the hints, then a feed-forward step; all pre-normalized and residual.
#[derive(Clone, Debug)]
pub struct CdiBlock {
    pub norm1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm2: LayerNorm,
    pub cross: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: Mlp,
}

impl CdiBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            wq: Linear::no_bias(store, &format!("{name}.wq"), d, d, rng),
            wk: Linear::no_bias(store, &format!("{name}.wk"), d, d, rng),
            wv: Linear::no_bias(store, &format!("{name}.wv"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), d, heads, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[d, 2 * d, d], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, hints: Var, bias: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(g, ps, x);
        let q = self.wq.forward(g, ps, h);
        let k = self.wk.forward(g, ps, h);
        let v = self.wv.forward(g, ps, h);
        let a = cdi_attention(g, q, k, v, bias, None)?;
        let a = self.wo.forward(g, ps, a);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, ps, x);
        let c = self.cross.forward(g, ps, h, hints, None, None);
        let x = g.add(x, c);
        let h = self.norm3.forward(g, ps, x);
        let f = self.ffn.forward(g, ps, h);
        Ok(g.add(x, f))
    }
}

#[derive(Clone, Debug)]
pub struct FineModel {
    pub cfg: FineConfig,
    pub params: ParamStore,
    pub text: TextEncoder,
    pub objects: ObjectEncoder,
    /// Maps the color slice to the text width for pre-alignment.
    pub color_align: Linear,
    /// Maps the semantic slice to the text width for pre-alignment.
    pub object_align: Linear,
    pub direction_head: Mlp,
    pub blocks: Vec<CdiBlock>,
    pub pool_norm: LayerNorm,
    pub pool: MultiHeadAttention,
    pub head_norm: LayerNorm,
    pub regressor: Mlp,
    pub anchor_q: Linear,
    pub anchor_k: Linear,
}

impl FineModel {
    pub fn new(cfg: FineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.text.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let text = TextEncoder::new(&mut params, "text", cfg.text.clone(), &mut rng);
        let objects = ObjectEncoder::new(&mut params, "object", cfg.object.clone(), &mut rng)?;
        let color_align = Linear::new(&mut params, "align.color", cfg.object.color_dim, d, &mut rng);
        let object_align = Linear::new(&mut params, "align.object", cfg.object.semantic_dim, d, &mut rng);
        let direction_head = Mlp::new(&mut params, "direction", &[d, cfg.direction_hidden, 1], &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|b| CdiBlock::new(&mut params, &format!("cdi{b}"), d, cfg.heads, &mut rng))
            .collect();
        let pool_norm = LayerNorm::new(&mut params, "pool.norm", d);
        let pool = MultiHeadAttention::new(&mut params, "pool.attn", d, cfg.heads, &mut rng);
        let head_norm = LayerNorm::new(&mut params, "regressor.norm", 2 * d);
        let regressor = Mlp::new(&mut params, "regressor", &[2 * d, d, 2], &mut rng);
        // the residual starts at zero
        params.get_mut(regressor.layers[1].weight).fill(0.0);
        let anchor_q = Linear::no_bias(&mut params, "anchor.q", d, d, &mut rng);
        let anchor_k = Linear::no_bias(&mut params, "anchor.k", d, d, &mut rng);
        Ok(Self {
            cfg,
            params,
            text,
            objects,
            color_align,
            object_align,
            direction_head,
            blocks,
            pool_norm,
            pool,
            head_norm,
            regressor,
            anchor_q,
            anchor_k,
        })
    }

    /// Position bias for objects at `centers` in a submap of `edge` meters.
    pub fn position_bias(&self, g: &mut Graph, centers: &[[f64; 2]], edge: f64) -> Var {
        let direct = direction_matrix(g, &self.params, &self.text, &self.direction_head, centers);
        let dist = pairwise_distance_matrix(centers) / edge;
        relative_position_bias(g, direct, &dist, self.cfg.alpha)
    }

    /// Offset from the submap center, `1×2`.
    pub fn forward_offset(&self, g: &mut Graph, query: &LocalizedQuery, objects: &[&SceneObject], submap: &Submap) -> Result<Var> {
        if objects.is_empty() {
            return Err(Error::Empty("submap objects"));
        }
        let ps = &self.params;
        let hints = self.text.encode_hints(g, ps, &query.hints)?;
        let feats = self.objects.encode(g, ps, objects, submap_frame(submap))?;
        let bias = if self.cfg.cdi {
            let centers: Vec<[f64; 2]> = objects.iter().map(|o| o.xy()).collect();
            Some(self.position_bias(g, &centers, submap.edge))
        } else {
            None
        };
        let mut x = feats.joined;
        for block in &self.blocks {
            x = block.forward(g, ps, x, hints, bias)?;
        }
        let t = g.mean_rows(hints);
        let xs = self.pool_norm.forward(g, ps, x);
        let per_hint = self.pool.forward(g, ps, hints, xs, None, None);
        let pooled = g.mean_rows(per_hint);
        let joint = g.concat_cols(&[t, pooled]);
        let joint = self.head_norm.forward(g, ps, joint);
        let raw = self.regressor.forward(g, ps, joint);
        let raw = g.scale(raw, 0.5);
        let squashed = g.tanh(raw);
        let residual = g.scale(squashed, submap.edge);
        if !self.cfg.anchor {
            return Ok(residual);
        }
        let q = self.anchor_q.forward(g, ps, hints);
        let k = self.anchor_k.forward(g, ps, xs);
        let scores = g.matmul_bt(q, k);
        let scores = g.scale(scores, 1.0 / (self.cfg.text.d as f64).sqrt());
        let attn = g.softmax(scores);
        let weights = g.mean_rows(attn);
        let c = submap.center_xy();
        let offsets = g.constant(Mat::from_shape_fn((objects.len(), 2), |(i, k)| objects[i].xy()[k] - c[k]));
        let anchor = g.matmul(weights, offsets);
        Ok(g.add(anchor, residual))
    }

    /// Predicted absolute `(x, y)` of the query inside `submap`.
    pub fn regress_position(&self, query: &LocalizedQuery, split: &DatasetSplit, submap: &Submap) -> Result<[f64; 2]> {
        let objects = split.submap_objects(submap);
        let mut g = Graph::new();
        let off = self.forward_offset(&mut g, query, &objects, submap)?;
        let o = g.value(off);
        let c = submap.center_xy();
        Ok([c[0] + o[[0, 0]], c[1] + o[[0, 1]]])
    }

    /// Names of the parameters pre-alignment updates.
    fn is_object_side(name: &str) -> bool {
        name.starts_with("object.") || name.starts_with("align.")
    }
}

/// Pre-alignment loss of `pairs` (object, hint index) drawn from `query`s.
fn prealign_batch_loss(
    g: &mut Graph,
    model: &FineModel,
    split: &DatasetSplit,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let ps = &model.params;
    let mut objs = Vec::with_capacity(pairs.len());
    let mut tc = Vec::with_capacity(pairs.len());
    let mut tl = Vec::with_capacity(pairs.len());
    for &(qi, hi) in pairs {
        let q = &split.queries[qi];
        let hint = &q.hints[hi];
        let scene = split
            .scene(&q.scene_id)
            .ok_or_else(|| Error::InvalidConfig(format!("query {} names unknown scene", q.id)))?;
        let obj = scene.object(hint.object_ref);
        objs.push(obj);
        let (c, l) = model.text.hint_attributes(ps, hint)?;
        tc.push(c);
        tl.push(l);
    }
    let stack = |rows: Vec<Mat>| {
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
    };
    // object positions are irrelevant here; encode each in its own frame
    let feats = model.objects.encode(g, ps, &objs, crate::encoders::Frame::identity())?;
    let oc = model.color_align.forward(g, ps, feats.color);
    let os = model.object_align.forward(g, ps, feats.semantic);
    let tc = g.constant(stack(tc));
    let tl = g.constant(stack(tl));
    prealign_loss(g, oc, tc, os, tl)
}

/// One line of the fine-stage training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineEpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
}

/// Pulls object-side color and semantic features toward the (fixed) text
/// embeddings of the words describing the same object. Only object-side
/// parameters move.
pub fn train_prealign(
    model: &mut FineModel,
    train: &DatasetSplit,
    seed: u64,
    log: Option<&std::path::Path>,
) -> Result<Vec<FineEpochRecord>> {
    let pairs: Vec<(usize, usize)> = train
        .queries
        .iter()
        .enumerate()
        .flat_map(|(qi, q)| (0..q.hints.len()).map(move |hi| (qi, hi)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Empty("pre-alignment pairs"));
    }
    let cfg = model.cfg.clone();
    let trainable: Vec<bool> = model
        .params
        .ids()
        .map(|id| FineModel::is_object_side(model.params.name(id)))
        .collect();
    let mut adam = Adam::new(&model.params);
    let mut grads = GradBuffer::zeros_like(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = pairs;
    let mut records = Vec::new();
    for epoch in 0..cfg.prealign_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let loss = prealign_batch_loss(&mut g, model, train, chunk)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: "prealign",
                    epoch: epoch + 1,
                    loss: value,
                });
            }
            grads.clear();
            grads.accumulate(&g.backward(loss));
            adam.step_filtered(&mut model.params, &grads, cfg.learning_rate, |id| trainable[id.0]);
            sum += value;
            n += 1;
        }
        let rec = FineEpochRecord {
            stage: "prealign".into(),
            epoch: epoch + 1,
            loss: sum / n as f64,
        };
        log::info!("prealign epoch {} loss {:.4}", rec.epoch, rec.loss);
        if let Some(path) = log {
            append_record(path, &rec)?;
        }
        records.push(rec);
    }
    Ok(records)
}

/// Mean localization loss of `model` on `split`, each query regressed in its
/// first positive submap.
pub fn fine_loss_on(model: &FineModel, split: &DatasetSplit) -> Result<f64> {
    let mut sum = 0.0;
    for q in &split.queries {
        let s = split.submap(*q.positive_submaps.first().ok_or(Error::NoPositives(q.id))?);
        let p = model.regress_position(q, split, s)?;
        sum += ((p[0] - q.target[0]).powi(2) + (p[1] - q.target[1]).powi(2)).sqrt();
    }
    Ok(sum / split.queries.len() as f64)
}

/// Trains the regression on ground-truth submaps: every epoch each query is
/// regressed in one uniformly drawn submap of
/// [`DatasetSplit::fine_submaps`].
pub fn train_fine(
    model: &mut FineModel,
    train: &DatasetSplit,
    seed: u64,
    log: Option<&std::path::Path>,
) -> Result<Vec<FineEpochRecord>> {
    if train.queries.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let cfg = model.cfg.clone();
    let mut adam = Adam::new(&model.params);
    let mut grads = GradBuffer::zeros_like(&model.params);
    let schedule = StepDecay::constant(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.queries.len()).collect();
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let mut preds = Vec::with_capacity(chunk.len());
            let mut gts = Mat::zeros((chunk.len(), 2));
            for (row, &qi) in chunk.iter().enumerate() {
                let q = &train.queries[qi];
                let sid = *train.fine_submaps(q).choose(&mut rng).ok_or(Error::NoPositives(q.id))?;
                let s = train.submap(sid);
                let objects = train.submap_objects(s);
                preds.push(model.forward_offset(&mut g, q, &objects, s)?);
                let c = s.center_xy();
                gts[[row, 0]] = q.target[0] - c[0];
                gts[[row, 1]] = q.target[1] - c[1];
            }
            let pred = g.concat_rows(&preds);
            let gt = g.constant(gts);
            let loss = localization_loss(&mut g, gt, pred);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: "fine",
                    epoch: epoch + 1,
                    loss: value,
                });
            }
            grads.clear();
            grads.accumulate(&g.backward(loss));
            adam.step(&mut model.params, &grads, schedule.rate(epoch));
            sum += value;
            n += 1;
        }
        let rec = FineEpochRecord {
            stage: "fine".into(),
            epoch: epoch + 1,
            loss: sum / n as f64,
        };
        log::info!("fine epoch {} loss {:.4}", rec.epoch, rec.loss);
        if let Some(path) = log {
            append_record(path, &rec)?;
        }
        records.push(rec);
    }
    Ok(records)
}

/// One fine prediction for one retrieved candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub query_id: u32,
    pub submap_id: u32,
    /// Zero-based retrieval rank.
    pub rank: usize,
    pub pred_x: f64,
    pub pred_y: f64,
    pub error: f64,
}

/// Runs the fine model on each query's top-`k` retrieved submaps.
pub fn localize(
    coarse: &CoarseModel,
    index: &SubmapIndex,
    fine: &FineModel,
    split: &DatasetSplit,
    k: usize,
) -> Result<Vec<LocalizationRecord>> {
    let queries = coarse.encode_queries(&split.queries)?;
    let rankings = rank_all(&queries, index, k.min(index.len()))?;
    let mut out = Vec::with_capacity(split.queries.len() * k);
    for (q, ranking) in split.queries.iter().zip(&rankings) {
        for (rank, &sid) in ranking.iter().enumerate() {
            let p = fine.regress_position(q, split, split.submap(sid))?;
            let error = ((p[0] - q.target[0]).powi(2) + (p[1] - q.target[1]).powi(2)).sqrt();
            out.push(LocalizationRecord {
                query_id: q.id,
                submap_id: sid,
                rank,
                pred_x: p[0],
                pred_y: p[1],
                error,
            });
        }
    }
    Ok(out)
}

/// Recall grid from per-candidate records: entry `(a, b)` is the fraction of
/// queries localized within `eps[b]` meters (strictly) using the top
/// `ks[a]` candidates under `policy`.
pub fn localization_recall(records: &[LocalizationRecord], ks: &[usize], eps: &[f64], policy: SuccessPolicy) -> Result<Mat> {
    let mut per_query: std::collections::BTreeMap<u32, Vec<&LocalizationRecord>> = Default::default();
    for r in records {
        per_query.entry(r.query_id).or_default().push(r);
    }
    if per_query.is_empty() {
        return Err(Error::Empty("localization records"));
    }
    let n = per_query.len() as f64;
    let mut grid = Mat::zeros((ks.len(), eps.len()));
    for cands in per_query.values_mut() {
        cands.sort_by_key(|r| r.rank);
        for (a, &k) in ks.iter().enumerate() {
            let used = match policy {
                SuccessPolicy::Any => k.min(cands.len()),
                SuccessPolicy::Best => 1.min(cands.len()),
            };
            let best = cands[..used].iter().map(|r| r.error).fold(f64::INFINITY, f64::min);
            for (b, &e) in eps.iter().enumerate() {
                if best < e {
                    grid[[a, b]] += 1.0 / n;
                }
            }
        }
    }
    Ok(grid)
}

/// Median of the errors of each query's rank-0 candidate.
pub fn median_top1_error(records: &[LocalizationRecord]) -> Option<f64> {
    let mut errs: Vec<f64> = records.iter().filter(|r| r.rank == 0).map(|r| r.error).collect();
    median(&mut errs)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Errors of `model` on every query of `split` in the first submap of
/// [`DatasetSplit::fine_submaps`].
pub fn oracle_submap_errors(model: &FineModel, split: &DatasetSplit) -> Result<Vec<f64>> {
    split
        .queries
        .iter()
        .map(|q| {
            let sid = *split.fine_submaps(q).first().ok_or(Error::NoPositives(q.id))?;
            let p = model.regress_position(q, split, split.submap(sid))?;
            Ok(((p[0] - q.target[0]).powi(2) + (p[1] - q.target[1]).powi(2)).sqrt())
        })
        .collect()
}
