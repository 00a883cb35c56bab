//! Initial embeddings for both modalities.
//!
//! The text side embeds template tokens and runs transformer blocks within
//! each hint and then across hints; the object side concatenates four sub-encoders
//! (semantic, color, position, point count) into one `d`-vector per object,
//! optionally refined by a residual MLP over the concatenation.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, TransformerBlock};
use crate::scene::{vocabulary, Direction, Hint, LocalizedQuery, SceneObject, SemanticLabel, TEMPLATE_LEN};

/// Maps template words to embedding rows.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let words = vocabulary();
        let index = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
        Self { words, index }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
    /// Longest hint, in tokens, the slot embedding covers.
    pub max_hint_tokens: usize,
}

impl TextEncoderConfig {
    pub fn with_dim(d: usize) -> Self {
        Self {
            d,
            blocks: 2,
            heads: 4,
            ff: 2 * d,
            max_hint_tokens: TEMPLATE_LEN,
        }
    }
}

/// Token embedding plus transformer blocks over the hint tokens.
///
/// The first block attends within each hint; its outputs are averaged per
/// hint and later blocks attend across the hint features. Slot embeddings restart at every hint and there is no encoding of
/// hint order, so the mean-pooled query feature does not depend on how the
/// hints are ordered.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub vocab: Vocabulary,
    pub tokens: ParamId,
    pub slots: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

/// Token ids of every hint in a query, one row segment per hint.
#[derive(Clone, Debug)]
pub struct TokenizedQuery {
    pub ids: Vec<usize>,
    pub slots: Vec<usize>,
    pub lens: Vec<usize>,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: TextEncoderConfig, rng: &mut R) -> Self {
        let vocab = Vocabulary::default();
        let emb = |rng: &mut R, rows: usize| Mat::from_shape_simple_fn((rows, cfg.d), || rng.gen_range(-1.0..1.0));
        let tokens = store.add(format!("{name}.tokens"), emb(rng, vocab.len()));
        let slots = store.add(format!("{name}.slots"), emb(rng, cfg.max_hint_tokens) * 0.1);
        let blocks = (0..cfg.blocks)
            .map(|b| TransformerBlock::new(store, &format!("{name}.block{b}"), cfg.d, cfg.heads, cfg.ff, rng))
            .collect();
        Self {
            cfg,
            vocab,
            tokens,
            slots,
            blocks,
        }
    }

    pub fn tokenize(&self, hints: &[Hint]) -> Result<TokenizedQuery> {
        if hints.is_empty() {
            return Err(Error::Empty("query hints"));
        }
        let mut out = TokenizedQuery {
            ids: Vec::new(),
            slots: Vec::new(),
            lens: Vec::new(),
        };
        for h in hints {
            let ids = self.vocab.tokenize(&h.text)?;
            if ids.is_empty() || ids.len() > self.cfg.max_hint_tokens {
                return Err(Error::InvalidConfig(format!(
                    "hint has {} tokens, encoder accepts 1..={}",
                    ids.len(),
                    self.cfg.max_hint_tokens
                )));
            }
            out.slots.extend(0..ids.len());
            out.lens.push(ids.len());
            out.ids.extend(ids);
        }
        Ok(out)
    }

    /// Token features after the first block, `tokens×d`. Attention stays
    /// within each hint.
    pub fn token_features(&self, g: &mut Graph, ps: &ParamStore, tq: &TokenizedQuery) -> Var {
        let table = g.param(ps, self.tokens);
        let slots = g.param(ps, self.slots);
        let t = g.gather_rows(table, Arc::new(tq.ids.clone()));
        let s = g.gather_rows(slots, Arc::new(tq.slots.clone()));
        let x = g.add(t, s);
        match self.blocks.first() {
            Some(block) => {
                let bias = g.constant(block_diagonal_bias(&tq.lens));
                block.forward(g, ps, x, Some(bias))
            }
            None => x,
        }
    }

    /// One feature per hint, `h×d`: each hint's mean token feature, then the
    /// remaining blocks attend across hints.
    pub fn encode_hints(&self, g: &mut Graph, ps: &ParamStore, hints: &[Hint]) -> Result<Var> {
        let tq = self.tokenize(hints)?;
        let x = self.token_features(g, ps, &tq);
        let mut h = g.segment_mean(x, &tq.lens);
        for block in self.blocks.iter().skip(1) {
            h = block.forward(g, ps, h, None);
        }
        Ok(h)
    }

    /// Query feature `F^T`, `1×d`: mean over the hint features.
    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, query: &LocalizedQuery) -> Result<Var> {
        let h = self.encode_hints(g, ps, &query.hints)?;
        Ok(g.mean_rows(h))
    }

    /// Raw token embedding rows for `words`, `n×d`.
    pub fn embed_tokens(&self, g: &mut Graph, ps: &ParamStore, words: &[&str]) -> Result<Var> {
        let ids = words.iter().map(|w| self.vocab.id(w)).collect::<Result<Vec<_>>>()?;
        let table = g.param(ps, self.tokens);
        Ok(g.gather_rows(table, Arc::new(ids)))
    }

    /// `(F^T_color, F^T_label)` for one hint: the embedding rows of its color
    /// and label tokens.
    pub fn hint_attributes(&self, ps: &ParamStore, hint: &Hint) -> Result<(Mat, Mat)> {
        let c = self.vocab.id(hint.color.token())?;
        let l = self.vocab.id(hint.label.token())?;
        let table = ps.get(self.tokens);
        let row = |i: usize| table.row(i).to_owned().insert_axis(ndarray::Axis(0));
        Ok((row(c), row(l)))
    }

    /// Embedding rows of the nine direction tokens, in [`Direction::ALL`]
    /// order, `9×d`.
    pub fn direction_embeddings(&self, g: &mut Graph, ps: &ParamStore) -> Var {
        let words: Vec<&str> = Direction::ALL.iter().map(|d| d.token()).collect();
        self.embed_tokens(g, ps, &words).expect("direction tokens are in the vocabulary")
    }
}

/// Additive score bias that confines attention to each segment.
fn block_diagonal_bias(lens: &[usize]) -> Mat {
    let n: usize = lens.iter().sum();
    let mut seg = Vec::with_capacity(n);
    for (i, &l) in lens.iter().enumerate() {
        seg.extend(std::iter::repeat(i).take(l));
    }
    Mat::from_shape_fn((n, n), |(a, b)| if seg[a] == seg[b] { 0.0 } else { f64::NEG_INFINITY })
}

/// Encodes a query's text to a plain `1×d` matrix.
pub fn encode_text(enc: &TextEncoder, ps: &ParamStore, query: &LocalizedQuery) -> Result<Mat> {
    let mut g = Graph::new();
    let v = enc.encode(&mut g, ps, query)?;
    Ok(g.value(v).clone())
}

/// Widths of the four object sub-encoders; slice dims must sum to `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEncoderConfig {
    pub d: usize,
    pub semantic_dim: usize,
    pub color_dim: usize,
    pub position_dim: usize,
    pub count_dim: usize,
    /// Hidden widths of the shared per-point MLP.
    pub point_hidden: Vec<usize>,
    /// Hidden width of the color, position and count MLPs.
    pub attr_hidden: usize,
    /// Coordinates are divided by this before the point MLP, in meters.
    pub point_scale: f64,
    /// Point count mapping to 1.0 in the count encoding.
    pub max_points: usize,
    /// Add a learned embedding of the segmentation label to the semantic
    /// slice.
    pub label_embedding: bool,
    /// Pass the concatenated slices through a residual two-layer MLP.
    pub merge: bool,
}

impl ObjectEncoderConfig {
    /// Default split: semantic d/2, color d/8, position d/4, count d/8.
    pub fn with_dim(d: usize) -> Self {
        assert!(d % 8 == 0, "object embedding dim must be a multiple of 8");
        Self {
            d,
            semantic_dim: d / 2,
            color_dim: d / 8,
            position_dim: d / 4,
            count_dim: d / 8,
            point_hidden: vec![32, 64],
            attr_hidden: 32,
            point_scale: 10.0,
            max_points: 64,
            label_embedding: true,
            merge: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.semantic_dim + self.color_dim + self.position_dim + self.count_dim;
        if total != self.d {
            return Err(Error::InvalidConfig(format!(
                "object slices sum to {total}, expected d = {}",
                self.d
            )));
        }
        if self.point_scale <= 0.0 || self.max_points == 0 {
            return Err(Error::InvalidConfig("point scale and max points must be positive".into()));
        }
        Ok(())
    }

    /// Column range of each slice: semantic, color, position, count.
    pub fn slices(&self) -> [(usize, usize); 4] {
        let a = self.semantic_dim;
        let b = a + self.color_dim;
        let c = b + self.position_dim;
        [(0, a), (a, b), (b, c), (c, self.d)]
    }
}

/// Reference frame for object positions: coordinates enter the position
/// MLP as `(center − origin) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub origin: [f64; 3],
    pub scale: f64,
}

impl Frame {
    pub fn identity() -> Self {
        Self {
            origin: [0.0; 3],
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ObjectEncoder {
    pub cfg: ObjectEncoderConfig,
    pub point_mlp: Mlp,
    pub labels: Option<ParamId>,
    pub color_mlp: Mlp,
    pub position_mlp: Mlp,
    pub count_mlp: Mlp,
    pub merge_mlp: Option<Mlp>,
}

/// Per-slice outputs of one batched object encoding, each `p×slice`.
#[derive(Clone, Copy, Debug)]
pub struct ObjectFeatures {
    pub semantic: Var,
    pub color: Var,
    pub position: Var,
    pub count: Var,
    pub joined: Var,
}

impl ObjectEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: ObjectEncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut widths = vec![3];
        widths.extend(&cfg.point_hidden);
        widths.push(cfg.semantic_dim);
        let h = cfg.attr_hidden;
        let labels = cfg.label_embedding.then(|| {
            let m = Mat::from_shape_simple_fn((SemanticLabel::ALL.len(), cfg.semantic_dim), || {
                rng.gen_range(-0.5..0.5)
            });
            store.add(format!("{name}.labels"), m)
        });
        Ok(Self {
            point_mlp: Mlp::new(store, &format!("{name}.points"), &widths, rng),
            labels,
            color_mlp: Mlp::new(store, &format!("{name}.color"), &[3, h, h, cfg.color_dim], rng),
            position_mlp: Mlp::new(store, &format!("{name}.position"), &[3, h, h, cfg.position_dim], rng),
            count_mlp: Mlp::new(store, &format!("{name}.count"), &[1, h, h, cfg.count_dim], rng),
            merge_mlp: cfg.merge
                .then(|| Mlp::new(store, &format!("{name}.merge"), &[cfg.d, cfg.d, cfg.d], rng)),
            cfg,
        })
    }

    /// Shared per-point MLP over centered coordinates, then a column-wise max
    /// over each object's points. Returns `objects×semantic_dim`.
    pub fn encode_point_sets(&self, g: &mut Graph, ps: &ParamStore, sets: &[&[[f64; 3]]]) -> Result<Var> {
        let total: usize = sets.iter().map(|s| s.len()).sum();
        if sets.is_empty() || sets.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("point set"));
        }
        let mut coords = Mat::zeros((total, 3));
        let mut lens = Vec::with_capacity(sets.len());
        let mut row = 0;
        for set in sets {
            let c = crate::scene::mean_point(set);
            for p in set.iter() {
                for k in 0..3 {
                    coords[[row, k]] = (p[k] - c[k]) / self.cfg.point_scale;
                }
                row += 1;
            }
            lens.push(set.len());
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        let x = g.constant(coords);
        let h = self.point_mlp.forward(g, ps, x);
        Ok(g.segment_max(h, &lens))
    }

    /// Encodes `objects` into a `p×d` matrix whose columns are the
    /// concatenated semantic, color, position and count slices.
    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, objects: &[&SceneObject], frame: Frame) -> Result<ObjectFeatures> {
        if objects.is_empty() {
            return Err(Error::Empty("object list"));
        }
        let sets: Vec<&[[f64; 3]]> = objects.iter().map(|o| o.points.as_slice()).collect();
        let mut semantic = self.encode_point_sets(g, ps, &sets)?;
        if let Some(table) = self.labels {
            let t = g.param(ps, table);
            let ids: Vec<usize> = objects.iter().map(|o| o.label.index()).collect();
            let e = g.gather_rows(t, Arc::new(ids));
            semantic = g.add(semantic, e);
        }
        let p = objects.len();
        // channels in [0, 1] mapped to [-2, 2]
        let rgb = Mat::from_shape_fn((p, 3), |(i, k)| 4.0 * (objects[i].rgb[k] - 0.5));
        let pos = Mat::from_shape_fn((p, 3), |(i, k)| (objects[i].center[k] - frame.origin[k]) / frame.scale);
        let norm = (1.0 + self.cfg.max_points as f64).ln();
        let cnt = Mat::from_shape_fn((p, 1), |(i, _)| (1.0 + objects[i].points.len() as f64).ln() / norm);
        let rgb = g.constant(rgb);
        let pos = g.constant(pos);
        let cnt = g.constant(cnt);
        let color = self.color_mlp.forward(g, ps, rgb);
        let position = self.position_mlp.forward(g, ps, pos);
        let count = self.count_mlp.forward(g, ps, cnt);
        let mut joined = g.concat_cols(&[semantic, color, position, count]);

        if let Some(m) = &self.merge_mlp {
            let f = m.forward(g, ps, joined);
            joined = g.add(joined, f);
        }
        Ok(ObjectFeatures {
            semantic,
            color,
            position,
            count,
            joined,
        })
    }
}

/// Encodes a single object to a plain `1×d` matrix.
pub fn encode_object(enc: &ObjectEncoder, ps: &ParamStore, obj: &SceneObject, frame: Frame) -> Result<Mat> {
    let mut g = Graph::new();
    let f = enc.encode(&mut g, ps, &[obj], frame)?;
    Ok(g.value(f.joined).clone())
}

/// Point-set sub-embedding of one point cloud, `1×semantic_dim`.
pub fn encode_point_set(enc: &ObjectEncoder, ps: &ParamStore, points: &[[f64; 3]]) -> Result<Mat> {
    let mut g = Graph::new();
    let v = enc.encode_point_sets(&mut g, ps, &[points])?;
    Ok(g.value(v).clone())
}
