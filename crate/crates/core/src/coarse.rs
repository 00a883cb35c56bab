//! Coarse stage: text-to-submap retrieval.
//!
//! A query and a submap are embedded into the same space and compared by dot
//! product. Training minimizes the symmetric InfoNCE loss over a batch of
//! matched (query, submap) pairs:
//!
//! ```text
//! l(i) = −log softmax_j(⟨t_i, m_j⟩/τ)_i − log softmax_j(⟨m_i, t_j⟩/τ)_i
//! L    = Σ_i l(i) / B
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradBuffer, Graph, Mat, ParamStore, Var};
use crate::cmm_former::{SubmapEncoder, WindowConfig};
use crate::encoders::{Frame, ObjectEncoder, ObjectEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, StepDecay};
use crate::scene::{derive_seed, DatasetSplit, LocalizedQuery, Submap};
use crate::util::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub decay: f64,
    pub decay_every: usize,
    /// L2-normalize descriptors before the dot products.
    pub normalize: bool,
    pub negatives: NegativeMask,
}

/// Which in-batch negatives the loss ignores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMask {
    /// Every other pair in the batch is a negative.
    None,
    /// Pairs that were given the same submap.
    Duplicates,
    /// Pairs whose submap is any positive of the anchor query.
    Positives,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            batch_size: 64,
            learning_rate: 5e-4,
            epochs: 20,
            decay: 0.4,
            decay_every: 7,
            normalize: true,
            negatives: NegativeMask::None,
        }
    }
}

impl ContrastiveConfig {
    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base: self.learning_rate,
            factor: self.decay,
            every: self.decay_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::NonPositive {
                name: "temperature",
                value: self.temperature,
            });
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::NonPositive {
                name: "learning_rate",
                value: self.learning_rate,
            });
        }
        Ok(())
    }
}

fn warn_small_batch(b: usize) {
    if b < 2 {
        log::warn!("contrastive batch of {b} has no negatives; the loss is identically zero");
    }
}

/// `B×B` additive mask hiding off-diagonal pairs `(i, j)` where the submap
/// paired with row `j` is also a positive of row `i`.
pub fn false_negative_mask(paired: &[u32], positives: &[&[u32]]) -> Mat {
    let b = paired.len();
    Mat::from_shape_fn((b, b), |(i, j)| {
        if i != j && (paired[j] == paired[i] || positives[i].contains(&paired[j])) {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

/// Symmetric InfoNCE over matched rows of `text` and `submaps` (both `B×d`).
/// `mask`, when given, is added to the similarity matrix before both
/// softmaxes.
pub fn contrastive_loss(
    g: &mut Graph,
    text: Var,
    submaps: Var,
    temperature: f64,
    normalize: bool,
    mask: Option<&Mat>,
) -> Var {
    let b = g.shape(text).0;
    warn_small_batch(b);
    let (t, m) = if normalize {
        (g.row_l2_normalize(text), g.row_l2_normalize(submaps))
    } else {
        (text, submaps)
    };
    let sim = g.matmul_bt(t, m);
    let mut sim = g.scale(sim, 1.0 / temperature);
    if let Some(m) = mask {
        let m = g.constant(m.clone());
        sim = g.add(sim, m);
    }
    let rows = g.log_softmax(sim);
    let simt = g.transpose(sim);
    let cols = g.log_softmax(simt);
    let dr = g.diag(rows);
    let dc = g.diag(cols);
    let both = g.add(dr, dc);
    let total = g.sum(both);
    g.scale(total, -1.0 / b as f64)
}

/// Plain-matrix form of [`contrastive_loss`].
pub fn contrastive_loss_value(text: &Mat, submaps: &Mat, temperature: f64, normalize: bool) -> f64 {
    let mut g = Graph::new();
    let t = g.constant(text.clone());
    let m = g.constant(submaps.clone());
    let l = contrastive_loss(&mut g, t, m, temperature, normalize, None);
    g.scalar(l)
}

/// Everything the coarse stage trains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseConfig {
    pub text: TextEncoderConfig,
    pub object: ObjectEncoderConfig,
    pub window: WindowConfig,
    pub train: ContrastiveConfig,
}

impl CoarseConfig {
    pub fn with_dim(d: usize) -> Self {
        Self {
            text: TextEncoderConfig::with_dim(d),
            object: ObjectEncoderConfig::with_dim(d),
            window: WindowConfig::with_dim(d),
            train: ContrastiveConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.object.validate()?;
        self.window.validate()?;
        self.train.validate()?;
        if self.text.d != self.window.d {
            return Err(Error::InvalidConfig(format!(
                "text dim {} differs from submap dim {}",
                self.text.d, self.window.d
            )));
        }
        Ok(())
    }
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self::with_dim(256)
    }
}

/// Seed of the object ordering used for a submap outside training.
pub fn eval_order_seed(submap: &Submap) -> u64 {
    derive_seed(0x5eed, submap.id as u64)
}

pub fn submap_frame(submap: &Submap) -> Frame {
    Frame {
        origin: submap.center(),
        scale: submap.edge / 2.0,
    }
}

#[derive(Clone, Debug)]
pub struct CoarseModel {
    pub cfg: CoarseConfig,
    pub params: ParamStore,
    pub text: TextEncoder,
    pub submap: SubmapEncoder,
}

impl CoarseModel {
    /// Fresh model; parameter values depend only on `cfg` and `seed`.
    pub fn new(cfg: CoarseConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let text = TextEncoder::new(&mut params, "text", cfg.text.clone(), &mut rng);
        let objects = ObjectEncoder::new(&mut params, "object", cfg.object.clone(), &mut rng)?;
        let submap = SubmapEncoder::new(&mut params, "cmmt", objects, cfg.window.clone(), &mut rng)?;
        Ok(Self {
            cfg,
            params,
            text,
            submap,
        })
    }

    pub fn query_descriptor(&self, g: &mut Graph, query: &LocalizedQuery) -> Result<Var> {
        self.text.encode(g, &self.params, query)
    }

    pub fn submap_descriptor(&self, g: &mut Graph, split: &DatasetSplit, submap: &Submap, order_seed: u64) -> Result<Var> {
        let objects = split.submap_objects(submap);
        self.submap
            .descriptor(g, &self.params, &objects, submap_frame(submap), order_seed)
    }

    /// Query descriptors as rows, normalized when training normalizes.
    pub fn encode_queries(&self, queries: &[LocalizedQuery]) -> Result<Mat> {
        let d = self.cfg.text.d;
        let mut out = Mat::zeros((queries.len(), d));
        for (i, q) in queries.iter().enumerate() {
            let mut g = Graph::new();
            let v = self.query_descriptor(&mut g, q)?;
            out.row_mut(i).assign(&g.value(v).row(0));
        }
        if self.cfg.train.normalize {
            normalize_rows(&mut out);
        }
        Ok(out)
    }
}

fn normalize_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Descriptor matrix of every submap in a split, one row per submap.
#[derive(Clone, Debug, PartialEq)]
pub struct SubmapIndex {
    pub descriptors: Mat,
    pub ids: Vec<u32>,
    pub normalized: bool,
}

const INDEX_MAGIC: &[u8; 8] = b"CMMIDX01";

impl SubmapIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Matrix bytes: magic, row and column counts as little-endian `u64`,
    /// then the row-major entries as little-endian `f64`.
    pub fn matrix_bytes(&self) -> Vec<u8> {
        let (r, c) = self.descriptors.dim();
        let mut out = Vec::with_capacity(24 + 8 * r * c);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(r as u64).to_le_bytes());
        out.extend_from_slice(&(c as u64).to_le_bytes());
        for v in self.descriptors.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Writes `<stem>.bin` and the id manifest `<stem>.ids.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.bin")), &self.matrix_bytes())?;
        let manifest = serde_json::json!({ "ids": self.ids, "normalized": self.normalized });
        write_atomic(&dir.join(format!("{stem}.ids.json")), &serde_json::to_vec(&manifest)?)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let bin = dir.join(format!("{stem}.bin"));
        let ids_path = dir.join(format!("{stem}.ids.json"));
        let read = |p: &Path| {
            fs::read(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(p.to_path_buf()),
                _ => Error::Io(e),
            })
        };
        let bytes = read(&bin)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", bin.display()));
        if bytes.len() < 24 || &bytes[..8] != INDEX_MAGIC {
            return Err(bad("not a descriptor matrix"));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()) as usize;
        let (r, c) = (word(8), word(16));
        if bytes.len() != 24 + 8 * r * c {
            return Err(bad("size does not match the header"));
        }
        let vals: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let descriptors = Mat::from_shape_vec((r, c), vals).map_err(|e| bad(&e.to_string()))?;
        #[derive(Deserialize)]
        struct Manifest {
            ids: Vec<u32>,
            normalized: bool,
        }
        let m: Manifest = serde_json::from_slice(&read(&ids_path)?)?;
        if m.ids.len() != r {
            return Err(bad("id manifest length differs from the matrix"));
        }
        Ok(Self {
            descriptors,
            ids: m.ids,
            normalized: m.normalized,
        })
    }
}

/// Encodes every submap of `split` with its evaluation ordering.
pub fn build_index(model: &CoarseModel, split: &DatasetSplit) -> Result<SubmapIndex> {
    if split.submaps.is_empty() {
        return Err(Error::Empty("submap list"));
    }
    let d = model.cfg.window.d;
    let mut descriptors = Mat::zeros((split.submaps.len(), d));
    for (i, s) in split.submaps.iter().enumerate() {
        let mut g = Graph::new();
        let v = model.submap_descriptor(&mut g, split, s, eval_order_seed(s))?;
        descriptors.row_mut(i).assign(&g.value(v).row(0));
    }
    let normalized = model.cfg.train.normalize;
    if normalized {
        normalize_rows(&mut descriptors);
    }
    Ok(SubmapIndex {
        descriptors,
        ids: split.submaps.iter().map(|s| s.id).collect(),
        normalized,
    })
}

/// Ids of the `k` most similar submaps, by descending dot product with ties
/// broken toward the lower id.
pub fn retrieve_topk(query: &Array1<f64>, index: &SubmapIndex, k: usize) -> Result<Vec<u32>> {
    if k > index.len() {
        return Err(Error::KTooLarge { k, size: index.len() });
    }
    let mut q = query.clone();
    if index.normalized {
        let n = q.dot(&q).sqrt();
        if n > 0.0 {
            q /= n;
        }
    }
    let scores = index.descriptors.dot(&q);
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(index.ids[a].cmp(&index.ids[b])));
    Ok(order[..k].iter().map(|&i| index.ids[i]).collect())
}

/// Top-`k` rankings for every row of `queries`.
pub fn rank_all(queries: &Mat, index: &SubmapIndex, k: usize) -> Result<Vec<Vec<u32>>> {
    queries
        .axis_iter(Axis(0))
        .map(|q| retrieve_topk(&q.to_owned(), index, k))
        .collect()
}

/// Fraction of queries with a positive id among the first `k` ranked ids.
pub fn recall_at_k(rankings: &[Vec<u32>], positives: &[Vec<u32>], k: usize) -> Result<f64> {
    if rankings.len() != positives.len() {
        return Err(Error::InvalidConfig(format!(
            "{} rankings for {} positive sets",
            rankings.len(),
            positives.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::Empty("rankings"));
    }
    let mut hits = 0;
    for (i, (r, p)) in rankings.iter().zip(positives).enumerate() {
        if p.is_empty() {
            return Err(Error::NoPositives(i as u32));
        }
        if r.iter().take(k).any(|id| p.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Probability that a uniformly random ranking of `size` items puts at
/// least one of `positives` items in its first `k`.
pub fn chance_hit_probability(size: usize, positives: usize, k: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    if k + positives > size {
        return 1.0;
    }
    // C(size − positives, k) / C(size, k)
    let miss: f64 = (0..k)
        .map(|i| (size - positives - i) as f64 / (size - i) as f64)
        .product();
    1.0 - miss
}

/// Mean and standard deviation of recall@k under random rankings.
pub fn chance_recall(size: usize, positive_counts: &[usize], k: usize) -> (f64, f64) {
    let n = positive_counts.len() as f64;
    let ps: Vec<f64> = positive_counts
        .iter()
        .map(|&m| chance_hit_probability(size, m, k))
        .collect();
    let mean = ps.iter().sum::<f64>() / n;
    let var = ps.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (n * n);
    (mean, var.sqrt())
}

/// Retrieval recall at each `ks` for the queries of `split`.
pub fn evaluate_retrieval(model: &CoarseModel, split: &DatasetSplit, ks: &[usize]) -> Result<Vec<f64>> {
    let index = build_index(model, split)?;
    let queries = model.encode_queries(&split.queries)?;
    let kmax = ks.iter().copied().max().unwrap_or(1).min(index.len());
    let rankings = rank_all(&queries, &index, kmax)?;
    let positives: Vec<Vec<u32>> = split.queries.iter().map(|q| q.positive_submaps.clone()).collect();
    ks.iter().map(|&k| recall_at_k(&rankings, &positives, k)).collect()
}

/// One line of the training metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub recall_1: Option<f64>,
    pub recall_3: Option<f64>,
    pub recall_5: Option<f64>,
}

/// Appends one JSON line to `path`.
pub fn append_record<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Metric log to append to.
    pub log: Option<&'a Path>,
    /// Skip the per-epoch validation pass.
    pub skip_validation: bool,
}

/// Trains a fresh model on `train`, validating on `val` after every epoch.
/// Each query is paired with one positive submap drawn per epoch.
pub fn train_coarse(
    train: &DatasetSplit,
    val: &DatasetSplit,
    cfg: &CoarseConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(CoarseModel, Vec<EpochRecord>)> {
    if train.queries.is_empty() || train.submaps.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.queries.is_empty() && !opts.skip_validation {
        return Err(Error::Empty("validation split"));
    }
    let mut model = CoarseModel::new(cfg.clone(), derive_seed(seed, 0))?;
    let mut adam = Adam::new(&model.params);
    let mut grads = GradBuffer::zeros_like(&model.params);
    let schedule = cfg.train.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut records = Vec::new();
    for epoch in 0..cfg.train.epochs {
        let lr = schedule.rate(epoch);
        let mut order: Vec<usize> = (0..train.queries.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let mut g = Graph::new();
            let mut ts = Vec::with_capacity(chunk.len());
            let mut ms = Vec::with_capacity(chunk.len());
            let mut ids = Vec::with_capacity(chunk.len());
            for &qi in chunk {
                let q = &train.queries[qi];
                let pos = *q
                    .positive_submaps
                    .choose(&mut rng)
                    .ok_or(Error::NoPositives(q.id))?;
                let order_seed = rng.gen::<u64>();
                ts.push(model.query_descriptor(&mut g, q)?);
                ms.push(model.submap_descriptor(&mut g, train, train.submap(pos), order_seed)?);
                ids.push(pos);
            }
            let t = g.concat_rows(&ts);
            let m = g.concat_rows(&ms);
            let mask = match cfg.train.negatives {
                NegativeMask::None => None,
                NegativeMask::Duplicates => {
                    let own: Vec<[u32; 1]> = ids.iter().map(|&i| [i]).collect();
                    let pos: Vec<&[u32]> = own.iter().map(|o| o.as_slice()).collect();
                    Some(false_negative_mask(&ids, &pos))
                }
                NegativeMask::Positives => {
                    let pos: Vec<&[u32]> = chunk
                        .iter()
                        .map(|&qi| train.queries[qi].positive_submaps.as_slice())
                        .collect();
                    Some(false_negative_mask(&ids, &pos))
                }
            };
            let loss = contrastive_loss(&mut g, t, m, cfg.train.temperature, cfg.train.normalize, mask.as_ref());
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: "coarse",
                    epoch: epoch + 1,
                    loss: value,
                });
            }
            grads.clear();
            grads.accumulate(&g.backward(loss));
            adam.step(&mut model.params, &grads, lr);
            loss_sum += value;
            batches += 1;
        }
        let mut record = EpochRecord {
            epoch: epoch + 1,
            split: train.name.clone(),
            loss: loss_sum / batches as f64,
            recall_1: None,
            recall_3: None,
            recall_5: None,
        };
        if !opts.skip_validation {
            let r = evaluate_retrieval(&model, val, &[1, 3, 5])?;
            record.recall_1 = Some(r[0]);
            record.recall_3 = Some(r[1]);
            record.recall_5 = Some(r[2]);
        }
        log::info!(
            "coarse epoch {} loss {:.4} val r@1 {:?} r@5 {:?}",
            record.epoch,
            record.loss,
            record.recall_1,
            record.recall_5
        );
        if let Some(path) = opts.log {
            append_record(path, &record)?;
        }
        records.push(record);
    }
    Ok((model, records))
}
