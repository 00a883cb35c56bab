//! Stage functions over a run directory.
//!
//! ```text
//! <out>/config.txt           exact config of the run
//! <out>/data/{train,val,test}.jsonl
//! <out>/coarse.ckpt          coarse.log.jsonl
//! <out>/prealign.ckpt        fine.log.jsonl
//! <out>/fine.ckpt
//! <out>/index.bin            index.ids.json
//! <out>/localization.jsonl   one record per (query, retrieved submap)
//! <out>/results.csv          report.md
//! ```
//!
//! Every trained model is rounded to `f32` before it is saved and before it
//! is used again, so a stage that reloads a checkpoint sees exactly the
//! weights the producing stage evaluated.

use std::path::{Path, PathBuf};

use crate::coarse::{build_index, evaluate_retrieval, train_coarse, CoarseModel, SubmapIndex, TrainOptions};
use crate::error::{Error, Result};
use crate::fine::{localization_recall, localize, median_top1_error, train_fine, train_prealign, FineModel};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{ExperimentConfig, SeedStream};
use crate::harness::results::{render_markdown, ResultsTable};
use crate::scene::{generate_dataset, inject_label_noise, load_split, save_split, DatasetSplit};
use crate::util::write_atomic;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Paths of every artifact in a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.jsonl"))
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}.ckpt"))
    }

    pub fn log(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}.log.jsonl"))
    }

    pub fn localization(&self) -> PathBuf {
        self.root.join("localization.jsonl")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Hash a coarse checkpoint is tied to.
pub fn coarse_hash(cfg: &ExperimentConfig) -> String {
    crate::scene::config_hash(&cfg.coarse)
}

/// Hash a fine checkpoint is tied to.
pub fn fine_hash(cfg: &ExperimentConfig) -> String {
    crate::scene::config_hash(&cfg.fine)
}

/// Writes the config, then generates and saves the three splits.
pub fn generate(cfg: &ExperimentConfig, dir: &RunDir) -> Result<[DatasetSplit; 3]> {
    cfg.validate()?;
    cfg.save(&dir.config())?;
    let splits = generate_dataset(&cfg.data, cfg.seed_for(SeedStream::Data))?;
    for (s, name) in splits.iter().zip(SPLITS) {
        save_split(s, &dir.split(name))?;
    }
    Ok(splits)
}

pub fn load_splits(dir: &RunDir) -> Result<[DatasetSplit; 3]> {
    for name in SPLITS {
        require(&dir.split(name))?;
    }
    Ok([
        load_split(&dir.split("train"))?,
        load_split(&dir.split("val"))?,
        load_split(&dir.split("test"))?,
    ])
}

fn reset_log(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    Ok(())
}

/// Trains the coarse model on in-memory splits and rounds it to `f32`.
pub fn fit_coarse(cfg: &ExperimentConfig, train: &DatasetSplit, val: &DatasetSplit, log: Option<&Path>) -> Result<CoarseModel> {
    let opts = TrainOptions {
        log,
        skip_validation: false,
    };
    let (mut model, _) = train_coarse(train, val, &cfg.coarse, cfg.seed_for(SeedStream::Coarse), &opts)?;
    model.params.round_to_f32();
    Ok(model)
}

pub fn train_coarse_stage(cfg: &ExperimentConfig, dir: &RunDir) -> Result<CoarseModel> {
    let [train, val, _] = load_splits(dir)?;
    reset_log(&dir.log("coarse"))?;
    let model = fit_coarse(cfg, &train, &val, Some(&dir.log("coarse")))?;
    Checkpoint::from_params("coarse", &coarse_hash(cfg), &model.params).save(&dir.checkpoint("coarse"))?;
    Ok(model)
}

pub fn load_coarse(cfg: &ExperimentConfig, dir: &RunDir) -> Result<CoarseModel> {
    let ck = Checkpoint::load(&dir.checkpoint("coarse"))?;
    ck.expect("coarse", &coarse_hash(cfg))?;
    let mut model = CoarseModel::new(cfg.coarse.clone(), 0)?;
    ck.restore(&mut model.params)?;
    Ok(model)
}

/// Fresh fine model, pre-aligned when the config asks for it, rounded to
/// `f32`.
pub fn fit_prealign(cfg: &ExperimentConfig, train: &DatasetSplit, log: Option<&Path>) -> Result<FineModel> {
    let seed = cfg.seed_for(SeedStream::Fine);
    let mut model = FineModel::new(cfg.fine.clone(), crate::scene::derive_seed(seed, 0))?;
    if cfg.fine.prealign {
        train_prealign(&mut model, train, crate::scene::derive_seed(seed, 1), log)?;
    }
    model.params.round_to_f32();
    Ok(model)
}

/// Trains the regression from `model`'s current weights and rounds the
/// result to `f32`.
pub fn fit_fine(cfg: &ExperimentConfig, mut model: FineModel, train: &DatasetSplit, log: Option<&Path>) -> Result<FineModel> {
    let seed = crate::scene::derive_seed(cfg.seed_for(SeedStream::Fine), 2);
    train_fine(&mut model, train, seed, log)?;
    model.params.round_to_f32();
    Ok(model)
}

pub fn prealign_stage(cfg: &ExperimentConfig, dir: &RunDir) -> Result<FineModel> {
    let [train, _, _] = load_splits(dir)?;
    reset_log(&dir.log("fine"))?;
    let model = fit_prealign(cfg, &train, Some(&dir.log("fine")))?;
    Checkpoint::from_params("prealign", &fine_hash(cfg), &model.params).save(&dir.checkpoint("prealign"))?;
    Ok(model)
}

fn load_fine_stage(cfg: &ExperimentConfig, dir: &RunDir, stage: &str) -> Result<FineModel> {
    let ck = Checkpoint::load(&dir.checkpoint(stage))?;
    ck.expect(stage, &fine_hash(cfg))?;
    let mut model = FineModel::new(cfg.fine.clone(), 0)?;
    ck.restore(&mut model.params)?;
    Ok(model)
}

pub fn train_fine_stage(cfg: &ExperimentConfig, dir: &RunDir) -> Result<FineModel> {
    let [train, _, _] = load_splits(dir)?;
    let init = load_fine_stage(cfg, dir, "prealign")?;
    let model = fit_fine(cfg, init, &train, Some(&dir.log("fine")))?;
    Checkpoint::from_params("fine", &fine_hash(cfg), &model.params).save(&dir.checkpoint("fine"))?;
    Ok(model)
}

pub fn load_fine(cfg: &ExperimentConfig, dir: &RunDir) -> Result<FineModel> {
    load_fine_stage(cfg, dir, "fine")
}

/// The test split, with label noise injected when the config asks for it.
pub fn eval_split(cfg: &ExperimentConfig, test: &DatasetSplit) -> Result<DatasetSplit> {
    if cfg.eval.label_noise > 0.0 {
        inject_label_noise(test, cfg.eval.label_noise, cfg.seed_for(SeedStream::Noise))
    } else {
        Ok(test.clone())
    }
}

/// Retrieval recall rows of `coarse` on `split`.
pub fn retrieval_rows(cfg: &ExperimentConfig, experiment: &str, coarse: &CoarseModel, split: &DatasetSplit) -> Result<ResultsTable> {
    let mut table = ResultsTable::default();
    let ks: Vec<usize> = cfg.eval.retrieval_ks.iter().map(|&k| k.min(split.submaps.len())).collect();
    let r = evaluate_retrieval(coarse, split, &ks)?;
    for (&k, v) in cfg.eval.retrieval_ks.iter().zip(r) {
        table.push(experiment, "retrieval_recall", Some(k), None, v, &split.name, cfg.seed);
    }
    Ok(table)
}

/// Full evaluation on in-memory models: retrieval recall, the localization
/// recall grid and the median top-1 error.
pub fn evaluate(
    cfg: &ExperimentConfig,
    experiment: &str,
    coarse: &CoarseModel,
    fine: &FineModel,
    split: &DatasetSplit,
) -> Result<(ResultsTable, SubmapIndex, Vec<crate::fine::LocalizationRecord>)> {
    let mut table = retrieval_rows(cfg, experiment, coarse, split)?;
    let index = build_index(coarse, split)?;
    let kmax = *cfg.eval.localization_ks.iter().max().expect("validated non-empty");
    let records = localize(coarse, &index, fine, split, kmax)?;
    let grid = localization_recall(&records, &cfg.eval.localization_ks, &cfg.eval.thresholds, cfg.fine.policy)?;
    for (a, &k) in cfg.eval.localization_ks.iter().enumerate() {
        for (b, &e) in cfg.eval.thresholds.iter().enumerate() {
            table.push(experiment, "localization_recall", Some(k), Some(e), grid[[a, b]], &split.name, cfg.seed);
        }
    }
    if let Some(m) = median_top1_error(&records) {
        table.push(experiment, "median_error", Some(1), None, m, &split.name, cfg.seed);
    }
    Ok((table, index, records))
}

/// Loads the checkpoints and test split, checking every input exists before
/// doing any work, then writes the index, localization records, results
/// CSV and report.
pub fn eval_stage(cfg: &ExperimentConfig, dir: &RunDir) -> Result<ResultsTable> {
    require(&dir.split("test"))?;
    require(&dir.checkpoint("coarse"))?;
    require(&dir.checkpoint("fine"))?;
    let coarse = load_coarse(cfg, dir)?;
    let fine = load_fine(cfg, dir)?;
    let test = eval_split(cfg, &load_split(&dir.split("test"))?)?;
    let (table, index, records) = evaluate(cfg, "end-to-end", &coarse, &fine, &test)?;
    index.save(&dir.root, "index")?;
    let mut lines = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut lines, r)?;
        lines.push(b'\n');
    }
    write_atomic(&dir.localization(), &lines)?;
    table.save_csv(&dir.results())?;
    let md = format!("# Results\n\nconfig hash {}\n\n{}", cfg.hash(), render_markdown(&table));
    write_atomic(&dir.report(), md.as_bytes())?;
    Ok(table)
}

/// generate → train-coarse → prealign → train-fine → eval. A failure is
/// reported with the name of the stage it happened in.
pub fn run_end_to_end(cfg: &ExperimentConfig, out: &Path) -> Result<ResultsTable> {
    stage("config", cfg.validate())?;
    let dir = RunDir::new(out);
    stage("generate", generate(cfg, &dir))?;
    stage("train-coarse", train_coarse_stage(cfg, &dir))?;
    stage("prealign", prealign_stage(cfg, &dir))?;
    stage("train-fine", train_fine_stage(cfg, &dir))?;
    stage("eval", eval_stage(cfg, &dir))
}
