#![allow(dead_code)]

use cmmloc::autodiff::Mat;
use cmmloc::harness::{ExperimentConfig, SeedStream};
use cmmloc::scene::{generate_split, DatasetSplit};

/// Prints the criterion's verdict line, then fails the test if it did not
/// pass.
pub fn verdict(criterion: &str, pass: bool, detail: String) {
    println!("{} {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{criterion}: {detail}");
}

/// `softmax(q·kᵀ/√d + bias) · v` with explicit loops.
pub fn naive_attention(q: &Mat, k: &Mat, v: &Mat, bias: Option<&Mat>) -> Mat {
    let (n, d) = q.dim();
    let m = k.nrows();
    let mut out = Mat::zeros((n, v.ncols()));
    for i in 0..n {
        let mut s: Vec<f64> = (0..m)
            .map(|j| {
                let dot: f64 = (0..d).map(|c| q[[i, c]] * k[[j, c]]).sum();
                (dot + bias.map_or(0.0, |b| b[[i, j]])) / (d as f64).sqrt()
            })
            .collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter_mut().map(|x| {
            *x = (*x - max).exp();
            *x
        }).sum();
        for j in 0..m {
            for c in 0..v.ncols() {
                out[[i, c]] += s[j] / z * v[[j, c]];
            }
        }
    }
    out
}

pub fn standard() -> ExperimentConfig {
    ExperimentConfig::default()
}

/// Four held-out scenes of the standard data config.
pub fn chance_split(cfg: &ExperimentConfig) -> DatasetSplit {
    let d = &cfg.data;
    let first = d.train_scenes + d.val_scenes + d.test_scenes;
    generate_split("chance", d, cfg.seed_for(SeedStream::Data), first, 4).unwrap()
}

/// A config small enough to run every stage in seconds.
pub fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_scenes = 1;
    cfg.data.val_scenes = 1;
    cfg.data.test_scenes = 1;
    cfg.data.queries_per_scene = 24;
    cfg.coarse = cmmloc::coarse::CoarseConfig::with_dim(32);
    cfg.coarse.train.epochs = 1;
    cfg.coarse.train.batch_size = 8;
    cfg.fine = cmmloc::fine::FineConfig::with_dim(32);
    cfg.fine.epochs = 1;
    cfg.fine.prealign_epochs = 1;
    cfg.fine.batch_size = 8;
    cfg
}

/// Reduced standard config used for the paired ablations.
pub fn ablation_base() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_scenes = 8;
    cfg.coarse = cmmloc::coarse::CoarseConfig::with_dim(64);
    cfg.coarse.train.epochs = 6;
    cfg
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation of the paired differences `a − b`.
pub fn paired_sd(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() as f64 - 1.0).max(1.0)).sqrt()
}

pub fn centroid_task() -> ExperimentConfig {
    ExperimentConfig::centroid_task()
}
