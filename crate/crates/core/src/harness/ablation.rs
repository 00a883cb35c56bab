//! Paired ablations: every variant shares the base config except one factor
//! and runs on the same seeds.

use std::collections::HashMap;
use std::str::FromStr;

use crate::cmm_former::{WeightAssignment, WindowFamily};
use crate::coarse::CoarseModel;
use crate::error::{Error, Result};
use crate::fine::{median, oracle_submap_errors};
use crate::harness::config::{config_diff, ExperimentConfig, SeedStream};
use crate::harness::pipeline::{eval_split, fit_coarse, fit_fine, fit_prealign, retrieval_rows};
use crate::harness::results::ResultsTable;
use crate::scene::{config_hash, generate_dataset, DatasetSplit};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    WindowFamily,
    WeightAssignment,
    NoiseSweep,
    FineModules,
    LayerCount,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::WindowFamily,
        Ablation::WeightAssignment,
        Ablation::NoiseSweep,
        Ablation::FineModules,
        Ablation::LayerCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::WindowFamily => "window-family",
            Ablation::WeightAssignment => "weight-assignment",
            Ablation::NoiseSweep => "noise-sweep",
            Ablation::FineModules => "fine-modules",
            Ablation::LayerCount => "layer-count",
        }
    }

    /// Config keys a variant may change.
    pub fn factor_keys(self) -> &'static [&'static str] {
        match self {
            Ablation::WindowFamily => &["coarse.window.family"],
            Ablation::WeightAssignment => &["coarse.window.assignment.kind", "coarse.window.assignment.length_scale"],
            Ablation::NoiseSweep => &["eval.label_noise"],
            Ablation::FineModules => &["fine.prealign", "fine.cdi"],
            Ablation::LayerCount => &["coarse.window.layers"],
        }
    }

    /// Named variants of `base`.
    pub fn variants(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Ablation::WindowFamily => vec![
                ("cauchy".into(), with(&|c| c.coarse.window.family = WindowFamily::Cauchy)),
                ("gaussian".into(), with(&|c| c.coarse.window.family = WindowFamily::Gaussian)),
            ],
            Ablation::WeightAssignment => vec![
                ("semantic".into(), with(&|c| c.coarse.window.assignment = WeightAssignment::Semantic)),
                (
                    "distance".into(),
                    with(&|c| c.coarse.window.assignment = WeightAssignment::Distance { length_scale: 10.0 }),
                ),
            ],
            Ablation::NoiseSweep => [0.0, 0.1, 0.2, 0.3]
                .iter()
                .map(|&r| (format!("noise-{r}"), with(&|c| c.eval.label_noise = r)))
                .collect(),
            Ablation::FineModules => [("base", false, false), ("pa", true, false), ("cdi", false, true), ("pa+cdi", true, true)]
                .iter()
                .map(|&(n, pa, cdi)| {
                    (
                        n.to_string(),
                        with(&|c| {
                            c.fine.prealign = pa;
                            c.fine.cdi = cdi;
                        }),
                    )
                })
                .collect(),
            Ablation::LayerCount => (0..3)
                .map(|l| (format!("layers-{l}"), with(&|c| c.coarse.window.layers = l)))
                .collect(),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownAblation(s.to_string()))
    }
}

/// Fails unless `variant` differs from `base` only in `allowed` keys.
pub fn check_single_factor(base: &ExperimentConfig, variant: &ExperimentConfig, allowed: &[&str]) -> Result<()> {
    let stray: Vec<String> = config_diff(base, variant)
        .into_iter()
        .filter(|k| !allowed.contains(&k.as_str()))
        .collect();
    if stray.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("ablation variant also changes {stray:?}")))
    }
}

/// Runs every variant of `ablation` on every seed. Coarse ablations report
/// test retrieval recall; the fine ablation reports the median and mean
/// error on each test query's own positive submap.
pub fn ablate(ablation: Ablation, base: &ExperimentConfig, seeds: &[u64]) -> Result<ResultsTable> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Empty("ablation seeds"));
    }
    let variants = ablation.variants(base);
    for (_, v) in &variants {
        v.validate()?;
        check_single_factor(base, v, ablation.factor_keys())?;
    }
    let mut table = ResultsTable::default();
    for &seed in seeds {
        let mut data: Option<[DatasetSplit; 3]> = None;
        let mut coarse_cache: HashMap<String, CoarseModel> = HashMap::new();
        for (name, v) in &variants {
            let mut cfg = v.clone();
            cfg.seed = seed;
            if data.is_none() {
                data = Some(generate_dataset(&cfg.data, cfg.seed_for(SeedStream::Data))?);
            }
            let [train, val, test] = data.as_ref().expect("generated above");
            let experiment = format!("{}/{name}", ablation.name());
            log::info!("ablation {experiment} seed {seed}");
            if ablation == Ablation::FineModules {
                let init = fit_prealign(&cfg, train, None)?;
                let model = fit_fine(&cfg, init, train, None)?;
                let mut errs = oracle_submap_errors(&model, test)?;
                let mean = errs.iter().sum::<f64>() / errs.len() as f64;
                let med = median(&mut errs).expect("test split has queries");
                table.push(&experiment, "median_error", None, None, med, &test.name, seed);
                table.push(&experiment, "mean_error", None, None, mean, &test.name, seed);
            } else {
                let key = config_hash(&(seed, &cfg.data, &cfg.coarse));
                if !coarse_cache.contains_key(&key) {
                    let model = fit_coarse(&cfg, train, val, None)?;
                    coarse_cache.insert(key.clone(), model);
                }
                let model = &coarse_cache[&key];
                let split = eval_split(&cfg, test)?;
                table.extend(retrieval_rows(&cfg, &experiment, model, &split)?);
            }
        }
    }
    Ok(table)
}
