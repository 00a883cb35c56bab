//! Acceptance suite. Every test prints one `PASS` or `FAIL` line naming its
//! criterion (run with `--nocapture` to see them) and then asserts.

mod common;

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use cmmloc::autodiff::{Graph, Mat, ParamStore};
use cmmloc::cmm_former::{cauchy_matrix, gaussian_matrix, Consolidation, Window, WindowConfig};
use cmmloc::coarse::{
    chance_recall, contrastive_loss, contrastive_loss_value, rank_all, recall_at_k, retrieve_topk, CoarseModel,
    SubmapIndex,
};
use cmmloc::fine::{cdi_attention, localization_loss, pairwise_distance_matrix, prealign_loss, relative_position_bias};
use cmmloc::gradcheck::{random_mat, sampled_relative_error, FD_STEP};
use cmmloc::harness::pipeline;
use cmmloc::harness::{ablate, run_end_to_end, Ablation, ResultsTable, SeedStream};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{naive_attention, verdict};

const WEIGHT_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const IDENTITY_TOL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-6;

#[test]
fn closed_form_weights() {
    let mut worst = 0.0f64;
    for scale in [0.5, 1.0, 2.0] {
        let c = cauchy_matrix(6, scale).unwrap();
        let g = gaussian_matrix(6, scale).unwrap();
        for o in 0..=5usize {
            let x = o as f64;
            let cauchy = scale / (PI * (scale * scale + x * x));
            let gauss = (-x * x / (2.0 * scale * scale)).exp() / (2.0 * PI * scale * scale).sqrt();
            for (i, j) in [(0, o), (o, 0), (5 - o, 5)] {
                worst = worst.max((c[[i, j]] - cauchy).abs()).max((g[[i, j]] - gauss).abs());
            }
        }
    }
    let c = cauchy_matrix(11, 1.0).unwrap();
    let g = gaussian_matrix(11, 1.0).unwrap();
    let crossover = (0..11usize).all(|j| {
        let off = (j as i64 - 5).abs();
        match off {
            0 | 1 => c[[5, j]] < g[[5, j]],
            _ => c[[5, j]] > g[[5, j]],
        }
    });
    verdict(
        "closed-form weights",
        worst <= WEIGHT_TOL && crossover,
        format!("max deviation {worst:.2e} (tol {WEIGHT_TOL:e}), crossover at |offset| 2: {crossover}"),
    );
}

fn projection_loss(g: &mut Graph, y: cmmloc::autodiff::Var, r: &Mat) -> cmmloc::autodiff::Var {
    let r = g.constant(r.clone());
    let m = g.mul(y, r);
    g.sum(m)
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, p: usize, d: usize, e: f64| {
        worst.push((format!("{name} p={p} d={d}"), e));
    };
    let samples = 6;
    for p in [1, 4, 28] {
        for d in [16, 128, 256] {
            let mut cfg = WindowConfig::with_dim(d);
            cfg.d_k = d.min(64);
            let mut ps = ParamStore::new();
            let window = Window::new(&mut ps, "w", &cfg, &mut rng);
            let weights = Arc::new(cauchy_matrix(p, 1.0).unwrap());
            let r = random_mat(&mut rng, p, d, 1.0);
            let x = random_mat(&mut rng, p, d, 1.0);
            let e = sampled_relative_error(&mut rng, &ps, &[x], samples, FD_STEP, |g, ps, v| {
                let y = window.forward(g, ps, v[0], &weights, None).unwrap();
                projection_loss(g, y, &r)
            });
            record("window_forward", p, d, e);

            let mut ps = ParamStore::new();
            let cons = Consolidation::new(&mut ps, "c", &cfg, &mut rng);
            let xs: Vec<Mat> = (0..3).map(|_| random_mat(&mut rng, p, d, 1.0)).collect();
            let e = sampled_relative_error(&mut rng, &ps, &xs, samples, FD_STEP, |g, ps, v| {
                let y = cons.forward(g, ps, v).unwrap();
                projection_loss(g, y, &r)
            });
            record("consolidate", p, d, e);

            let empty = ParamStore::new();
            let qkv: Vec<Mat> = vec![
                random_mat(&mut rng, p, d, 1.0),
                random_mat(&mut rng, p, d, 1.0),
                random_mat(&mut rng, p, d, 1.0),
                random_mat(&mut rng, p, p, 2.0),
            ];
            let e = sampled_relative_error(&mut rng, &empty, &qkv, samples, FD_STEP, |g, _, v| {
                let y = cdi_attention(g, v[0], v[1], v[2], Some(v[3]), None).unwrap();
                projection_loss(g, y, &r)
            });
            record("cdi_attention", p, d, e);

            let pre: Vec<Mat> = (0..4).map(|_| random_mat(&mut rng, p, d, 1.0)).collect();
            let e = sampled_relative_error(&mut rng, &empty, &pre, samples, FD_STEP, |g, _, v| {
                prealign_loss(g, v[0], v[1], v[2], v[3]).unwrap()
            });
            record("prealign_loss", p, d, e);

            let pair: Vec<Mat> = (0..2).map(|_| random_mat(&mut rng, p, d, 1.0)).collect();
            let e = sampled_relative_error(&mut rng, &empty, &pair, samples, FD_STEP, |g, _, v| {
                contrastive_loss(g, v[0], v[1], 0.1, true, None)
            });
            record("contrastive_loss", p, d, e);

            let loc: Vec<Mat> = (0..2).map(|_| random_mat(&mut rng, p, 2, 10.0)).collect();
            let e = sampled_relative_error(&mut rng, &empty, &loc, samples, FD_STEP, |g, _, v| {
                localization_loss(g, v[0], v[1])
            });
            record("localization_loss", p, d, e);
        }
    }
    let (name, max) = worst
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "gradient suite",
        max < GRAD_TOL && secs < 60.0,
        format!("{} checks, worst relative error {max:.2e} at {name} (tol {GRAD_TOL:e}), {secs:.1}s", worst.len()),
    );
}

#[test]
fn reduction_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (p, d) = (7, 16);
    let cfg = WindowConfig::with_dim(d);
    let mut ps = ParamStore::new();
    let window = Window::new(&mut ps, "w", &cfg, &mut rng);
    let h = random_mat(&mut rng, p, d, 1.0);

    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let attn = window.attention(&mut g, &ps, hv, &Arc::new(Mat::ones((p, p))), None);
    let wv = g.param(&ps, window.wv.weight);
    let v = g.matmul(hv, wv);
    let out = g.matmul(attn, v);
    let q = h.dot(ps.get(window.wq.weight));
    let k = h.dot(ps.get(window.wk.weight));
    let reference = naive_attention(&q, &k, &h.dot(ps.get(window.wv.weight)), None);
    let window_gap = (g.value(out) - &reference).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));

    let (q, k, v) = (random_mat(&mut rng, p, d, 1.0), random_mat(&mut rng, p, d, 1.0), random_mat(&mut rng, p, d, 1.0));
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let zero = g.constant(Mat::zeros((p, p)));
    let out = cdi_attention(&mut g, qv, kv, vv, Some(zero), None).unwrap();
    let cdi_gap = (g.value(out) - &naive_attention(&q, &k, &v, None)).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));

    let mut ps = ParamStore::new();
    let cons = Consolidation::new(&mut ps, "c", &cfg, &mut rng);
    let x = random_mat(&mut rng, p, d, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = cons.forward(&mut g, &ps, &[xv]).unwrap();
    let single_is_identity = g.value(y) == &x;

    let direct = random_mat(&mut rng, p, p, 1.0);
    let dist = pairwise_distance_matrix(&(0..p).map(|_| [rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0)]).collect::<Vec<_>>());
    let mut g = Graph::new();
    let dv = g.constant(direct.clone());
    let bias = relative_position_bias(&mut g, dv, &dist, 0.0);
    let alpha_zero_exact = g.value(bias) == &direct;

    verdict(
        "reduction identities",
        window_gap <= IDENTITY_TOL && cdi_gap <= IDENTITY_TOL && single_is_identity && alpha_zero_exact,
        format!(
            "unit weights gap {window_gap:.1e}, zero bias gap {cdi_gap:.1e}, one-window identity {single_is_identity}, alpha=0 exact {alpha_zero_exact}"
        ),
    );
}

fn naive_contrastive(t: &Mat, m: &Mat, tau: f64) -> f64 {
    let b = t.nrows();
    let norm = |x: &Mat| {
        let mut x = x.clone();
        for mut row in x.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / n);
        }
        x
    };
    let (t, m) = (norm(t), norm(m));
    let s = |i: usize, j: usize| (0..t.ncols()).map(|c| t[[i, c]] * m[[j, c]]).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| s(i, j).exp()).sum();
        let col: f64 = (0..b).map(|j| s(j, i).exp()).sum();
        total += -(s(i, i).exp() / row).ln() - (s(i, i).exp() / col).ln();
    }
    total / b as f64
}

fn naive_topk(q: &Array1<f64>, descriptors: &Mat, ids: &[u32], k: usize) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = (0..ids.len())
        .map(|r| ((0..q.len()).map(|c| q[c] * descriptors[[r, c]]).sum(), ids[r]))
        .collect();
    // selection: repeatedly take the best remaining
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best = 0;
        for i in 1..scored.len() {
            if scored[i].0 > scored[best].0 || (scored[i].0 == scored[best].0 && scored[i].1 < scored[best].1) {
                best = i;
            }
        }
        out.push(scored.remove(best).1);
    }
    out
}

#[test]
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let instances = 120;
    let mut loss_gap = 0.0f64;
    let mut topk_ok = 0;
    let mut recall_gap = 0.0f64;
    let mut dist_gap = 0.0f64;
    for _ in 0..instances {
        let b = rng.gen_range(2..12);
        let d = rng.gen_range(2..24);
        let t = random_mat(&mut rng, b, d, 1.0);
        let m = random_mat(&mut rng, b, d, 1.0);
        loss_gap = loss_gap.max((contrastive_loss_value(&t, &m, 0.1, true) - naive_contrastive(&t, &m, 0.1)).abs());

        // small integer entries force ties
        let n = rng.gen_range(3..20);
        let dim = rng.gen_range(1..4);
        let descriptors = Mat::from_shape_simple_fn((n, dim), || rng.gen_range(-2..3) as f64);
        let mut ids: Vec<u32> = (0..n as u32).map(|i| i * 3 + 1).collect();
        ids.reverse();
        let index = SubmapIndex {
            descriptors: descriptors.clone(),
            ids: ids.clone(),
            normalized: false,
        };
        let q = Array1::from_shape_simple_fn(dim, || rng.gen_range(-2..3) as f64);
        let k = rng.gen_range(1..=n);
        if retrieve_topk(&q, &index, k).unwrap() == naive_topk(&q, &descriptors, &ids, k) {
            topk_ok += 1;
        }

        let nq = rng.gen_range(1..15);
        let queries = Mat::from_shape_simple_fn((nq, dim), || rng.gen_range(-2..3) as f64);
        let rankings = rank_all(&queries, &index, n).unwrap();
        let positives: Vec<Vec<u32>> = (0..nq)
            .map(|_| (0..rng.gen_range(1..4)).map(|_| ids[rng.gen_range(0..n)]).collect())
            .collect();
        for k in 1..=n {
            let mut hits = 0.0;
            for (r, p) in rankings.iter().zip(&positives) {
                if r[..k].iter().any(|id| p.contains(id)) {
                    hits += 1.0;
                }
            }
            recall_gap = recall_gap.max((recall_at_k(&rankings, &positives, k).unwrap() - hits / nq as f64).abs());
        }

        let c: Vec<[f64; 2]> = (0..rng.gen_range(1..20))
            .map(|_| [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)])
            .collect();
        let dm = pairwise_distance_matrix(&c);
        for i in 0..c.len() {
            for j in 0..c.len() {
                dist_gap = dist_gap.max((dm[[i, j]] - (c[i][0] - c[j][0]).hypot(c[i][1] - c[j][1])).abs());
            }
        }
    }
    verdict(
        "metric oracles",
        loss_gap <= ORACLE_TOL && topk_ok == instances && recall_gap <= ORACLE_TOL && dist_gap <= ORACLE_TOL,
        format!(
            "{instances} instances: contrastive gap {loss_gap:.1e}, top-k exact {topk_ok}/{instances}, recall gap {recall_gap:.1e}, distance gap {dist_gap:.1e}"
        ),
    );
}

#[test]
fn chance_baseline() {
    let cfg = common::standard();
    let split = common::chance_split(&cfg);
    let model = CoarseModel::new(cfg.coarse.clone(), 1).unwrap();
    let index = cmmloc::coarse::build_index(&model, &split).unwrap();
    let queries = model.encode_queries(&split.queries).unwrap();
    let rankings = rank_all(&queries, &index, 5).unwrap();
    let positives: Vec<Vec<u32>> = split.queries.iter().map(|q| q.positive_submaps.clone()).collect();
    let counts: Vec<usize> = positives.iter().map(Vec::len).collect();
    let mut lines = Vec::new();
    let mut pass = split.queries.len() >= 500;
    for k in [1, 3, 5] {
        let r = recall_at_k(&rankings, &positives, k).unwrap();
        let (mean, sd) = chance_recall(index.len(), &counts, k);
        let z = (r - mean) / sd;
        pass &= z.abs() <= 3.0;
        lines.push(format!("r@{k} {r:.3} vs {mean:.3}±{sd:.3} (z {z:+.2})"));
    }
    verdict(
        "chance baseline",
        pass,
        format!("{} queries, {} submaps: {}", split.queries.len(), index.len(), lines.join(", ")),
    );
}

const COARSE_R1: f64 = 0.60;
const COARSE_R5: f64 = 0.90;
const CHANCE_R1: f64 = 0.10;
const COARSE_BUDGET_S: f64 = 900.0;

#[test]
fn coarse_learning_signal() {
    let cfg = common::standard();
    let start = Instant::now();
    let [train, val, test] = cmmloc::scene::generate_dataset(&cfg.data, cfg.seed_for(SeedStream::Data)).unwrap();
    let model = pipeline::fit_coarse(&cfg, &train, &val, None).unwrap();
    let r = cmmloc::coarse::evaluate_retrieval(&model, &test, &[1, 3, 5]).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let index_size = test.submaps.len();
    let counts: Vec<usize> = test.queries.iter().map(|q| q.positive_submaps.len()).collect();
    let (chance, _) = chance_recall(index_size, &counts, 1);
    verdict(
        "coarse learning signal",
        r[0] >= COARSE_R1 && r[2] >= COARSE_R5 && chance < CHANCE_R1 && secs <= COARSE_BUDGET_S,
        format!(
            "test r@1 {:.3} (min {COARSE_R1}), r@3 {:.3}, r@5 {:.3} (min {COARSE_R5}), chance r@1 {chance:.3} (max {CHANCE_R1}), {secs:.0}s (max {COARSE_BUDGET_S})",
            r[0], r[1], r[2]
        ),
    );
}

#[test]
fn determinism() {
    let cfg = common::tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ta = run_end_to_end(&cfg, a.path()).unwrap();
    let tb = run_end_to_end(&cfg, b.path()).unwrap();
    let bits = |t: &ResultsTable| t.rows.iter().map(|r| r.value.to_bits()).collect::<Vec<_>>();
    let same_values = bits(&ta) == bits(&tb);
    let files = ["results.csv", "localization.jsonl", "coarse.ckpt", "fine.ckpt", "data/test.jsonl"];
    let same_files = files
        .iter()
        .all(|f| std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap());
    let ablation_a = ablate(Ablation::LayerCount, &cfg, &[1]).unwrap();
    let ablation_b = ablate(Ablation::LayerCount, &cfg, &[1]).unwrap();
    let same_ablation = bits(&ablation_a) == bits(&ablation_b);
    verdict(
        "determinism",
        same_values && same_files && same_ablation,
        format!(
            "{} metrics bit-identical {same_values}, artifacts byte-identical {same_files}, ablation rows bit-identical {same_ablation}",
            ta.rows.len()
        ),
    );
}

fn seed_means(t: &ResultsTable, experiment: &str, metric: &str, k: Option<usize>) -> f64 {
    common::mean(&t.values(experiment, metric, k))
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn ok(b: bool) -> &'static str {
    if b { "ok" } else { "failed" }
}

#[test]
fn ablation_directionality() {
    let base = common::ablation_base();
    let mut parts = Vec::new();
    let mut pass = true;

    let t = ablate(Ablation::WindowFamily, &base, &SEEDS).unwrap();
    let (c, g) = (
        seed_means(&t, "window-family/cauchy", "retrieval_recall", Some(5)),
        seed_means(&t, "window-family/gaussian", "retrieval_recall", Some(5)),
    );
    let sd = common::paired_sd(
        &t.values("window-family/cauchy", "retrieval_recall", Some(5)),
        &t.values("window-family/gaussian", "retrieval_recall", Some(5)),
    );
    pass &= c >= g;
    parts.push(format!(
        "(a) {} cauchy r@5 {c:.3} vs gaussian {g:.3}, gap {:+.3} ({})",
        ok(c >= g),
        c - g,
        if (c - g).abs() <= 2.0 * sd / (SEEDS.len() as f64).sqrt() { "within noise" } else { "beyond 2 s.e." }
    ));

    let t = ablate(Ablation::NoiseSweep, &base, &SEEDS).unwrap();
    let r: Vec<f64> = ["0", "0.1", "0.2", "0.3"]
        .iter()
        .map(|n| seed_means(&t, &format!("noise-sweep/noise-{n}"), "retrieval_recall", Some(5)))
        .collect();
    let monotone = r.windows(2).all(|w| w[1] <= w[0]);
    pass &= monotone;
    parts.push(format!("(b) {} r@5 over noise 0..0.3 {r:.3?}", ok(monotone)));

    // depth and the fine modules are compared on fully trained models
    let t = ablate(Ablation::LayerCount, &common::standard(), &SEEDS).unwrap();
    let l: Vec<f64> = (0..3)
        .map(|n| seed_means(&t, &format!("layer-count/layers-{n}"), "retrieval_recall", Some(5)))
        .collect();
    pass &= l[1] >= l[2];
    parts.push(format!("(c) {} r@5 layers 0/1/2 {l:.3?}", ok(l[1] >= l[2])));

    let t = ablate(Ablation::FineModules, &common::centroid_task(), &SEEDS).unwrap();
    let m: Vec<f64> = ["base", "pa", "cdi", "pa+cdi"]
        .iter()
        .map(|v| seed_means(&t, &format!("fine-modules/{v}"), "median_error", None))
        .collect();
    pass &= m[1] <= m[0] && m[2] <= m[0];
    parts.push(format!(
        "(d) pa {} cdi {} median error base/pa/cdi/pa+cdi {m:.2?}",
        ok(m[1] <= m[0]),
        ok(m[2] <= m[0])
    ));

    verdict("ablation directionality", pass, parts.join("; "));
}

const FINE_MEDIAN_M: f64 = 2.0;

fn grid_is_monotone(t: &ResultsTable) -> bool {
    let cell = |k: usize, e: f64| t.find("fine", "localization_recall", Some(k), Some(e)).map(|r| r.value);
    let ks = [1, 5, 10];
    let eps = [5.0, 10.0, 15.0];
    let mut ok = true;
    for (a, &k) in ks.iter().enumerate() {
        for (b, &e) in eps.iter().enumerate() {
            let Some(v) = cell(k, e) else { return false };
            if a > 0 {
                ok &= v >= cell(ks[a - 1], e).unwrap_or(f64::INFINITY);
            }
            if b > 0 {
                ok &= v >= cell(k, eps[b - 1]).unwrap_or(f64::INFINITY);
            }
        }
    }
    ok
}

#[test]
fn fine_learning_signal() {
    let cfg = common::centroid_task();
    let [train, val, test] = cmmloc::scene::generate_dataset(&cfg.data, cfg.seed_for(SeedStream::Data)).unwrap();
    let start = Instant::now();
    let init = pipeline::fit_prealign(&cfg, &train, None).unwrap();
    let fine = pipeline::fit_fine(&cfg, init, &train, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut errors = cmmloc::fine::oracle_submap_errors(&fine, &test).unwrap();
    let median = cmmloc::fine::median(&mut errors).unwrap();

    // recall grids through a briefly trained retriever and through the
    // standard-task models
    let mut quick = cfg.clone();
    quick.coarse = cmmloc::coarse::CoarseConfig::with_dim(32);
    quick.coarse.train.epochs = 2;
    let coarse = pipeline::fit_coarse(&quick, &train, &val, None).unwrap();
    let (table, _, _) = pipeline::evaluate(&quick, "fine", &coarse, &fine, &test).unwrap();
    let tiny = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let mut standard = run_end_to_end(&tiny, dir.path()).unwrap();
    for r in &mut standard.rows {
        r.experiment = "fine".into();
    }
    let monotone = grid_is_monotone(&table) && grid_is_monotone(&standard);
    verdict(
        "fine learning signal",
        median < FINE_MEDIAN_M && monotone,
        format!(
            "centroid task test median error {median:.3} m (max {FINE_MEDIAN_M}) over {} queries after {secs:.0}s, recall grids monotone {monotone}",
            test.queries.len()
        ),
    );
}
